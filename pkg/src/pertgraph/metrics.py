"""Evaluation suite for predicted perturbation effects.

All metrics operate on pseudobulk deltas (profile minus control mean):
delta correlation, a rank-based discrimination score across the test set,
DEG recovery (both top-k ranking and significance-set overlap), Spearman
agreement on DEGs (plain and effect-size-weighted), direction match, and
stratified mean/std reporting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data import bh_adjust, welch_pvalues
from .errors import DegenerateError, ShapeError, UsageError

METRIC_NAMES = (
    "pearson_delta",
    "pds",
    "des_fdr",
    "de_spearman_sig",
    "de_spearman_lfc",
    "direction_match",
)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ShapeError(f"vector lengths differ: {x.size} vs {y.size}")
    return x, y


def pearson_delta(pred_delta, true_delta) -> float:
    """Pearson correlation of predicted vs true expression deltas."""
    x, y = _pair(pred_delta, true_delta)
    if x.size < 2:
        raise UsageError("need at least 2 genes")
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt((xc * xc).sum())
    ny = np.sqrt((yc * yc).sum())
    if nx == 0.0 or ny == 0.0:
        raise DegenerateError("correlation undefined for a constant vector")
    return float((xc * yc).sum() / (nx * ny))


def rank_average_ties(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _weighted_pearson(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    wsum = w.sum()
    mx = (w * x).sum() / wsum
    my = (w * y).sum() / wsum
    cov = (w * (x - mx) * (y - my)).sum() / wsum
    vx = (w * (x - mx) ** 2).sum() / wsum
    vy = (w * (y - my) ** 2).sum() / wsum
    if vx == 0.0 or vy == 0.0:
        raise DegenerateError("weighted correlation undefined for constant ranks")
    return float(cov / np.sqrt(vx * vy))


def de_spearman_lfc(pred_delta_deg, true_delta_deg, weights=None) -> float:
    """Weighted Spearman over DEGs: weighted Pearson on average-tie ranks,
    weighted by |true delta| unless explicit weights are given."""
    x, y = _pair(pred_delta_deg, true_delta_deg)
    if x.size < 2:
        raise UsageError("need at least 2 DEGs")
    w = np.abs(y) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != x.size:
        raise ShapeError("weights length mismatch")
    if np.any(w < 0):
        raise UsageError("weights must be nonnegative")
    if not np.any(w > 0):
        raise DegenerateError("all-zero weights")
    return _weighted_pearson(rank_average_ties(x), rank_average_ties(y), w)


def de_spearman_sig(pred_delta_deg, true_delta_deg) -> float:
    """Plain Spearman over DEGs (the uniform-weight case of the weighted variant)."""
    x, y = _pair(pred_delta_deg, true_delta_deg)
    return de_spearman_lfc(x, y, weights=np.ones(x.size))


def direction_match(pred_delta_deg, true_delta_deg) -> float:
    """Fraction of DEGs whose predicted and true signs agree (sign(0) = 0)."""
    x, y = _pair(pred_delta_deg, true_delta_deg)
    if x.size < 1:
        raise UsageError("need at least 1 DEG")
    return float(np.mean(np.sign(x) == np.sign(y)))


def pds(
    pred_deltas: dict[str, np.ndarray],
    true_deltas: dict[str, np.ndarray],
) -> tuple[dict[str, float], float]:
    """Discrimination score: is a prediction L1-closest to its own true effect?

    rank r_p counts strictly closer foreign effects; the score is
    1 - (r_p - 1)/|T| per perturbation, averaged over the test set.
    """
    names = sorted(pred_deltas)
    if not names:
        raise UsageError("need at least one perturbation")
    if set(names) != set(true_deltas):
        raise UsageError("prediction and truth keys differ")
    t_count = len(names)
    scores: dict[str, float] = {}
    for p in names:
        d = {t: float(np.abs(pred_deltas[p] - true_deltas[t]).sum()) for t in names}
        rank = 1 + sum(1 for t in names if t != p and d[t] < d[p])
        scores[p] = 1.0 - (rank - 1) / t_count
    return scores, float(np.mean(list(scores.values())))


def des_fdr(g_true: set[int], g_pred: set[int]) -> float:
    """Fraction of true DEGs recovered in the predicted significant set."""
    if not g_true:
        raise DegenerateError("true DEG set is empty")
    return len(set(g_true) & set(g_pred)) / len(g_true)


def predicted_deg_set(
    control_block: np.ndarray,
    pred_delta: np.ndarray,
    alpha: float = 0.05,
    correction: str = "none",
) -> set[int]:
    """Significant genes of a predicted profile, by Welch against control.

    The predicted condition is materialized as the control samples shifted by
    the predicted delta, so a single predicted profile is testable against the
    control variance with the same settings used for the ground truth.
    """
    shifted = control_block + np.asarray(pred_delta, dtype=np.float64).reshape(1, -1)
    p = welch_pvalues(control_block, shifted)
    if correction == "benjamini-hochberg":
        p = bh_adjust(p)
    elif correction != "none":
        raise UsageError(f"unknown correction {correction!r}")
    return set(np.flatnonzero(p < alpha).tolist())


def des_at_k(pred_delta: np.ndarray, g_true: set[int], k: int) -> float:
    """Fraction of true DEGs in the k genes with the largest |predicted delta|.

    Magnitude ties break toward the lower gene index; the denominator is
    min(k, |g_true|) so a perfect ranker scores 1 even when k < |g_true|.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    if not g_true:
        raise DegenerateError("true DEG set is empty")
    x = np.asarray(pred_delta, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(x.size), -np.abs(x)))
    top = set(order[:k].tolist())
    return len(top & set(g_true)) / min(k, len(g_true))


# --- reporting -----------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-perturbation metric values plus overall and stratum aggregates."""

    per_perturbation: dict[str, dict[str, float | None]]
    overall: dict[str, dict[str, float]]
    strata: dict[str, dict[str, dict[str, float]]]

    def to_json_dict(self) -> dict:
        return {
            "overall": self.overall,
            "strata": self.strata,
            "per_perturbation": self.per_perturbation,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


def _aggregate(values: list[float]) -> dict[str, float]:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def report(
    per_perturbation: dict[str, dict[str, float | None]],
    strata: dict[str, str] | None = None,
) -> MetricsReport:
    """Aggregate per-perturbation metrics: mean with population std, overall and
    per stratum; None entries (undefined metrics) are excluded from the counts."""
    strata = strata or {}
    missing = set(strata) - set(per_perturbation)
    metric_names = sorted({m for row in per_perturbation.values() for m in row})
    if missing:
        raise UsageError(f"strata reference unknown perturbations: {sorted(missing)}")

    def collect(names):
        out = {}
        for metric in metric_names:
            vals = [
                per_perturbation[p][metric]
                for p in names
                if per_perturbation[p].get(metric) is not None
            ]
            out[metric] = _aggregate(vals)
        return out

    overall = collect(sorted(per_perturbation))
    by_stratum: dict[str, dict] = {}
    for stratum in sorted(set(strata.values())):
        members = sorted(p for p, s in strata.items() if s == stratum)
        by_stratum[stratum] = collect(members)
    return MetricsReport(
        per_perturbation={p: dict(per_perturbation[p]) for p in sorted(per_perturbation)},
        overall=overall,
        strata=by_stratum,
    )


def write_scatter_csv(path, genes: list[str], delta_true: np.ndarray, delta_pred: np.ndarray, deg_mask: np.ndarray) -> None:
    """Per-gene true/predicted delta pairs with the DEG flag, for scatter plotting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gene", "delta_true", "delta_pred", "is_deg"])
        for g, dt, dp, m in zip(genes, delta_true, delta_pred, deg_mask):
            writer.writerow([g, repr(float(dt)), repr(float(dp)), int(m)])


def evaluate_predictions(
    dataset,
    predictions: dict[str, np.ndarray],
    perts: list[str],
    alpha: float = 0.05,
    correction: str = "none",
    des_k: tuple[int, ...] = (10, 50, 100),
    threads: int = 1,
):
    """Score predicted absolute profiles against the dataset's ground truth.

    Returns (MetricsReport, truth DegTable). Metrics that are undefined for a
    perturbation (no true DEGs, fewer than 2 DEGs, constant delta) come back
    as None and are excluded from the aggregates with their counts.
    """
    from .data import compute_degs, effect_size_strata  # local import avoids a cycle at module load

    perts = sorted(perts)
    if not perts:
        raise UsageError("no perturbations to evaluate")
    missing = [p for p in perts if p not in predictions]
    if missing:
        raise UsageError(f"missing predictions for {missing}")
    truth = compute_degs(dataset, alpha=alpha, correction=correction, threads=threads, perturbations=perts)
    xbar_c = dataset.control.mean(axis=0)
    pred_deltas = {p: np.asarray(predictions[p], dtype=np.float64).reshape(-1) - xbar_c for p in perts}
    true_deltas = {p: truth.deltas[p] for p in perts}
    pds_scores, _ = pds(pred_deltas, true_deltas)

    per: dict[str, dict[str, float | None]] = {}
    for p in perts:
        dp, dt = pred_deltas[p], true_deltas[p]
        deg_idx = truth.deg_indices(p)
        row: dict[str, float | None] = {"pds": pds_scores[p]}
        try:
            row["pearson_delta"] = pearson_delta(dp, dt)
        except (DegenerateError, UsageError):
            row["pearson_delta"] = None
        if deg_idx.size:
            g_true = set(deg_idx.tolist())
            row["des_fdr"] = des_fdr(g_true, predicted_deg_set(dataset.control, dp, alpha, correction))
            for k in des_k:
                row[f"des_at_{k}"] = des_at_k(dp, g_true, k)
        else:
            row["des_fdr"] = None
            for k in des_k:
                row[f"des_at_{k}"] = None
        if deg_idx.size >= 2:
            try:
                row["de_spearman_sig"] = de_spearman_sig(dp[deg_idx], dt[deg_idx])
            except DegenerateError:
                row["de_spearman_sig"] = None
            try:
                row["de_spearman_lfc"] = de_spearman_lfc(dp[deg_idx], dt[deg_idx])
            except DegenerateError:
                row["de_spearman_lfc"] = None
        else:
            row["de_spearman_sig"] = None
            row["de_spearman_lfc"] = None
        row["direction_match"] = direction_match(dp[deg_idx], dt[deg_idx]) if deg_idx.size else None
        per[p] = row
    return report(per, effect_size_strata(truth)), truth
