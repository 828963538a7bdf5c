"""Three-term training objective: global reconstruction, robust suppression
of predicted changes on non-DEG genes, and alignment of the graph context
with the masked response signature.

Each term has a plain numpy evaluator (the public contract) and a tape
builder used by training; the builders compose only ops whose gradients are
verified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DegTable
from .errors import DegenerateError, ShapeError, UsageError
from .numerics import NORM_EPS, Tape, huber_value


@dataclass
class LossWeights:
    """Term weights; huber_delta of None means estimate it from training non-DEG deltas."""

    lambda_non: float = 0.01
    lambda_align: float = 0.1
    huber_delta: float | None = None
    huber_scale: float = 1.0  # delta = scale * std of pooled non-DEG deltas

    def validate(self) -> None:
        if self.lambda_non < 0 or self.lambda_align < 0:
            raise UsageError("loss weights must be nonnegative")
        if self.huber_delta is not None and not (0 < self.huber_delta < np.inf):
            raise UsageError("huber_delta must be positive and finite")
        if self.huber_scale <= 0:
            raise UsageError("huber_scale must be positive")


def recon_loss(x_hat: np.ndarray, xbar_p: np.ndarray) -> float:
    """Mean squared error over genes between prediction and perturbed pseudobulk."""
    a = np.asarray(x_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(xbar_p, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"profile lengths differ: {a.size} vs {b.size}")
    d = a - b
    return float((d * d).mean())


def estimate_huber_delta(table: DegTable, train_perts: list[str] | None = None, scale: float = 1.0) -> float:
    """delta = scale x population std of non-DEG deltas pooled over training perturbations.

    Raises DegenerateError when the pool is empty or has zero spread; callers
    typically fall back to delta = 1.0.
    """
    names = table.pert_names() if train_perts is None else sorted(train_perts)
    if not names:
        raise UsageError("training DEG table is empty")
    pool = []
    for name in names:
        mask = table.non_deg_mask(name)
        pool.append(table.deltas[name][mask])
    pooled = np.concatenate(pool) if pool else np.array([])
    if pooled.size == 0:
        raise DegenerateError("no non-DEG deltas to estimate the huber threshold")
    std = float(pooled.std())
    if std == 0.0:
        raise DegenerateError("non-DEG deltas have zero spread")
    return scale * std


def non_deg_loss(x_hat: np.ndarray, xbar_c: np.ndarray, non_deg_mask: np.ndarray, delta: float) -> float:
    """Mean Huber penalty of the predicted change on non-DEG genes (0 when the set is empty)."""
    if delta <= 0:
        raise UsageError("huber delta must be positive")
    mask = np.asarray(non_deg_mask, dtype=bool).reshape(-1)
    if not mask.any():
        return 0.0
    r = (np.asarray(x_hat, dtype=np.float64) - np.asarray(xbar_c, dtype=np.float64)).reshape(-1)
    return float(huber_value(r[mask], delta).mean())


def masked_response(delta: np.ndarray, deg_mask: np.ndarray) -> np.ndarray:
    """Signed effect sizes on DEGs, zero elsewhere."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    mask = np.asarray(deg_mask, dtype=bool).reshape(-1)
    return np.where(mask, delta, 0.0)


def align_loss(
    z_context: np.ndarray,
    delta: np.ndarray,
    deg_mask: np.ndarray,
    head: np.ndarray,
) -> float:
    """Squared distance between the unit context vector and the unit projected
    response target; 0 when either vector is (numerically) zero."""
    z = np.asarray(z_context, dtype=np.float64).reshape(-1)
    y = masked_response(delta, deg_mask)
    if head.shape[0] != y.size or head.shape[1] != z.size:
        raise ShapeError(f"alignment head {head.shape} does not map {y.size} -> {z.size}")
    t = y @ head
    nz, nt = np.linalg.norm(z), np.linalg.norm(t)
    if nz <= NORM_EPS or nt <= NORM_EPS:
        return 0.0
    u = z / nz - t / nt
    return float(u @ u)


def total_loss(recon: float, non: float, align: float, weights: LossWeights) -> float:
    weights.validate()
    return recon + weights.lambda_non * non + weights.lambda_align * align


# --- tape builders -----------------------------------------------------------------


def build_recon_loss(tape: Tape, x_hat_id: int, xbar_p: np.ndarray) -> int:
    return tape.apply("mse", x_hat_id, tape.constant(np.asarray(xbar_p).reshape(1, -1)))


def build_non_deg_loss(
    tape: Tape,
    x_hat_id: int,
    xbar_c: np.ndarray,
    non_deg_mask: np.ndarray,
    delta: float,
) -> int:
    mask = np.asarray(non_deg_mask, dtype=bool).reshape(-1)
    if not mask.any():
        return tape.constant(np.zeros((1, 1)))
    diff = tape.apply("add", x_hat_id, tape.constant(-np.asarray(xbar_c).reshape(1, -1)))
    rho = tape.apply("huber", diff, delta=delta)
    # column of 1/|non-DEG| on the non-DEG genes turns the matmul into their mean
    weights_col = (mask / mask.sum()).reshape(-1, 1)
    return tape.apply("matmul", rho, tape.constant(weights_col))


def build_align_loss(
    tape: Tape,
    z_context_id: int,
    delta: np.ndarray,
    deg_mask: np.ndarray,
    head_id: int,
) -> int:
    y = masked_response(delta, deg_mask).reshape(1, -1)
    target = tape.apply("matmul", tape.constant(y), head_id)
    return tape.apply("cosine-distance", z_context_id, target)


def build_total_loss(
    tape: Tape,
    recon_id: int,
    non_id: int,
    align_id: int,
    weights: LossWeights,
) -> int:
    weights.validate()
    weighted = tape.apply(
        "add",
        tape.apply("scale", non_id, c=weights.lambda_non),
        tape.apply("scale", align_id, c=weights.lambda_align),
    )
    return tape.apply("add", recon_id, weighted)
