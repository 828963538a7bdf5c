"""Command-line front end: synth, train, eval, predict, graph-stats, and
deg-coverage subcommands, driven by an INI config with flag overrides
(flags > file > defaults). All randomness derives from the single --seed.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, write_effective_config
from .data import (
    compute_degs,
    load_embeddings,
    load_expression,
    save_embeddings,
    save_expression,
    split_by_perturbation,
    synth_generate,
)
from .errors import DataError, NumericalError, UsageError
from .graph import deg_coverage, degree_stats, load_edge_list, nominations, save_edge_list, topk_filter
from .metrics import evaluate_predictions, write_scatter_csv
from .model import load_checkpoint, save_checkpoint
from .training import derive_seed, predict_profiles, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); route to exit code 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="pertgraph", description="perturbation response prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="INI run config")
        sp.add_argument("--seed", type=int, help="root seed; submodule seeds derive from it")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int, help="cap for read-only fan-outs")
        sp.add_argument("--ablation", choices=("full", "no_context", "no_non_deg"))

    add_common(sub.add_parser("synth", help="generate a planted synthetic dataset"))
    add_common(sub.add_parser("train", help="train a model"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", help="checkpoint manifest (default <out>/checkpoint.json)")
    p_eval.add_argument("--splits", help="splits JSON (default: next to the checkpoint)")
    p_eval.add_argument("--oracle", action="store_true", help="score the truth as its own prediction")
    p_pred = sub.add_parser("predict", help="write predicted profiles for the test split")
    add_common(p_pred)
    p_pred.add_argument("--checkpoint", help="checkpoint manifest (default <out>/checkpoint.json)")
    p_pred.add_argument("--splits", help="splits JSON (default: next to the checkpoint)")
    add_common(sub.add_parser("graph-stats", help="topology statistics after optional top-k filtering"))
    add_common(sub.add_parser("deg-coverage", help="DEG coverage by hop distance from each perturbed gene"))
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for flag in ("seed", "out", "threads", "ablation"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    return cfg


def _require_paths(cfg: RunConfig, names: tuple[str, ...]) -> None:
    for name in names:
        path = getattr(cfg, name)
        if path is None:
            raise UsageError(f"[paths] {name} is required for this command")
        if not Path(path).exists():
            raise DataError(f"missing {name} file: {path}")


def _load_inputs(cfg: RunConfig):
    _require_paths(cfg, ("expression", "graph", "embeddings"))
    dataset = load_expression(cfg.expression)
    graph, dropped = load_edge_list(cfg.graph, dataset.vocab)
    if cfg.top_k >= 1:
        graph = topk_filter(graph, cfg.top_k, cfg.topk_mode)
    embeddings = load_embeddings(cfg.embeddings, dataset.vocab)
    return dataset, graph, embeddings, dropped


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    synth = synth_generate(cfg.synth_config(), derive_seed(cfg.seed, "synth"))
    save_expression(synth.dataset, out / "expression.csv")
    save_edge_list(synth.graph, out / "graph.tsv")
    save_embeddings(synth.embeddings, out / "embeddings.csv", genes=synth.dataset.vocab.names)
    manifest = {
        "seed": cfg.seed,
        "n_genes": cfg.n_genes,
        "n_perturbations": cfg.n_perturbations,
        "deg_sets": synth.truth_degs,
        "strata": synth.strata,
        "effects": {p: eff.tolist() for p, eff in sorted(synth.effects.items())},
    }
    _dump_json(manifest, out / "truth.json")
    write_effective_config(cfg, out)
    print(f"synth: wrote expression/graph/embeddings/truth under {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    dataset, graph, embeddings, _ = _load_inputs(cfg)
    splits = split_by_perturbation(dataset, cfg.split_fractions, derive_seed(cfg.seed, "split"))
    params, history = train(dataset, splits, graph, embeddings, cfg.train_config())
    save_checkpoint(params, out / "checkpoint.json", out / "checkpoint.bin")
    history.checkpoint_ref = "checkpoint.json"
    history.save(out / "history.json")
    _dump_json(
        {"train": list(splits.train), "val": list(splits.val), "test": list(splits.test), "seed": splits.seed},
        out / "splits.json",
    )
    write_effective_config(cfg, out)
    best = history.epochs[history.best_epoch]
    print(
        f"train: {len(history.epochs)} epochs, best epoch {history.best_epoch} "
        f"(val_pearson_delta={best['val_pearson_delta']})"
    )
    return EXIT_OK


def _resolve_checkpoint_paths(cfg: RunConfig, args) -> tuple[Path, Path]:
    manifest = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.json"
    if not manifest.exists():
        raise DataError(f"missing checkpoint manifest: {manifest}")
    blob = manifest.with_suffix(".bin")
    if not blob.exists():
        raise DataError(f"missing checkpoint blob: {blob}")
    return manifest, blob


def _resolve_test_split(cfg: RunConfig, args, dataset, manifest: Path | None) -> list[str]:
    split_path = None
    if getattr(args, "splits", None):
        split_path = Path(args.splits)
        if not split_path.exists():
            raise DataError(f"missing splits file: {split_path}")
    elif manifest is not None and (manifest.parent / "splits.json").exists():
        split_path = manifest.parent / "splits.json"
    if split_path is not None:
        with open(split_path, "r", encoding="utf-8") as fh:
            return list(json.load(fh)["test"])
    splits = split_by_perturbation(dataset, cfg.split_fractions, derive_seed(cfg.seed, "split"))
    return list(splits.test)


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    dataset, graph, embeddings, _ = _load_inputs(cfg)
    xbar_c = dataset.control.mean(axis=0)
    if args.oracle:
        manifest = None
        test_perts = _resolve_test_split(cfg, args, dataset, None)
        predictions = {p: dataset.block(p).mean(axis=0) for p in test_perts}
    else:
        manifest, blob = _resolve_checkpoint_paths(cfg, args)
        params = load_checkpoint(manifest, blob)
        test_perts = _resolve_test_split(cfg, args, dataset, manifest)
        graph_arg = None if params.config.no_context else graph
        emb_arg = None if params.config.no_context else embeddings
        predictions = predict_profiles(params, xbar_c, test_perts, graph_arg, emb_arg)
    if not test_perts:
        raise UsageError("test split is empty")
    rep, truth = evaluate_predictions(
        dataset, predictions, test_perts,
        alpha=cfg.alpha, correction=cfg.deg_correction, des_k=cfg.des_k, threads=cfg.threads,
    )
    rep.save(out / "metrics.json")
    for p in sorted(test_perts):
        write_scatter_csv(
            out / f"scatter_{p}.csv",
            dataset.vocab.names,
            truth.deltas[p],
            predictions[p] - xbar_c,
            truth.deg_mask(p),
        )
    write_effective_config(cfg, out)
    pd = rep.overall.get("pearson_delta", {})
    print(f"eval: {len(test_perts)} test perturbations, pearson_delta mean={pd.get('mean')}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    dataset, graph, embeddings, _ = _load_inputs(cfg)
    manifest, blob = _resolve_checkpoint_paths(cfg, args)
    params = load_checkpoint(manifest, blob)
    test_perts = _resolve_test_split(cfg, args, dataset, manifest)
    if not test_perts:
        raise UsageError("test split is empty")
    xbar_c = dataset.control.mean(axis=0)
    graph_arg = None if params.config.no_context else graph
    emb_arg = None if params.config.no_context else embeddings
    predictions = predict_profiles(params, xbar_c, test_perts, graph_arg, emb_arg)
    with open(out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["perturbation"] + dataset.vocab.names) + "\n")
        for p in sorted(predictions):
            fh.write(",".join([p] + [repr(float(x)) for x in predictions[p]]) + "\n")
    write_effective_config(cfg, out)
    print(f"predict: wrote {len(predictions)} profiles to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_graph_stats(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    _require_paths(cfg, ("expression", "graph"))
    dataset = load_expression(cfg.expression)
    raw, dropped = load_edge_list(cfg.graph, dataset.vocab)
    filtered = topk_filter(raw, cfg.top_k, cfg.topk_mode) if cfg.top_k >= 1 else raw
    stats = degree_stats(filtered)
    payload = {
        "nodes": stats.n_nodes,
        "edges": stats.n_edges,
        "mean_degree": stats.mean_degree,
        "median_degree": stats.median_degree,
        "dropped_edges": dropped,
        "top_k": cfg.top_k,
        "topk_mode": cfg.topk_mode,
    }
    if cfg.top_k >= 1:
        noms = nominations(raw, cfg.top_k)
        kept = filtered.edge_set()
        payload["nominated_bound_ok"] = bool(
            all(len(s) <= cfg.top_k for s in noms)
            and all(v in noms[u] or u in noms[v] for (u, v) in kept)
        )
    _dump_json(payload, out / "graph_stats.json")
    write_effective_config(cfg, out)
    print(f"graph-stats: {stats.n_nodes} nodes, {stats.n_edges} edges -> {out / 'graph_stats.json'}")
    return EXIT_OK


def cmd_deg_coverage(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    _require_paths(cfg, ("expression", "graph"))
    dataset = load_expression(cfg.expression)
    graph, _ = load_edge_list(cfg.graph, dataset.vocab)
    if cfg.top_k >= 1:
        graph = topk_filter(graph, cfg.top_k, cfg.topk_mode)
    table = compute_degs(dataset, alpha=cfg.alpha, correction=cfg.deg_correction, threads=cfg.threads)
    per: dict[str, list[float]] = {}
    skipped = 0
    for pert in table.pert_names():
        deg_idx = table.deg_indices(pert)
        genes = [dataset.vocab.names[i] for i in deg_idx if dataset.vocab.names[i] != pert]
        if not genes:
            skipped += 1
            continue
        per[pert] = deg_coverage(graph, pert, genes, cfg.coverage_max_hops)
    mean_cov = (
        [float(np.mean([v[h] for v in per.values()])) for h in range(cfg.coverage_max_hops)]
        if per
        else []
    )
    _dump_json(
        {
            "max_hops": cfg.coverage_max_hops,
            "per_perturbation": per,
            "mean_coverage": mean_cov,
            "skipped_empty_deg_sets": skipped,
        },
        out / "deg_coverage.json",
    )
    write_effective_config(cfg, out)
    print(f"deg-coverage: {len(per)} perturbations -> {out / 'deg_coverage.json'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "graph-stats": cmd_graph_stats,
    "deg-coverage": cmd_deg_coverage,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
