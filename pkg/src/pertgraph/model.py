"""Conditional perturbation-response model.

Pipeline per perturbation: graph message passing produces structural node
embeddings; the perturbation's semantic vector is projected into the same
space and drives a per-node relevance score; Gumbel-perturbed softmax scores
select a sparse node subset (the perturbed gene is always force-included);
the selected embeddings are summed into a context vector that is fused with
the encoded control profile to decode the predicted expression.

Node selection is discrete, so training uses a straight-through sum: the
forward value is the plain sum over hard-selected nodes, while gradients
flow through the soft selection weights. The stop-gradient buffers (hard
mask, base soft weights) are materialized as tape constants; freezing them
across evaluations makes the surrogate an honest differentiable function,
which is how the gradient checks run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SemanticEmbeddings
from .errors import NumericalError, ShapeError, UsageError
from .graph import KnowledgeGraph
from .numerics import Tape

ALPHA_FLOOR = 1e-12


@dataclass
class ModelConfig:
    """Architecture hyperparameters (defaults follow the desk-scale setup)."""

    n_layers: int = 2           # message-passing rounds
    d_struct: int = 64          # structural embedding width
    d_latent: int = 128         # encoder/decoder latent width
    d_score: int = 64           # scorer hidden width
    tau: float = 1.0            # Gumbel-softmax temperature
    threshold: float | None = None  # selection cutoff; None means 1/n_nodes
    selection_mode: str = "threshold"   # "threshold" | "top_m"
    select_top_m: int = 10
    weighted_aggregation: bool = False  # use edge confidences in the neighbor mean
    no_context: bool = False    # ablation: learned per-perturbation rows replace the graph context

    def resolve_threshold(self, n_nodes: int) -> float:
        return 1.0 / n_nodes if self.threshold is None else self.threshold


@dataclass
class ModelParams:
    """All learnable weights, addressable by stable name."""

    config: ModelConfig
    n_nodes: int
    n_genes: int
    d_embed: int
    seed: int
    values: dict[str, np.ndarray]
    pert_index: dict[str, int] = field(default_factory=dict)  # no_context row map

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            n_nodes=self.n_nodes,
            n_genes=self.n_genes,
            d_embed=self.d_embed,
            seed=self.seed,
            values={k: v.copy() for k, v in self.values.items()},
            pert_index=dict(self.pert_index),
        )


def init_params(
    n_nodes: int,
    n_genes: int,
    d_embed: int,
    config: ModelConfig,
    seed: int,
    train_perts: list[str] | None = None,
) -> ModelParams:
    """Seeded Gaussian init, std 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(seed)
    ds, d, m = config.d_struct, config.d_latent, config.d_score

    def w(fan_in, shape):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    values: dict[str, np.ndarray] = {}
    values["gnn.table"] = w(ds, (n_nodes, ds))
    for layer in range(config.n_layers):
        values[f"gnn.w{layer}"] = w(ds, (ds, ds))
    values["sem.proj"] = w(d_embed, (d_embed, ds))
    values["score.w"] = w(2 * ds, (2 * ds, m))
    values["score.v"] = w(m, (m, 1))
    values["enc.w1"] = w(n_genes, (n_genes, d))
    values["enc.b1"] = np.zeros((1, d))
    values["enc.w2"] = w(d, (d, d))
    values["enc.b2"] = np.zeros((1, d))
    values["ctx.proj"] = w(ds, (ds, d))
    values["dec.w1"] = w(2 * d, (2 * d, d))
    values["dec.b1"] = np.zeros((1, d))
    values["dec.w2"] = w(d, (d, n_genes))
    values["dec.b2"] = np.zeros((1, n_genes))
    values["align.proj"] = w(n_genes, (n_genes, d))
    pert_index: dict[str, int] = {}
    if config.no_context:
        if not train_perts:
            raise UsageError("no_context mode needs the training perturbation list")
        pert_index = {p: i for i, p in enumerate(sorted(train_perts))}
        values["pert.table"] = w(d, (len(pert_index), d))
    return ModelParams(
        config=config,
        n_nodes=n_nodes,
        n_genes=n_genes,
        d_embed=d_embed,
        seed=seed,
        values=values,
        pert_index=pert_index,
    )


# --- selection ---------------------------------------------------------------


@dataclass
class SubgraphSelection:
    """Normalized scores, Gumbel-perturbed scores, and the hard node choice."""

    alpha: np.ndarray          # (n,) softmax-normalized relevance
    alpha_tilde: np.ndarray    # (n,) Gumbel-softmax weights
    selected: np.ndarray       # sorted node indices
    gumbel_seed: int | None    # None means eval mode (zero noise)
    forced: int | None = None

    def mask(self) -> np.ndarray:
        m = np.zeros(self.alpha.shape[0])
        m[self.selected] = 1.0
        return m


def _select_indices(
    alpha_tilde: np.ndarray,
    threshold: float,
    forced: int | None,
    mode: str,
    top_m: int,
) -> np.ndarray:
    if mode == "threshold":
        chosen = set(np.flatnonzero(alpha_tilde > threshold).tolist())
    elif mode == "top_m":
        order = np.lexsort((np.arange(alpha_tilde.size), -alpha_tilde))
        chosen = set(order[:top_m].tolist())
    else:
        raise UsageError(f"unknown selection mode {mode!r}")
    if forced is not None:
        chosen.add(int(forced))
    return np.array(sorted(chosen), dtype=np.int64)


def gumbel_select(
    alpha: np.ndarray,
    tau: float,
    threshold: float,
    seed: int | None = None,
    forced: int | None = None,
    mode: str = "threshold",
    top_m: int = 10,
) -> SubgraphSelection:
    """Sample a sparse node set from normalized scores.

    `seed=None` is eval mode: the Gumbel noise is identically zero and the
    outcome is deterministic. alpha is floored at 1e-12 before the log.
    """
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if tau <= 0:
        raise UsageError("tau must be positive")
    if not (0.0 < threshold < 1.0):
        raise UsageError("threshold must lie in (0, 1)")
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-6:
        raise UsageError("alpha must be a probability vector")
    noise = np.zeros_like(alpha) if seed is None else np.random.default_rng(seed).gumbel(size=alpha.size)
    logits = (np.log(np.maximum(alpha, ALPHA_FLOOR)) + noise) / tau
    z = logits - logits.max()
    e = np.exp(z)
    alpha_tilde = e / e.sum()
    selected = _select_indices(alpha_tilde, threshold, forced, mode, top_m)
    return SubgraphSelection(
        alpha=alpha,
        alpha_tilde=alpha_tilde,
        selected=selected,
        gumbel_seed=seed,
        forced=forced,
    )


def aggregation_matrix(graph: KnowledgeGraph, weighted: bool = False) -> np.ndarray:
    """Dense neighbor-mean operator with self-loops, so isolated nodes are defined.

    Unweighted rows average uniformly over N(v) plus v itself; weighted rows
    normalize by edge confidence with the self-loop carrying weight 1.
    """
    n = graph.n_nodes
    a = np.zeros((n, n))
    for v in range(n):
        nbrs = graph.neighbors(v)
        if weighted:
            ws = graph.neighbor_weights(v)
            total = ws.sum() + 1.0
            a[v, v] = 1.0 / total
            a[v, nbrs] = ws / total
        else:
            k = len(nbrs) + 1
            a[v, v] = 1.0 / k
            a[v, nbrs] = 1.0 / k
    return a


# --- tape builders -----------------------------------------------------------


def register_params(tape: Tape, params: ModelParams) -> dict[str, int]:
    return {name: tape.param(arr, name) for name, arr in params.values.items()}


def build_gnn(tape: Tape, pids: dict[str, int], params: ModelParams, agg_id: int) -> int:
    """L rounds of (aggregate, transform); layer 0's input is the embedding table."""
    h = pids["gnn.table"]
    for layer in range(params.config.n_layers):
        h = tape.apply("matmul", tape.apply("matmul", agg_id, h), pids[f"gnn.w{layer}"])
    return h


def build_semantic_projection(tape: Tape, pids: dict[str, int], s_p: np.ndarray) -> int:
    s = np.asarray(s_p, dtype=np.float64).reshape(1, -1)
    return tape.apply("matmul", tape.constant(s), pids["sem.proj"])


def build_scores(tape: Tape, pids: dict[str, int], h_id: int, s_tilde_id: int, n_nodes: int) -> int:
    """Per-node relevance a_v = v' relu(W [h_v || s~_p]) as a (1, n) row."""
    tile = tape.apply("matmul", tape.constant(np.ones((n_nodes, 1))), s_tilde_id)
    joint = tape.apply("concat-cols", h_id, tile)
    hidden = tape.apply("relu", tape.apply("matmul", joint, pids["score.w"]))
    scores = tape.apply("matmul", hidden, pids["score.v"])
    return tape.apply("transpose", scores)


def build_alpha(tape: Tape, scores_row_id: int) -> int:
    return tape.apply("row-softmax", scores_row_id)


def build_alpha_tilde(tape: Tape, scores_row_id: int, noise: np.ndarray, tau: float) -> int:
    # softmax((log alpha + g)/tau) == softmax((a + g)/tau): the log-sum-exp
    # shift is constant across nodes and cancels in the softmax
    shifted = tape.apply("add", scores_row_id, tape.constant(noise.reshape(1, -1)))
    return tape.apply("row-softmax", tape.apply("scale", shifted, c=1.0 / tau))


def build_context(
    tape: Tape,
    pids: dict[str, int],
    h_id: int,
    alpha_tilde_id: int,
    selection: SubgraphSelection,
) -> int:
    """Straight-through sum of the selected node embeddings, projected to the latent width.

    The coefficient row evaluates to the hard mask (its constant part is
    mask - alpha_tilde at the captured base point), so the forward value is the
    plain sum over selected nodes while the backward pass routes gradients
    through the soft weights.
    """
    offset = selection.mask() - selection.alpha_tilde
    coeff = tape.apply("add", tape.constant(offset.reshape(1, -1)), alpha_tilde_id)
    z_pre = tape.apply("matmul", coeff, h_id)
    return tape.apply("matmul", z_pre, pids["ctx.proj"])


def build_encoder(tape: Tape, pids: dict[str, int], x_id: int) -> int:
    h = tape.apply("relu", tape.apply("add", tape.apply("matmul", x_id, pids["enc.w1"]), pids["enc.b1"]))
    return tape.apply("add", tape.apply("matmul", h, pids["enc.w2"]), pids["enc.b2"])


def build_decoder(tape: Tape, pids: dict[str, int], z_c_id: int, z_p_id: int) -> int:
    fused = tape.apply("concat-cols", z_c_id, z_p_id)
    h = tape.apply("relu", tape.apply("add", tape.apply("matmul", fused, pids["dec.w1"]), pids["dec.b1"]))
    return tape.apply("add", tape.apply("matmul", h, pids["dec.w2"]), pids["dec.b2"])


def build_no_context_embedding(tape: Tape, pids: dict[str, int], params: ModelParams, pert: str) -> int:
    """Learned per-perturbation row; unseen perturbations fall back to the row mean."""
    n_rows = params.values["pert.table"].shape[0]
    if pert in params.pert_index:
        row = np.zeros((1, n_rows))
        row[0, params.pert_index[pert]] = 1.0
    else:
        row = np.full((1, n_rows), 1.0 / n_rows)
    return tape.apply("matmul", tape.constant(row), pids["pert.table"])


@dataclass
class ForwardBuild:
    """Node ids of interest on a shared tape, plus the realized selection."""

    x_hat: int
    z_context: int | None
    selection: SubgraphSelection | None


def build_forward(
    tape: Tape,
    pids: dict[str, int],
    params: ModelParams,
    xbar_c: np.ndarray,
    pert: str,
    graph: KnowledgeGraph | None,
    embeddings: SemanticEmbeddings | None,
    mode: str = "eval",
    gumbel_seed: int | None = None,
    frozen_selection: SubgraphSelection | None = None,
    h_id: int | None = None,
    agg_id: int | None = None,
) -> ForwardBuild:
    """Compose the full forward pass for one perturbation on `tape`.

    `mode="train"` draws Gumbel noise from `gumbel_seed`; eval mode uses zero
    noise. Passing `frozen_selection` reuses a previously captured selection
    (noise, hard mask, and straight-through base), which keeps the surrogate
    fixed across gradient-check probes.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"unknown mode {mode!r}")
    x_id = tape.constant(np.asarray(xbar_c, dtype=np.float64).reshape(1, -1))
    if tape.value(x_id).shape[1] != params.n_genes:
        raise ShapeError("control profile width does not match the model")
    z_c = build_encoder(tape, pids, x_id)

    if params.config.no_context:
        # the learned row stands in for the graph context everywhere downstream
        z_p = build_no_context_embedding(tape, pids, params, pert)
        x_hat = build_decoder(tape, pids, z_c, z_p)
        return ForwardBuild(x_hat=x_hat, z_context=z_p, selection=None)

    if graph is None or embeddings is None:
        raise UsageError("graph and embeddings are required unless no_context is set")
    cfg = params.config
    if agg_id is None:
        agg_id = tape.constant(aggregation_matrix(graph, cfg.weighted_aggregation))
    if h_id is None:
        h_id = build_gnn(tape, pids, params, agg_id)
    s_tilde = build_semantic_projection(tape, pids, embeddings.vector(pert))
    scores = build_scores(tape, pids, h_id, s_tilde, params.n_nodes)
    alpha_id = build_alpha(tape, scores)

    forced = graph.vocab.index(pert)
    if frozen_selection is not None:
        selection = frozen_selection
        noise_seed = selection.gumbel_seed
    else:
        noise_seed = gumbel_seed if mode == "train" else None
    noise = (
        np.zeros(params.n_nodes)
        if noise_seed is None
        else np.random.default_rng(noise_seed).gumbel(size=params.n_nodes)
    )
    at_id = build_alpha_tilde(tape, scores, noise, cfg.tau)
    if not np.all(np.isfinite(tape.value(at_id))):
        raise NumericalError("non-finite node selection scores (model diverged)")
    if frozen_selection is None:
        selection = SubgraphSelection(
            alpha=tape.value(alpha_id).reshape(-1).copy(),
            alpha_tilde=tape.value(at_id).reshape(-1).copy(),
            selected=_select_indices(
                tape.value(at_id).reshape(-1),
                cfg.resolve_threshold(params.n_nodes),
                forced,
                cfg.selection_mode,
                cfg.select_top_m,
            ),
            gumbel_seed=noise_seed,
            forced=forced,
        )
    z_ctx = build_context(tape, pids, h_id, at_id, selection)
    x_hat = build_decoder(tape, pids, z_c, z_ctx)
    return ForwardBuild(x_hat=x_hat, z_context=z_ctx, selection=selection)


# --- value-level wrappers ------------------------------------------------------


@dataclass
class ForwardResult:
    x_hat: np.ndarray
    z_context: np.ndarray | None
    selection: SubgraphSelection | None


def forward(
    xbar_c: np.ndarray,
    pert: str,
    graph: KnowledgeGraph | None,
    embeddings: SemanticEmbeddings | None,
    params: ModelParams,
    mode: str = "eval",
    gumbel_seed: int | None = None,
    frozen_selection: SubgraphSelection | None = None,
) -> ForwardResult:
    tape = Tape()
    pids = register_params(tape, params)
    built = build_forward(
        tape, pids, params, xbar_c, pert, graph, embeddings,
        mode=mode, gumbel_seed=gumbel_seed, frozen_selection=frozen_selection,
    )
    return ForwardResult(
        x_hat=tape.value(built.x_hat).reshape(-1).copy(),
        z_context=None if built.z_context is None else tape.value(built.z_context).reshape(-1).copy(),
        selection=built.selection,
    )


def gnn_embed(graph: KnowledgeGraph, params: ModelParams) -> np.ndarray:
    """Structural node embeddings (n_nodes x d_struct)."""
    if params.values["gnn.table"].shape[0] != graph.n_nodes:
        raise ShapeError("embedding table does not match the graph size")
    tape = Tape()
    pids = register_params(tape, params)
    agg = tape.constant(aggregation_matrix(graph, params.config.weighted_aggregation))
    return tape.value(build_gnn(tape, pids, params, agg)).copy()


def project_semantic(s_p: np.ndarray, params: ModelParams) -> np.ndarray:
    s = np.asarray(s_p, dtype=np.float64).reshape(-1)
    if s.size != params.d_embed:
        raise ShapeError(f"semantic vector has dim {s.size}, expected {params.d_embed}")
    tape = Tape()
    pids = register_params(tape, params)
    return tape.value(build_semantic_projection(tape, pids, s)).reshape(-1).copy()


def score_nodes(h: np.ndarray, s_tilde: np.ndarray, params: ModelParams) -> np.ndarray:
    """Softmax-normalized relevance over nodes for a projected semantic vector."""
    tape = Tape()
    pids = register_params(tape, params)
    h_id = tape.constant(h)
    st_id = tape.constant(np.asarray(s_tilde, dtype=np.float64).reshape(1, -1))
    scores = build_scores(tape, pids, h_id, st_id, h.shape[0])
    return tape.value(build_alpha(tape, scores)).reshape(-1).copy()


def context_aggregate(h: np.ndarray, selection: SubgraphSelection, params: ModelParams) -> np.ndarray:
    """Sum of the selected rows of h, projected to the latent width."""
    if selection.selected.size == 0:
        raise UsageError("selection is empty")
    tape = Tape()
    pids = register_params(tape, params)
    h_id = tape.constant(h)
    at_id = tape.constant(selection.alpha_tilde.reshape(1, -1))
    return tape.value(build_context(tape, pids, h_id, at_id, selection)).reshape(-1).copy()


def encode_control(xbar_c: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.asarray(xbar_c, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params.n_genes:
        raise ShapeError(f"profile has {x.shape[1]} genes, expected {params.n_genes}")
    tape = Tape()
    pids = register_params(tape, params)
    return tape.value(build_encoder(tape, pids, tape.constant(x))).reshape(-1).copy()


def decode(z_c: np.ndarray, z_p: np.ndarray, params: ModelParams) -> np.ndarray:
    d = params.config.d_latent
    zc = np.asarray(z_c, dtype=np.float64).reshape(1, -1)
    zp = np.asarray(z_p, dtype=np.float64).reshape(1, -1)
    if zc.shape[1] != d or zp.shape[1] != d:
        raise ShapeError(f"latent inputs must both have dim {d}")
    tape = Tape()
    pids = register_params(tape, params)
    return tape.value(build_decoder(tape, pids, tape.constant(zc), tape.constant(zp))).reshape(-1).copy()


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(params: ModelParams, json_path, bin_path) -> None:
    """JSON manifest (shapes, hyperparameters, seed) + little-endian f64 blob in manifest order."""
    manifest = {
        "format": "pertgraph-checkpoint-v1",
        "seed": params.seed,
        "n_nodes": params.n_nodes,
        "n_genes": params.n_genes,
        "d_embed": params.d_embed,
        "config": asdict(params.config),
        "pert_index": params.pert_index,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.values.items()],
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(bin_path, "wb") as fh:
        for v in params.values.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(json_path, bin_path) -> ModelParams:
    with open(json_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "pertgraph-checkpoint-v1":
        raise UsageError("not a model checkpoint manifest")
    config = ModelConfig(**manifest["config"])
    blob = open(bin_path, "rb").read()
    values: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
        offset += count * 8
    if offset != len(blob):
        raise UsageError("checkpoint blob size does not match the manifest")
    return ModelParams(
        config=config,
        n_nodes=manifest["n_nodes"],
        n_genes=manifest["n_genes"],
        d_embed=manifest["d_embed"],
        seed=manifest["seed"],
        values=values,
        pert_index=dict(manifest.get("pert_index") or {}),
    )
