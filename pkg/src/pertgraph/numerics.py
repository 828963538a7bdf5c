"""Dense float64 linear algebra on a small reverse-mode autodiff tape.

Values are 2-D numpy arrays (vectors are 1xN or Nx1). The tape is rebuilt
per training step (define-by-run); backward accumulates gradients in
reverse topological order, so two backward passes over the same tape are
bit-identical. Everything is float64: the finite-difference verification
tolerances leave no headroom for float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError, UsageError

NORM_EPS = 1e-12  # vectors at or below this norm normalize to zero


def as_matrix(x) -> np.ndarray:
    """Coerce scalars / 1-D / 2-D input to a 2-D float64 array (1-D becomes a row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got {a.ndim}")
    return a


def _require_vector(a: np.ndarray, op: str) -> None:
    if a.shape[0] != 1 and a.shape[1] != 1:
        raise ShapeError(f"{op} expects a vector, got shape {a.shape}")


def huber_value(r: np.ndarray, delta: float) -> np.ndarray:
    """Elementwise robust penalty: quadratic r^2/2 inside |r| <= delta, linear outside."""
    r = np.asarray(r, dtype=np.float64)
    absr = np.abs(r)
    return np.where(absr <= delta, 0.5 * r * r, delta * (absr - 0.5 * delta))


def huber_grad(r: np.ndarray, delta: float) -> np.ndarray:
    """Exact piecewise derivative: r inside, delta*sign(r) outside (they agree at the kink)."""
    r = np.asarray(r, dtype=np.float64)
    return np.where(np.abs(r) <= delta, r, delta * np.sign(r))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --- op registry -----------------------------------------------------------
# forward(values, attrs) -> (result, aux); backward(g, values, result, aux, attrs)
# -> list of gradients aligned with the parents.


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, None


def _bw_matmul(g, vals, out, aux, attrs):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _fw_add(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b, None


def _fw_scale(vals, attrs):
    return vals[0] * attrs["c"], None


def _fw_concat_cols(vals, attrs):
    a, b = vals
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat-cols: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def _bw_concat_cols(g, vals, out, aux, attrs):
    split = aux
    return [g[:, :split].copy(), g[:, split:].copy()]


def _fw_row_softmax(vals, attrs):
    s = _softmax_rows(vals[0])
    return s, None


def _bw_row_softmax(g, vals, out, aux, attrs):
    s = out
    inner = (g * s).sum(axis=1, keepdims=True)
    return [s * (g - inner)]


def _fw_mean_all(vals, attrs):
    return np.array([[vals[0].mean()]]), None


def _bw_mean_all(g, vals, out, aux, attrs):
    a = vals[0]
    return [np.full_like(a, g[0, 0] / a.size)]


def _fw_sum_rows(vals, attrs):
    return vals[0].sum(axis=0, keepdims=True), None


def _bw_sum_rows(g, vals, out, aux, attrs):
    return [np.broadcast_to(g, vals[0].shape).copy()]


def _fw_l2norm(vals, attrs):
    a = vals[0]
    _require_vector(a, "l2-normalize-vector")
    n = float(np.sqrt((a * a).sum()))
    if n <= NORM_EPS:
        return np.zeros_like(a), 0.0
    return a / n, n


def _bw_l2norm(g, vals, out, aux, attrs):
    n = aux
    if n == 0.0:
        return [np.zeros_like(vals[0])]
    y = out
    return [(g - y * (y * g).sum()) / n]


def _fw_huber(vals, attrs):
    return huber_value(vals[0], attrs["delta"]), None


def _bw_huber(g, vals, out, aux, attrs):
    return [g * huber_grad(vals[0], attrs["delta"])]


def _fw_cosine_distance(vals, attrs):
    a, b = vals
    _require_vector(a, "cosine-distance")
    if a.shape != b.shape:
        raise ShapeError(f"cosine-distance: {a.shape} vs {b.shape}")
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na <= NORM_EPS or nb <= NORM_EPS:
        return np.zeros((1, 1)), None
    ah, bh = a / na, b / nb
    d = ah - bh
    return np.array([[(d * d).sum()]]), (na, nb, ah, bh)


def _bw_cosine_distance(g, vals, out, aux, attrs):
    a, b = vals
    if aux is None:
        return [np.zeros_like(a), np.zeros_like(b)]
    na, nb, ah, bh = aux
    gs = g[0, 0]
    cos = (ah * bh).sum()
    # d/da of 2 - 2*cos through the normalization of a (and symmetrically for b)
    da = gs * (-2.0 / na) * (bh - ah * cos)
    db = gs * (-2.0 / nb) * (ah - bh * cos)
    return [da, db]


def _fw_mse(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    d = a - b
    return np.array([[(d * d).mean()]]), d


def _bw_mse(g, vals, out, aux, attrs):
    d = aux
    scale = 2.0 * g[0, 0] / d.size
    return [scale * d, -scale * d]


def _fw_relu(vals, attrs):
    return np.maximum(vals[0], 0.0), None


def _bw_relu(g, vals, out, aux, attrs):
    return [g * (vals[0] > 0.0)]


def _fw_sigmoid(vals, attrs):
    return 1.0 / (1.0 + np.exp(-vals[0])), None


def _bw_sigmoid(g, vals, out, aux, attrs):
    s = out
    return [g * s * (1.0 - s)]


def _fw_square(vals, attrs):
    return vals[0] * vals[0], None


def _bw_square(g, vals, out, aux, attrs):
    return [2.0 * g * vals[0]]


def _fw_transpose(vals, attrs):
    return vals[0].T.copy(), None


def _bw_transpose(g, vals, out, aux, attrs):
    return [g.T.copy()]


_OPS: dict[str, tuple[int, Callable, Callable]] = {
    "matmul": (2, _fw_matmul, _bw_matmul),
    "add": (2, _fw_add, lambda g, *a: [g.copy(), g.copy()]),
    "scale": (1, _fw_scale, lambda g, v, o, x, attrs: [g * attrs["c"]]),
    "concat-cols": (2, _fw_concat_cols, _bw_concat_cols),
    "relu": (1, _fw_relu, _bw_relu),
    "sigmoid": (1, _fw_sigmoid, _bw_sigmoid),
    "row-softmax": (1, _fw_row_softmax, _bw_row_softmax),
    "mean-all": (1, _fw_mean_all, _bw_mean_all),
    "sum-rows": (1, _fw_sum_rows, _bw_sum_rows),
    "l2-normalize-vector": (1, _fw_l2norm, _bw_l2norm),
    "elementwise-square": (1, _fw_square, _bw_square),
    "huber": (1, _fw_huber, _bw_huber),
    "cosine-distance": (2, _fw_cosine_distance, _bw_cosine_distance),
    "mse": (2, _fw_mse, _bw_mse),
    "transpose": (1, _fw_transpose, _bw_transpose),
}

OP_KINDS = tuple(sorted(_OPS))


@dataclass
class TapeNode:
    kind: str                 # "leaf" for constants/parameters
    parents: tuple[int, ...]
    value: np.ndarray
    grad: np.ndarray
    attrs: dict = field(default_factory=dict)
    aux: object = None


class Tape:
    """Append-only computation record; parents always precede children."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.param_ids: list[int] = []

    def _push(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        v = as_matrix(value)
        if not np.all(np.isfinite(v)):
            raise UsageError("non-finite constant on tape")
        return self._push(TapeNode("leaf", (), v, np.zeros_like(v)))

    def param(self, value, name: str | None = None) -> int:
        """Leaf whose gradient is reported by backward()."""
        nid = self.constant(value)
        if name is not None:
            self.nodes[nid].attrs["name"] = name
        self.param_ids.append(nid)
        return nid

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def apply(self, kind: str, *parents: int, **attrs) -> int:
        if kind not in _OPS:
            raise UsageError(f"unknown op kind {kind!r}")
        arity, fw, _ = _OPS[kind]
        if len(parents) != arity:
            raise UsageError(f"{kind} takes {arity} inputs, got {len(parents)}")
        vals = [self.nodes[p].value for p in parents]
        out, aux = fw(vals, attrs)
        node = TapeNode(kind, tuple(parents), out, np.zeros_like(out), attrs, aux)
        return self._push(node)

    def _reachable(self, root: int) -> list[int]:
        seen = {root}
        stack = [root]
        while stack:
            nid = stack.pop()
            for p in self.nodes[nid].parents:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return sorted(seen, reverse=True)

    def backward(self, loss_id: int) -> dict[int, np.ndarray]:
        """Reverse accumulation from a scalar loss node.

        Returns gradients keyed by parameter node id; parameters not
        reachable from the loss keep their zero gradient.
        """
        loss = self.nodes[loss_id]
        if loss.value.shape != (1, 1):
            raise UsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad[...] = 0.0
        loss.grad[...] = 1.0
        for nid in self._reachable(loss_id):
            node = self.nodes[nid]
            if node.kind == "leaf":
                continue
            _, _, bw = _OPS[node.kind]
            vals = [self.nodes[p].value for p in node.parents]
            pgrads = bw(node.grad, vals, node.value, node.aux, node.attrs)
            for pid, pg in zip(node.parents, pgrads):
                self.nodes[pid].grad += pg
        return {pid: self.nodes[pid].grad.copy() for pid in self.param_ids}

    def grads_by_name(self) -> dict[str, np.ndarray]:
        out = {}
        for pid in self.param_ids:
            name = self.nodes[pid].attrs.get("name")
            if name is not None:
                out[name] = self.nodes[pid].grad.copy()
        return out


# --- gradient verification --------------------------------------------------


def grad_check(fn, params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn(params) -> (scalar value, {name: grad array})` must be deterministic;
    it is re-evaluated with each scalar entry of `params` nudged by +/- eps.
    Relative error is |analytic - fd| / max(1, |analytic|).
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    v0, grads = fn(params)
    v1, _ = fn(params)
    if v0 != v1:
        raise UsageError("function is not deterministic; gradient check invalid")
    if grads is None:
        raise UsageError("fn must return analytic gradients")
    worst = 0.0
    for name, arr in params.items():
        g = np.asarray(grads[name], dtype=np.float64).ravel()
        flat = arr.ravel()  # view: in-place nudges propagate to fn
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = fn(params)
            flat[i] = orig - eps
            fm, _ = fn(params)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            rel = abs(g[i] - fd) / max(1.0, abs(g[i]))
            worst = max(worst, rel)
    return worst


# --- optimizers --------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * p
        p -= lr * g
