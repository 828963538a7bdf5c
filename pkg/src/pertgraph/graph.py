"""Weighted gene-gene interaction graph: ingestion, top-k confidence
filtering, topology statistics, and hop-distance coverage of DEG sets.

Graphs are undirected, stored in compressed sparse form (per-node sorted
neighbor lists), carry no self-loops, and are immutable once built.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError, UsageError


class GeneVocab:
    """Ordered gene names with the inverse name -> index map."""

    def __init__(self, names: Sequence[str]):
        names = list(names)
        if len(set(names)) != len(names):
            raise DataError("gene names must be unique")
        self.names: list[str] = names
        self._index = {n: i for i, n in enumerate(names)}

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UsageError(f"gene {name!r} not in vocabulary") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, GeneVocab) and self.names == other.names


@dataclass(frozen=True)
class KnowledgeGraph:
    """Undirected weighted graph over a gene vocabulary, CSR layout."""

    vocab: GeneVocab
    indptr: np.ndarray   # int64, len(vocab) + 1
    indices: np.ndarray  # int64, neighbor ids sorted per node
    weights: np.ndarray  # float64, confidence >= 0, aligned with indices

    @classmethod
    def from_edges(cls, vocab: GeneVocab, edges: Iterable[tuple[int, int, float]]) -> "KnowledgeGraph":
        """Build from (u, v, weight) index triples; duplicates keep the max weight."""
        n = len(vocab)
        canon: dict[tuple[int, int], float] = {}
        for u, v, w in edges:
            if u == v:
                raise UsageError("self-loops are not stored")
            if w < 0:
                raise DataError(f"negative edge weight {w}")
            key = (u, v) if u < v else (v, u)
            prev = canon.get(key)
            canon[key] = w if prev is None else max(prev, w)
        adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        for (u, v), w in canon.items():
            adj[u].append((v, w))
            adj[v].append((u, w))
        indptr = np.zeros(n + 1, dtype=np.int64)
        idx_parts = []
        w_parts = []
        for u in range(n):
            adj[u].sort()
            indptr[u + 1] = indptr[u] + len(adj[u])
            idx_parts.extend(p[0] for p in adj[u])
            w_parts.extend(p[1] for p in adj[u])
        return cls(
            vocab=vocab,
            indptr=indptr,
            indices=np.asarray(idx_parts, dtype=np.int64),
            weights=np.asarray(w_parts, dtype=np.float64),
        )

    @property
    def n_nodes(self) -> int:
        return len(self.vocab)

    @property
    def n_edges(self) -> int:
        return self.indices.size // 2

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def neighbor_weights(self, u: int) -> np.ndarray:
        return self.weights[self.indptr[u] : self.indptr[u + 1]]

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def edge_set(self) -> set[tuple[int, int]]:
        out = set()
        for u in range(self.n_nodes):
            for v in self.neighbors(u):
                if u < v:
                    out.add((u, int(v)))
        return out

    def edge_weight_map(self) -> dict[tuple[int, int], float]:
        out = {}
        for u in range(self.n_nodes):
            nbrs = self.neighbors(u)
            ws = self.neighbor_weights(u)
            for v, w in zip(nbrs, ws):
                if u < v:
                    out[(u, int(v))] = float(w)
        return out


def load_edge_list(path, vocab: GeneVocab) -> tuple[KnowledgeGraph, int]:
    """Read a tab-separated `geneA geneB weight` file restricted to the vocabulary.

    Lines starting with `#` and blank lines are ignored. Edges touching a gene
    outside the vocabulary, and self-loop lines, are dropped but counted; the
    count is returned next to the graph. Duplicate edges keep the maximum weight.
    """
    edges: list[tuple[int, int, float]] = []
    dropped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
            a, b, wtxt = parts
            try:
                w = float(wtxt)
            except ValueError:
                raise ParseError(f"bad weight {wtxt!r}", lineno) from None
            if w < 0:
                raise DataError(f"line {lineno}: negative weight {w}")
            if a not in vocab or b not in vocab or a == b:
                dropped += 1
                continue
            edges.append((vocab.index(a), vocab.index(b), w))
    return KnowledgeGraph.from_edges(vocab, edges), dropped


def save_edge_list(graph: KnowledgeGraph, path) -> None:
    """Write one undirected edge per line (u < v order), tab-separated."""
    names = graph.vocab.names
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# geneA\tgeneB\tweight\n")
        for (u, v), w in sorted(graph.edge_weight_map().items()):
            fh.write(f"{names[u]}\t{names[v]}\t{w!r}\n")


def nominations(graph: KnowledgeGraph, k: int) -> list[set[int]]:
    """Per node, the <= k neighbors with the highest confidence (ties: lower index)."""
    out = []
    for u in range(graph.n_nodes):
        nbrs = graph.neighbors(u)
        ws = graph.neighbor_weights(u)
        order = sorted(range(len(nbrs)), key=lambda i: (-ws[i], nbrs[i]))
        out.append({int(nbrs[i]) for i in order[:k]})
    return out


def topk_filter(graph: KnowledgeGraph, k: int, mode: str = "union") -> KnowledgeGraph:
    """Keep an edge iff an endpoint nominates it among its top-k weights.

    `union` keeps the edge when either endpoint nominates it; `mutual`
    requires both. The result stays symmetric and is a subgraph of the input.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    if mode not in ("union", "mutual"):
        raise UsageError(f"unknown topk mode {mode!r}")
    nominated = nominations(graph, k)
    kept = []
    for (u, v), w in graph.edge_weight_map().items():
        hit_u = v in nominated[u]
        hit_v = u in nominated[v]
        keep = (hit_u or hit_v) if mode == "union" else (hit_u and hit_v)
        if keep:
            kept.append((u, v, w))
    return KnowledgeGraph.from_edges(graph.vocab, kept)


@dataclass(frozen=True)
class GraphStats:
    n_nodes: int
    n_edges: int
    mean_degree: float
    median_degree: float


def degree_stats(graph: KnowledgeGraph) -> GraphStats:
    """Undirected degree convention; median uses the lower middle element."""
    n = graph.n_nodes
    degs = np.diff(graph.indptr)
    if n == 0:
        return GraphStats(0, 0, 0.0, 0.0)
    mean = float(degs.sum()) / n
    median = float(np.sort(degs)[(n - 1) // 2])
    return GraphStats(n, graph.n_edges, mean, median)


def hop_distances(graph: KnowledgeGraph, source: str) -> np.ndarray:
    """Breadth-first hop counts from `source`; unreachable nodes get inf."""
    s = graph.vocab.index(source)
    dist = np.full(graph.n_nodes, np.inf)
    dist[s] = 0.0
    queue = deque([s])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            if not np.isfinite(dist[v]):
                dist[v] = dist[u] + 1.0
                queue.append(int(v))
    return dist


def deg_coverage(
    graph: KnowledgeGraph,
    pert_gene: str,
    deg_set: Iterable[str],
    max_hops: int,
) -> list[float]:
    """Fraction of the DEG set within h hops of the perturbed gene, h = 1..max_hops."""
    genes = list(deg_set)
    if not genes:
        raise UsageError("deg_set must be nonempty")
    if max_hops < 1:
        raise UsageError("max_hops must be >= 1")
    dist = hop_distances(graph, pert_gene)
    dvals = np.array([dist[graph.vocab.index(g)] for g in genes])
    return [float(np.mean(dvals <= h)) for h in range(1, max_hops + 1)]
