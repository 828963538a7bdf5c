"""Expression data model: control/perturbation sample blocks, pseudobulk
profiles, per-gene Welch testing, DEG tables, effect-size strata,
perturbation-level splits, semantic embeddings, and a synthetic generator
with planted sparse effects.

Expression values are log1p-normalized (nonnegative) throughout; the model
and all metrics operate on pseudobulk mean profiles.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from .errors import DataError, ParseError, UsageError
from .graph import GeneVocab, KnowledgeGraph

CONTROL_LABEL = "control"


class PerturbationDataset:
    """Control samples plus per-perturbation sample blocks over one gene vocabulary.

    All perturbation reads go through `block()` so tests can instrument
    which conditions a computation touched.
    """

    def __init__(self, vocab: GeneVocab, control: np.ndarray, perturbations: dict[str, np.ndarray]):
        control = np.asarray(control, dtype=np.float64)
        n = len(vocab)
        if control.ndim != 2 or control.shape[1] != n:
            raise DataError(f"control block must be samples x {n}")
        if control.shape[0] < 2:
            raise DataError("need at least 2 control samples")
        self._check_values(control, CONTROL_LABEL)
        blocks = {}
        for name, block in perturbations.items():
            block = np.asarray(block, dtype=np.float64)
            if block.ndim != 2 or block.shape[1] != n:
                raise DataError(f"perturbation {name!r} block must be samples x {n}")
            if block.shape[0] < 2:
                raise DataError(f"perturbation {name!r} needs at least 2 samples")
            self._check_values(block, name)
            blocks[name] = block
        self.vocab = vocab
        self.control = control
        self.perturbations = blocks

    @staticmethod
    def _check_values(block: np.ndarray, label: str) -> None:
        if not np.all(np.isfinite(block)):
            raise DataError(f"non-finite expression value in {label!r}")
        if np.any(block < 0):
            raise DataError(f"negative expression value in {label!r} (expected log1p counts)")

    @property
    def n_genes(self) -> int:
        return len(self.vocab)

    def pert_names(self) -> list[str]:
        return sorted(self.perturbations)

    def block(self, name: str) -> np.ndarray:
        try:
            return self.perturbations[name]
        except KeyError:
            raise UsageError(f"unknown perturbation {name!r}") from None


def load_expression(path) -> PerturbationDataset:
    """Read `sample_id,perturbation,<genes...>` CSV; rows labeled `control` form the control block."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if len(header) < 3 or header[0] != "sample_id" or header[1] != "perturbation":
            raise ParseError("header must start with sample_id,perturbation,<genes>", 1)
        genes = header[2:]
        if len(set(genes)) != len(genes):
            raise ParseError("duplicate gene column in header", 1)
        rows_by_label: dict[str, list[list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            label = row[1]
            try:
                values = [float(x) for x in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            rows_by_label.setdefault(label, []).append(values)
    if CONTROL_LABEL not in rows_by_label:
        raise DataError("no control rows in expression file")
    control = np.array(rows_by_label.pop(CONTROL_LABEL), dtype=np.float64)
    blocks = {k: np.array(v, dtype=np.float64) for k, v in rows_by_label.items()}
    return PerturbationDataset(GeneVocab(genes), control, blocks)


def save_expression(dataset: PerturbationDataset, path) -> None:
    """Write the dataset back out; floats use repr so a reload is bit-exact."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "perturbation"] + dataset.vocab.names)
        for i, row in enumerate(dataset.control):
            writer.writerow([f"{CONTROL_LABEL}_{i:04d}", CONTROL_LABEL] + [repr(float(x)) for x in row])
        for name in dataset.pert_names():
            for i, row in enumerate(dataset.block(name)):
                writer.writerow([f"{name}_{i:04d}", name] + [repr(float(x)) for x in row])


def pseudobulk(dataset: PerturbationDataset) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Columnwise mean profiles: (control mean, {perturbation: mean})."""
    xbar_c = dataset.control.mean(axis=0)
    return xbar_c, {name: dataset.block(name).mean(axis=0) for name in dataset.pert_names()}


# --- differential expression ---------------------------------------------------


def welch_pvalues(control_block: np.ndarray, pert_block: np.ndarray) -> np.ndarray:
    """Two-sided Welch t-test per gene column (unequal variances).

    Degenerate columns where both groups have zero variance give p = 1 when
    the means agree and p = 0 when they differ.
    """
    a = np.asarray(control_block, dtype=np.float64)
    b = np.asarray(pert_block, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise UsageError("need at least 2 samples per group")
    na, nb = a.shape[0], b.shape[0]
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    # a column constant in both groups has zero pooled variance; detect it from
    # the data, not from the float variance (the mean of n identical values rounds)
    degenerate = (a.max(axis=0) == a.min(axis=0)) & (b.max(axis=0) == b.min(axis=0))
    ta, tb = va / na, vb / nb
    se2 = np.where(degenerate, 1.0, ta + tb)
    t = (mb - ma) / np.sqrt(se2)
    with np.errstate(divide="ignore", invalid="ignore"):
        df = se2**2 / (ta**2 / (na - 1) + tb**2 / (nb - 1))
    p = 2.0 * stdtr(df, -np.abs(t))
    return np.where(degenerate, np.where(a.max(axis=0) == b.max(axis=0), 1.0, 0.0), p)


def welch_t_test(control_samples, perturbed_samples) -> float:
    """Scalar Welch p-value for one gene."""
    a = np.asarray(control_samples, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(perturbed_samples, dtype=np.float64).reshape(-1, 1)
    return float(welch_pvalues(a, b)[0])


def bh_adjust(pvalues: np.ndarray) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values (monotone step-up)."""
    p = np.asarray(pvalues, dtype=np.float64)
    n = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * n / np.arange(1, n + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(n)
    out[order] = np.minimum(adjusted, 1.0)
    return out


@dataclass
class DegTable:
    """Per-perturbation p-values, DEG masks, and signed pseudobulk deltas."""

    alpha: float
    correction: str            # "none" | "benjamini-hochberg"
    genes: list[str]
    pvalues: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)    # bool per gene
    deltas: dict[str, np.ndarray] = field(default_factory=dict)

    TEST_NAME = "welch"

    def pert_names(self) -> list[str]:
        return sorted(self.pvalues)

    def deg_mask(self, pert: str) -> np.ndarray:
        return self.masks[pert]

    def non_deg_mask(self, pert: str) -> np.ndarray:
        return ~self.masks[pert]

    def deg_indices(self, pert: str) -> np.ndarray:
        return np.flatnonzero(self.masks[pert])

    def deg_fraction(self, pert: str) -> float:
        return float(self.masks[pert].sum()) / len(self.genes)

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "correction": self.correction,
            "test": self.TEST_NAME,
            "genes": self.genes,
            "perturbations": {
                name: {
                    "pvalues": self.pvalues[name].tolist(),
                    "deg_mask": [int(x) for x in self.masks[name]],
                    "delta": self.deltas[name].tolist(),
                }
                for name in self.pert_names()
            },
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, d: dict) -> "DegTable":
        table = cls(alpha=float(d["alpha"]), correction=d.get("correction", "none"), genes=list(d["genes"]))
        for name, entry in d["perturbations"].items():
            table.pvalues[name] = np.asarray(entry["pvalues"], dtype=np.float64)
            table.masks[name] = np.asarray(entry["deg_mask"], dtype=bool)
            table.deltas[name] = np.asarray(entry["delta"], dtype=np.float64)
        return table

    @classmethod
    def load(cls, path) -> "DegTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def compute_degs(
    dataset: PerturbationDataset,
    alpha: float = 0.05,
    correction: str = "none",
    threads: int = 1,
    perturbations: list[str] | None = None,
) -> DegTable:
    """Welch-test every gene of every (requested) perturbation against control.

    Masks threshold the (optionally BH-adjusted) p-values strictly below alpha;
    deltas are pseudobulk differences against the control mean.
    """
    if correction not in ("none", "benjamini-hochberg"):
        raise UsageError(f"unknown correction {correction!r}")
    names = dataset.pert_names() if perturbations is None else sorted(perturbations)
    table = DegTable(alpha=alpha, correction=correction, genes=list(dataset.vocab.names))
    xbar_c = dataset.control.mean(axis=0)

    def one(name: str) -> tuple[str, np.ndarray, np.ndarray]:
        block = dataset.block(name)
        p = welch_pvalues(dataset.control, block)
        return name, p, block.mean(axis=0) - xbar_c

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(name) for name in names]
    for name, p, delta in results:
        effective = bh_adjust(p) if correction == "benjamini-hochberg" else p
        table.pvalues[name] = p
        table.masks[name] = effective < alpha
        table.deltas[name] = delta
    return table


STRATA = ("small", "medium", "large")


def effect_size_strata(table: DegTable) -> dict[str, str]:
    """Classify each perturbation by its DEG fraction: <5% small, 5-10% medium, >10% large."""
    out = {}
    for name in table.pert_names():
        frac = table.deg_fraction(name)
        if frac < 0.05:
            out[name] = "small"
        elif frac <= 0.10:
            out[name] = "medium"
        else:
            out[name] = "large"
    return out


# --- splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint perturbation-level train/val/test assignment."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def all_perturbations(self) -> set[str]:
        return set(self.train) | set(self.val) | set(self.test)


def split_by_perturbation(
    dataset: PerturbationDataset,
    fractions: tuple[float, float, float],
    seed: int,
) -> SplitSpec:
    """Seeded shuffle, then floor-sized splits with the remainder going to the
    largest fractional parts. Control cells are shared by every split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise UsageError("fractions must be three nonnegative values summing to 1")
    names = sorted(dataset.pert_names())
    n = len(names)
    nonzero = int((fr > 0).sum())
    if n < nonzero:
        raise UsageError(f"{n} perturbations cannot fill {nonzero} nonempty splits")
    rng = np.random.default_rng(seed)
    order = [names[i] for i in rng.permutation(n)]
    sizes = np.floor(fr * n).astype(int)
    remainder = n - sizes.sum()
    frac_part = fr * n - sizes
    for i in np.argsort(-frac_part, kind="stable")[:remainder]:
        sizes[i] += 1
    # a nonzero-fraction split must not come out empty when avoidable
    for i in range(3):
        if fr[i] > 0 and sizes[i] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    train = tuple(sorted(order[: sizes[0]]))
    val = tuple(sorted(order[sizes[0] : sizes[0] + sizes[1]]))
    test = tuple(sorted(order[sizes[0] + sizes[1] :]))
    return SplitSpec(train=train, val=val, test=test, seed=seed)


# --- semantic embeddings ----------------------------------------------------------


@dataclass
class SemanticEmbeddings:
    """Fixed-dimension vector per gene, complete over the vocabulary it was built for."""

    dim: int
    vectors: dict[str, np.ndarray]

    def vector(self, gene: str) -> np.ndarray:
        try:
            return self.vectors[gene]
        except KeyError:
            raise UsageError(f"no embedding for gene {gene!r}") from None


def hash_embedding(name: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector derived from the gene name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v[0] = 1.0
        norm = 1.0
    return v / norm


def load_embeddings(path, vocab: GeneVocab) -> SemanticEmbeddings:
    """Read `gene,v0,...,v{d-1}` CSV; vocabulary genes absent from the file get
    the deterministic hash fallback at the same dimension."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty embeddings file", 1) from None
        if len(header) < 2 or header[0] != "gene":
            raise ParseError("header must be gene,v0,...", 1)
        dim = len(header) - 1
        vectors: dict[str, np.ndarray] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataError(f"line {lineno}: inconsistent vector length {len(row) - 1} != {dim}")
            try:
                vec = np.array([float(x) for x in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"line {lineno}: non-finite embedding value")
            vectors[row[0]] = vec
    complete = {g: vectors.get(g, None) for g in vocab.names}
    for g, v in complete.items():
        if v is None:
            complete[g] = hash_embedding(g, dim)
    return SemanticEmbeddings(dim=dim, vectors=complete)


def save_embeddings(embeddings: SemanticEmbeddings, path, genes: list[str] | None = None) -> None:
    names = genes if genes is not None else sorted(embeddings.vectors)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gene"] + [f"v{i}" for i in range(embeddings.dim)])
        for g in names:
            writer.writerow([g] + [repr(float(x)) for x in embeddings.vectors[g]])


# --- synthetic data ----------------------------------------------------------------


@dataclass
class SynthConfig:
    n_genes: int = 200
    n_perturbations: int = 40
    cells_per_condition: int = 20
    deg_fracs: tuple[float, float, float] = (0.03, 0.07, 0.12)  # small/medium/large
    effect_magnitude: float = 1.0
    noise_sigma: float = 0.1
    embed_dim: int = 16
    n_modules: int | None = None  # derived from gene count when unset

    def validate(self) -> None:
        if self.n_genes < 20:
            raise UsageError("need at least 20 genes")
        if self.n_perturbations < 4:
            raise UsageError("need at least 4 perturbations")
        if self.cells_per_condition < 4:
            raise UsageError("need at least 4 cells per condition")
        if len(self.deg_fracs) != 3 or any(f <= 0 or f >= 1 for f in self.deg_fracs):
            raise UsageError("deg_fracs must be three values in (0, 1)")
        if self.effect_magnitude < 0 or self.noise_sigma < 0:
            raise UsageError("effect magnitude and noise sigma must be nonnegative")
        if self.embed_dim < 2:
            raise UsageError("embed_dim must be >= 2")


@dataclass
class SynthData:
    dataset: PerturbationDataset
    truth_degs: dict[str, list[str]]      # planted DEG gene names per perturbation
    graph: KnowledgeGraph
    embeddings: SemanticEmbeddings
    effects: dict[str, np.ndarray]        # planted signed deltas per perturbation
    strata: dict[str, str]                # planted stratum per perturbation


def synth_generate(config: SynthConfig, seed: int) -> SynthData:
    """Plant sparse module-structured effects on a synthetic expression dataset.

    Genes are partitioned into modules, and each module carries a shared
    response program: a fixed gene order plus signed per-gene magnitudes.
    A perturbation targeting module m responds on {itself} + a prefix of m's
    program (prefix length set by its stratum), so same-module perturbations
    have nested, strongly overlapping DEG sets. The graph wires each module's
    backbone plus direct edges from every perturbed gene to its planted DEG
    genes, so true responders sit within a hop of the perturbation. Semantic
    embeddings mix a module flavor with the mean hash of the planted set,
    giving perturbations with shared response genes similar vectors.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n, p_count, cells = config.n_genes, config.n_perturbations, config.cells_per_condition
    names = [f"G{i:04d}" for i in range(n)]
    vocab = GeneVocab(names)

    max_count = max(2, round(max(config.deg_fracs) * n))
    n_modules = config.n_modules or max(2, min(p_count, n // (2 * max_count)))
    n_modules = max(2, min(n_modules, n // 4))
    member_order = rng.permutation(n)
    modules = np.array_split(member_order, n_modules)
    module_of = np.empty(n, dtype=np.int64)
    for m, members in enumerate(modules):
        module_of[members] = m
    # response program per module: a fixed gene order and signed magnitudes
    programs = [list(rng.permutation(members)) for members in modules]
    response = np.zeros(n)
    for members in modules:
        signs = rng.choice([-1.0, 1.0], size=len(members))
        mags = config.effect_magnitude * rng.uniform(0.8, 1.2, size=len(members))
        response[members] = signs * mags

    # perturbation genes round-robin over modules
    used: set[int] = set()
    pert_gene_idx: list[int] = []
    for i in range(p_count):
        pool = [g for g in modules[i % n_modules] if g not in used]
        if not pool:
            pool = [g for g in range(n) if g not in used]
        g = int(rng.choice(pool))
        used.add(g)
        pert_gene_idx.append(g)

    truth_degs: dict[str, list[str]] = {}
    effects: dict[str, np.ndarray] = {}
    strata: dict[str, str] = {}
    blocks: dict[str, np.ndarray] = {}
    baseline = rng.uniform(0.5, 3.0, size=n)
    control = np.maximum(baseline + rng.normal(0.0, config.noise_sigma, size=(cells, n)), 0.0)

    for i, gidx in enumerate(pert_gene_idx):
        pname = names[gidx]
        stratum = STRATA[i % 3]
        frac = config.deg_fracs[i % 3]
        count = max(1, round(frac * n))
        program = [int(g) for g in programs[module_of[gidx]] if g != gidx]
        chosen = program[: count - 1]
        if len(chosen) + 1 < count:  # module exhausted: fill from the rest of the genome
            rest = [g for g in range(n) if g != gidx and g not in chosen]
            fill = rng.choice(rest, size=count - 1 - len(chosen), replace=False)
            chosen.extend(int(x) for x in fill)
        deg_idx = np.array(sorted([gidx] + chosen), dtype=np.int64)
        effect = np.zeros(n)
        effect[deg_idx] = response[deg_idx]
        effect[gidx] = -config.effect_magnitude  # knockdown suppresses the target itself
        noise = rng.normal(0.0, config.noise_sigma, size=(cells, n))
        blocks[pname] = np.maximum(baseline + effect + noise, 0.0)
        truth_degs[pname] = [names[j] for j in deg_idx]
        effects[pname] = effect
        strata[pname] = stratum

    # graph: module chain backbones and weak cross links for connectivity, plus
    # direct edges from each perturbed gene to its planted DEG genes so that
    # true responders lie in the perturbation's immediate neighborhood
    edges: list[tuple[int, int, float]] = []
    for members in modules:
        mem = list(members)
        for a, b in zip(mem, mem[1:]):
            edges.append((int(a), int(b), float(rng.uniform(0.4, 0.7))))
    for m in range(n_modules):
        a = int(rng.choice(modules[m]))
        b = int(rng.choice(modules[(m + 1) % n_modules]))
        if a != b:
            edges.append((a, b, float(rng.uniform(0.05, 0.3))))
    for gidx in pert_gene_idx:
        for g in truth_degs[names[gidx]]:
            tgt = vocab.index(g)
            if tgt != gidx:
                edges.append((gidx, tgt, float(rng.uniform(0.7, 1.0))))
    graph = KnowledgeGraph.from_edges(vocab, edges)

    dataset = PerturbationDataset(vocab, control, blocks)

    # semantic vectors: every gene mixes its module flavor with its own hash;
    # perturbation genes lean on the mean hash of their planted DEG set, so
    # perturbations with shared response genes get similar embeddings (the
    # planted analog of functionally related gene descriptions)
    vectors = {}
    for g in range(n):
        mod_part = hash_embedding(f"module-{module_of[g]}", config.embed_dim)
        gene_part = hash_embedding(names[g], config.embed_dim)
        v = 0.8 * mod_part + 0.2 * gene_part
        vectors[names[g]] = v / np.linalg.norm(v)
    for pname, genes in truth_degs.items():
        set_part = np.sum([hash_embedding(g, config.embed_dim) for g in genes], axis=0)
        set_part /= np.linalg.norm(set_part)
        mod_part = hash_embedding(f"module-{module_of[vocab.index(pname)]}", config.embed_dim)
        v = 0.6 * set_part + 0.4 * mod_part
        vectors[pname] = v / np.linalg.norm(v)
    embeddings = SemanticEmbeddings(dim=config.embed_dim, vectors=vectors)

    return SynthData(
        dataset=dataset,
        truth_degs=truth_degs,
        graph=graph,
        embeddings=embeddings,
        effects=effects,
        strata=strata,
    )
