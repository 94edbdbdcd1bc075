"""Graph ingestion, observed-graph splitting and random-mapping augmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .fsutil import atomic_write_text

log = logging.getLogger(__name__)

Edge = tuple[int, int]


class GraphError(ValueError):
    """Raised for malformed graph input or infeasible sampling requests."""


def _norm(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    """Undirected, unweighted graph on nodes ``0..n-1``.

    Edges are stored as ``(u, v)`` with ``u < v``.
    """

    n: int
    edges: frozenset[Edge]

    def __post_init__(self):
        if self.n < 1:
            raise GraphError(f"node count must be >= 1, got {self.n}")
        normed = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise GraphError(f"self-loop on node {u}")
            if min(u, v) < 0 or max(u, v) >= self.n:
                raise GraphError(f"edge ({u}, {v}) out of range for n={self.n}")
            normed.add(_norm(u, v))
        object.__setattr__(self, "edges", frozenset(normed))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Edge]) -> "Graph":
        return cls(n, frozenset(edges))

    @property
    def m(self) -> int:
        return len(self.edges)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def non_edges(self) -> list[Edge]:
        """All unordered pairs ``u < v`` that are not edges, in lexicographic order."""
        a = to_adjacency(self)
        iu, ju = np.triu_indices(self.n, k=1)
        keep = a[iu, ju] == 0
        return list(zip(iu[keep].tolist(), ju[keep].tolist()))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg


@dataclass(frozen=True)
class PerturbationResult:
    graph: Graph
    deleted: frozenset[Edge]
    added: frozenset[Edge]


@dataclass
class Dataset:
    """Observed graph, ground truth and augmented training/validation graphs."""

    observed: Graph
    original: Graph
    train: list[PerturbationResult]
    val: list[PerturbationResult]
    missing: frozenset[Edge]
    spurious: frozenset[Edge] = frozenset()
    # validation deletions/additions that could not be kept out of the training perturbations
    val_overlap: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.observed.n


def to_adjacency(g: Graph) -> np.ndarray:
    a = np.zeros((g.n, g.n), dtype=np.float64)
    if g.edges:
        e = np.array(sorted(g.edges), dtype=np.int64)
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
    return a


def _parse_lines(lines: Iterable[str], source: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise GraphError(f"{source}:{lineno}: expected two node ids, got {raw.strip()!r}")
        pairs.append((parts[0], parts[1]))
    return pairs


def load_edge_list(path, n: int | None = None, relabel: bool = False) -> Graph:
    """Read a whitespace-separated edge list.

    Node ids must be non-negative integers unless ``relabel`` is set, in which
    case arbitrary tokens are mapped to dense ids in order of first appearance
    and the mapping is written next to the file as ``<name>.nodemap.json``.
    A third column (weight) is ignored.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        pairs = _parse_lines(fh, str(path))
    if not pairs:
        raise GraphError(f"{path}: no edges")

    if relabel:
        ids: dict[str, int] = {}
        for a, b in pairs:
            for tok in (a, b):
                ids.setdefault(tok, len(ids))
        int_pairs = [(ids[a], ids[b]) for a, b in pairs]
        sidecar = path.with_name(path.name + ".nodemap.json")
        atomic_write_text(sidecar, json.dumps(ids, indent=1) + "\n")
    else:
        int_pairs = []
        for a, b in pairs:
            try:
                u, v = int(a), int(b)
            except ValueError:
                raise GraphError(f"{path}: non-integer node id in {a!r} {b!r}") from None
            if u < 0 or v < 0:
                raise GraphError(f"{path}: negative node id in {a} {b}")
            int_pairs.append((u, v))

    for u, v in int_pairs:
        if u == v:
            raise GraphError(f"{path}: self-loop on node {u}")
    top = 1 + max(max(p) for p in int_pairs)
    if n is None:
        n = top
    elif n < top:
        raise GraphError(f"{path}: node id {top - 1} exceeds declared n={n}")
    return Graph(n, frozenset(_norm(u, v) for u, v in int_pairs))


def write_edge_list(g: Graph, path, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"{u} {v}" for u, v in g.sorted_edges())
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def sample_without_replacement(items: list, k: int, rng: np.random.Generator) -> list:
    """Partial Fisher-Yates shuffle: the first ``k`` slots of a seeded shuffle.

    Slot ``i`` is swapped with a uniform index in ``[i, len(items))`` drawn by
    ``rng.integers``; the result is a uniform ``k``-subset in draw order.
    """
    N = len(items)
    if k > N:
        raise GraphError(f"cannot sample {k} items from {N}")
    idx = np.arange(N)
    picks = rng.integers(np.arange(k), N) if k else np.empty(0, dtype=np.int64)
    for i in range(k):
        j = picks[i]
        idx[i], idx[j] = idx[j], idx[i]
    return [items[i] for i in idx[:k]]


def split_observed(g: Graph, keep_fraction: float, seed: int) -> Graph:
    """Keep a uniform random ``round(keep_fraction * m)`` subset of the edges."""
    if not 0.0 < keep_fraction <= 1.0:
        raise GraphError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    k = int(round(keep_fraction * g.m))
    if k < 1:
        raise GraphError("observed graph would be empty")
    if k == g.m:
        return g
    rng = np.random.default_rng(seed)
    kept = sample_without_replacement(g.sorted_edges(), k, rng)
    return Graph(g.n, frozenset(kept))


def perturb(
    g: Graph,
    del_fraction: float,
    add_fraction: float,
    seed: int,
    del_pool: list[Edge] | None = None,
    add_pool: list[Edge] | None = None,
) -> PerturbationResult:
    """Delete and add random edges; both counts are fractions of ``g.m``.

    Deletions are drawn from the existing edges and additions from the non-edges.
    ``del_pool``/``add_pool`` narrow the candidate sets (used to keep validation
    perturbations apart from training ones).
    """
    if not 0.0 <= del_fraction <= 1.0:
        raise GraphError(f"del_fraction out of range: {del_fraction}")
    if not 0.0 <= add_fraction < 1.0:
        raise GraphError(f"add_fraction out of range: {add_fraction}")
    n_del = int(round(del_fraction * g.m))
    n_add = int(round(add_fraction * g.m))
    rng = np.random.default_rng(seed)

    del_cands = g.sorted_edges() if del_pool is None else del_pool
    if n_del > len(del_cands):
        raise GraphError(f"requested {n_del} deletions from {len(del_cands)} candidates")
    deleted = sample_without_replacement(del_cands, n_del, rng)

    add_cands = g.non_edges() if add_pool is None else add_pool
    if n_add > len(add_cands):
        raise GraphError(f"requested {n_add} additions but only {len(add_cands)} non-edges")
    added = sample_without_replacement(add_cands, n_add, rng)

    new_edges = (g.edges | frozenset(added)) - frozenset(deleted)
    return PerturbationResult(Graph(g.n, new_edges), frozenset(deleted), frozenset(added))


def _disjoint_pool(full: list[Edge], used: set[Edge], k: int, rng) -> tuple[list[Edge], int]:
    """Candidates not in ``used``; padded from ``used`` when too few remain.

    Returns the pool and how many padded (overlapping) candidates it must use.
    """
    fresh = [e for e in full if e not in used]
    if len(fresh) >= k:
        return fresh, 0
    short = k - len(fresh)
    pad = sample_without_replacement(sorted(used), short, rng)
    # pool of exactly k: every fresh candidate plus the padding
    return fresh + pad, short


def build_dataset(
    original: Graph,
    keep_fraction: float = 0.9,
    t: int = 100,
    del_fraction: float = 0.1,
    add_fraction: float = 0.1,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> Dataset:
    """Split ``original`` into an observed graph and ``t`` augmented copies of it.

    Augmented graph ``i`` uses seed ``seed + 1 + i``. Validation graphs draw
    their deletions/additions from candidates untouched by any training graph;
    when that pool is too small the remainder is drawn from the used set and
    counted in ``Dataset.val_overlap``.
    """
    if t < 2:
        raise GraphError(f"t must be >= 2, got {t}")
    observed = split_observed(original, keep_fraction, seed)
    n_val = max(1, int(round(val_fraction * t)))
    n_train = t - n_val
    if n_train < 1:
        raise GraphError(f"t={t} leaves no training graphs")

    edges = observed.sorted_edges()
    non_edges = observed.non_edges()
    train = [
        perturb(observed, del_fraction, add_fraction, seed + 1 + i, edges, non_edges)
        for i in range(n_train)
    ]
    used_del = set().union(*(p.deleted for p in train))
    used_add = set().union(*(p.added for p in train))
    n_del = int(round(del_fraction * observed.m))
    n_add = int(round(add_fraction * observed.m))

    val = []
    overlap = 0
    for i in range(n_train, t):
        s = seed + 1 + i
        pad_rng = np.random.default_rng([s, 1])
        dpool, d_short = _disjoint_pool(edges, used_del, n_del, pad_rng)
        apool, a_short = _disjoint_pool(non_edges, used_add, n_add, pad_rng)
        overlap += d_short + a_short
        val.append(perturb(observed, del_fraction, add_fraction, s, dpool, apool))
    if overlap:
        log.info("validation perturbations overlap training ones on %d pairs", overlap)

    return Dataset(
        observed=observed,
        original=original,
        train=train,
        val=val,
        missing=original.edges - observed.edges,
        val_overlap=overlap,
        meta=dict(
            keep_fraction=keep_fraction,
            t=t,
            del_fraction=del_fraction,
            add_fraction=add_fraction,
            seed=seed,
        ),
    )


def write_manifest(path, **entries) -> None:
    """Dataset manifest: JSON with edge-list paths, fractions and seeds."""
    atomic_write_text(Path(path), json.dumps(entries, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    # relative paths resolve against the manifest's directory
    for key in ("original", "observed", "holdout"):
        if key in data and data[key] is not None and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])
    return data
