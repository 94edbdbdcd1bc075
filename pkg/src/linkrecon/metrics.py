"""Ranking metrics, the reconstruction evaluation protocol, and heuristic baselines."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .fsutil import atomic_write_text
from .graph import Graph, PerturbationResult, perturb, to_adjacency


@dataclass
class ScoredPairs:
    """Unordered pairs ``i < j`` in lexicographic order with one score each.

    The position of a pair in these arrays is its pair index, used to break
    score ties deterministically.
    """

    i: np.ndarray
    j: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.score)

    def mask(self, edges) -> np.ndarray:
        """Boolean mask of the pairs that belong to ``edges``."""
        n = int(max(self.i.max(initial=0), self.j.max(initial=0))) + 1
        a = np.zeros((n, n), dtype=bool)
        for u, v in edges:
            a[u, v] = True
        return a[self.i, self.j]


@dataclass
class MetricsReport:
    auc: float
    ap: float
    precision_missing: float
    L_missing: int
    precision_spurious: float | None = None
    L_spurious: int | None = None
    spurious_auc: float | None = None
    spurious_ap: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def symmetrize_scores(scores: np.ndarray) -> ScoredPairs:
    """Average ``s_ij`` and ``s_ji`` for every ``i < j``; the diagonal is dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"expected a square matrix, got {scores.shape}")
    iu, ju = np.triu_indices(scores.shape[0], k=1)
    return ScoredPairs(iu, ju, 0.5 * (scores[iu, ju] + scores[ju, iu]))


def auc(pos_scores, neg_scores) -> float:
    """Probability that a positive outranks a negative, ties counting one half.

    Computed from the rank sum of the positives in the pooled sample.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    p, q = pos.size, neg.size
    return float((ranks[:p].sum() - p * (p + 1) / 2.0) / (p * q))


def auc_bruteforce(pos_scores, neg_scores) -> float:
    """All-pairs comparison; O(p*q), for testing."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (pos.size * neg.size))


def descending_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def ascending_order(scores) -> np.ndarray:
    return np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k holding a positive (descending scores)."""
    labels = np.asarray(labels).astype(bool).ravel()
    if not labels.any():
        raise ValueError("average precision needs at least one positive")
    hits = labels[descending_order(scores)]
    k = np.arange(1, hits.size + 1)
    return float((np.cumsum(hits)[hits] / k[hits]).mean())


def precision_at_L(order: np.ndarray, in_probe: np.ndarray, L: int | None = None) -> float:
    """Share of the first ``L`` entries of ``order`` that are probe items.

    ``L`` defaults to the probe size.
    """
    in_probe = np.asarray(in_probe, dtype=bool)
    n_probe = int(in_probe.sum())
    if n_probe == 0:
        raise ValueError("empty probe set")
    if L is None:
        L = n_probe
    if not 1 <= L <= len(order):
        raise ValueError(f"L={L} out of range for {len(order)} ranked items")
    return float(in_probe[order[:L]].sum() / L)


def inject_spurious(observed: Graph, fraction: float, seed: int) -> PerturbationResult:
    """Observed graph plus ``round(fraction * m)`` random non-edges (no deletions)."""
    return perturb(observed, 0.0, fraction, seed)


def evaluate_reconstruction(
    scores: np.ndarray,
    original: Graph,
    observed: Graph,
    spurious_test: PerturbationResult | None = None,
    spurious_scores: np.ndarray | None = None,
) -> MetricsReport:
    """Score missing-link recovery and, optionally, spurious-link detection.

    Missing links: among pairs absent from ``observed``, positives are edges of
    ``original`` and negatives are its non-edges.  Spurious links: among the
    edges of ``spurious_test.graph`` ranked by ascending ``spurious_scores``,
    the probe set is ``spurious_test.added``.
    """
    if scores.shape != (observed.n, observed.n) or original.n != observed.n:
        raise ValueError("score matrix and graphs disagree on node count")
    pairs = symmetrize_scores(scores)
    a_obs = to_adjacency(observed)[pairs.i, pairs.j] > 0
    a_org = to_adjacency(original)[pairs.i, pairs.j] > 0
    pool = ~a_obs
    cand = pairs.score[pool]
    label = a_org[pool]
    if not label.any():
        raise ValueError("no missing links to evaluate")
    report = MetricsReport(
        auc=auc(cand[label], cand[~label]),
        ap=average_precision(cand, label),
        precision_missing=precision_at_L(descending_order(cand), label),
        L_missing=int(label.sum()),
    )

    if spurious_test is not None:
        if spurious_scores is None:
            raise ValueError("spurious_test given without spurious_scores")
        if not spurious_test.added:
            raise ValueError("spurious test graph has no injected edges")
        sp = symmetrize_scores(spurious_scores)
        present = to_adjacency(spurious_test.graph)[sp.i, sp.j] > 0
        fake = sp.mask(spurious_test.added)[present]
        s = sp.score[present]
        report.precision_spurious = precision_at_L(ascending_order(s), fake)
        report.L_spurious = int(fake.sum())
        # low scores flag spurious edges, so rank by the negated score
        report.spurious_auc = auc(-s[fake], -s[~fake])
        report.spurious_ap = average_precision(-s, fake)
    return report


def write_ranked_csv(path, scores: np.ndarray, probe_edges=(), existing_edges=()) -> None:
    """Every unordered pair with its score, descending rank and flags."""
    pairs = symmetrize_scores(scores)
    order = descending_order(pairs.score)
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(1, len(order) + 1)
    probe = pairs.mask(probe_edges) if probe_edges else np.zeros(len(pairs), dtype=bool)
    exists = pairs.mask(existing_edges) if existing_edges else np.zeros(len(pairs), dtype=bool)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "score", "rank", "in_probe", "observed"])
    for k in order:
        w.writerow([pairs.i[k], pairs.j[k], repr(float(pairs.score[k])), rank[k], int(probe[k]), int(exists[k])])
    atomic_write_text(path, buf.getvalue())


# -- heuristic baselines ------------------------------------------------------

BASELINES = ("CN", "RA", "LP")


def baseline_matrix(kind: str, g: Graph, epsilon: float = 1e-3) -> np.ndarray:
    """Full n x n similarity matrix for a local heuristic."""
    a = to_adjacency(g)
    kind = kind.upper()
    if kind == "CN":
        return a @ a
    if kind == "RA":
        deg = a.sum(axis=1)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return (a * inv[None, :]) @ a
    if kind == "LP":
        a2 = a @ a
        return a2 + epsilon * (a2 @ a)
    raise ValueError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")


def baseline_scores(kind: str, g: Graph, epsilon: float = 1e-3) -> ScoredPairs:
    return symmetrize_scores(baseline_matrix(kind, g, epsilon))
