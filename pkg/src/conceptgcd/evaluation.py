"""Clustering accuracy with optimal matching, k-means baseline, neuron KL analysis, norm diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, NumericError, ParameterError
from .numerics import RngState

logger = logging.getLogger(__name__)

KL_BIN_EDGES = (0.01, 0.1, 0.2, 0.5, 1.0)
KL_BIN_LABELS = ("(0, 0.01)", "[0.01, 0.1)", "[0.1, 0.2)", "[0.2, 0.5)", "[0.5, 1.0)", "[1.0, inf)")


def optimal_assignment(benefit: np.ndarray) -> np.ndarray:
    """Row -> column permutation maximizing total benefit of a square matrix.

    Among optimal permutations the lexicographically smallest one is
    returned, so ties resolve toward low column indices.
    """
    benefit = np.asarray(benefit, dtype=np.float64)
    if benefit.ndim != 2 or benefit.shape[0] != benefit.shape[1]:
        raise ParameterError(f"assignment needs a square matrix, got {benefit.shape}")
    if not np.all(np.isfinite(benefit)):
        raise NumericError("benefit matrix has non-finite entries")
    k = benefit.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    tol = 1e-9 * max(1.0, float(np.abs(benefit).max())) * k

    def best(rows, cols) -> float:
        if not rows:
            return 0.0
        sub = benefit[np.ix_(rows, cols)]
        r, c = linear_sum_assignment(sub, maximize=True)
        return float(sub[r, c].sum())

    perm = np.empty(k, dtype=np.int64)
    rows = list(range(k))
    cols = list(range(k))
    target = best(rows, cols)
    for i in range(k):
        rest_rows = rows[1:]
        for j in cols:
            rest_cols = [c for c in cols if c != j]
            value = benefit[i, j] + best(rest_rows, rest_cols)
            if value >= target - tol:
                perm[i] = j
                target = value - benefit[i, j]
                cols = rest_cols
                break
        rows = rest_rows
    return perm


@dataclass
class AccReport:
    acc_all: float
    acc_known: float | None
    acc_novel: float | None
    matching: dict[int, int]
    n_evaluated: int
    n_known_samples: int = 0
    n_novel_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "acc_all": self.acc_all,
            "acc_known": self.acc_known,
            "acc_novel": self.acc_novel,
            "matching": {str(k): v for k, v in sorted(self.matching.items())},
            "n_evaluated": self.n_evaluated,
            "n_known_samples": self.n_known_samples,
            "n_novel_samples": self.n_novel_samples,
        }


def clustering_accuracy(preds, gts, n_known: int, n_classes: int | None = None) -> AccReport:
    """Accuracy after one global cluster-to-class matching, split by known/novel ground truth.

    The contingency matrix is padded to square with zero benefit, so extra
    clusters or classes simply stay unmatched.
    """
    preds = np.asarray(preds, dtype=np.int64)
    gts = np.asarray(gts, dtype=np.int64)
    if preds.shape != gts.shape or preds.ndim != 1:
        raise DataError(f"preds {preds.shape} and gts {gts.shape} must be equal-length vectors")
    if preds.size == 0:
        raise DataError("cannot score an empty prediction set")
    if preds.min() < 0 or gts.min() < 0:
        raise DataError("labels and cluster ids must be non-negative")
    k = max(int(preds.max()), int(gts.max())) + 1
    if n_classes is not None:
        k = max(k, n_classes)
    counts = np.zeros((k, k))
    np.add.at(counts, (preds, gts), 1.0)
    perm = optimal_assignment(counts)
    mapped = perm[preds]
    hit = mapped == gts
    known = gts < n_known
    used = np.unique(preds)
    return AccReport(
        acc_all=float(hit.mean()),
        acc_known=float(hit[known].mean()) if known.any() else None,
        acc_novel=float(hit[~known].mean()) if (~known).any() else None,
        matching={int(c): int(perm[c]) for c in used},
        n_evaluated=int(preds.size),
        n_known_samples=int(known.sum()),
        n_novel_samples=int((~known).sum()),
    )


def evaluate_model(model, ds) -> AccReport:
    """Score ``model.predict`` on the unlabeled part of ``ds``."""
    idx = ds.unlabeled_indices
    preds = model.predict(ds.features[idx])
    return clustering_accuracy(preds, ds.gt_labels[idx], ds.n_known, ds.n_classes)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_fit(features: np.ndarray, k: int, rng: RngState, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    An emptied cluster is re-seeded with the point farthest from its
    current center. Stops at an assignment fixpoint or after ``max_iter``.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.choice(n, 1)[0])]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # remaining points coincide with chosen centers; take unused indices in order
            taken = {tuple(c) for c in centers[:j]}
            idx = next((i for i in range(n) if tuple(x[i]) not in taken), j)
        else:
            idx = rng.choice_weighted(closest / total)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])

    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                dist_own = ((x - centers[labels]) ** 2).sum(1)
                far = int(dist_own.argmax())
                logger.debug("k-means: re-seeding empty cluster %d from point %d", j, far)
                labels[far] = j
                centers[j] = x[far]
    final = _sq_dists(x, centers)[np.arange(n), labels].sum()
    if not history or final < history[-1]:
        history.append(float(final))
    return KMeansResult(labels, centers, history, it)


def kmeans(features: np.ndarray, k: int, rng: RngState, max_iter: int = 300) -> np.ndarray:
    return kmeans_fit(features, k, rng, max_iter).labels


@dataclass
class KlHistogram:
    min_kl: np.ndarray
    counts: list[int]

    def to_dict(self) -> dict:
        return {
            "bins": list(KL_BIN_LABELS),
            "counts": self.counts,
            "n_neurons": int(self.min_kl.size),
            "min_kl": [float(v) for v in self.min_kl],
        }


def _column_softmax(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a - a.max(axis=0, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=0, keepdims=True))
    return np.exp(logp), logp


def kl_neuron_analysis(model_a_features: np.ndarray, model_b_features: np.ndarray) -> KlHistogram:
    """For every neuron of model A, the smallest KL divergence to any neuron of model B.

    Each neuron's responses over the S probe samples are turned into a
    distribution with a softmax over samples (natural log, temperature 1).
    Exact zeros fall into the first bin.
    """
    a = np.asarray(model_a_features, dtype=np.float64)
    b = np.asarray(model_b_features, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise DataError(f"probe counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise DataError("KL analysis needs at least 2 probe samples")
    pa, logpa = _column_softmax(a)
    _, logpb = _column_softmax(b)
    self_term = (pa * logpa).sum(axis=0)
    kl = self_term[:, None] - pa.T @ logpb
    min_kl = np.maximum(kl.min(axis=1), 0.0)
    idx = np.searchsorted(np.array(KL_BIN_EDGES), min_kl, side="right")
    counts = np.bincount(idx, minlength=len(KL_BIN_LABELS)).tolist()
    return KlHistogram(min_kl, counts)


@dataclass
class NormRatioReport:
    mean_ratio: float | None
    n_rows: int
    n_excluded: int


def norm_ratio_diagnostic(u: np.ndarray, m: int) -> NormRatioReport:
    """Mean over rows of ||u[m:]|| / ||u||; all-zero rows are excluded and counted."""
    u = np.asarray(u, dtype=np.float64)
    if not 0 <= m < u.shape[1]:
        raise ParameterError(f"split m={m} must be < width {u.shape[1]}")
    full = np.linalg.norm(u, axis=1)
    tail = np.linalg.norm(u[:, m:], axis=1)
    ok = full > 0
    excluded = int((~ok).sum())
    if excluded:
        logger.info("norm ratio: %d all-zero rows excluded", excluded)
    mean = float((tail[ok] / full[ok]).mean()) if ok.any() else None
    return NormRatioReport(mean, int(u.shape[0]), excluded)
