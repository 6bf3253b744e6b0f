"""Support recovery scores (Jaccard based) and the disentanglement score."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_TAU = 0.5
DEFAULT_MAX_DENSITY = 0.25


@dataclass
class ClusterSet:
    """Feature-index sets, one per retained column; ``columns`` maps back to the matrix."""

    sets: list[frozenset]
    columns: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.sets = [frozenset(int(i) for i in s) for s in self.sets]
        if not self.columns:
            self.columns = list(range(len(self.sets)))
        if any(len(s) == 0 for s in self.sets):
            raise ValueError("clusters must be nonempty")

    def __len__(self):
        return len(self.sets)

    @classmethod
    def from_support(cls, W: np.ndarray) -> "ClusterSet":
        """Nonzero pattern of each nonempty column."""
        W = np.asarray(W)
        cols = [k for k in range(W.shape[1]) if np.any(W[:, k] != 0)]
        return cls([np.flatnonzero(W[:, k]) for k in cols], cols)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        warnings.warn("Jaccard index of two empty sets; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return len(a & b) / len(union)


def extract_clusters(W, tau: float = DEFAULT_TAU, max_density: float = DEFAULT_MAX_DENSITY) -> ClusterSet:
    """Threshold ``|W| > tau`` column-wise; drop empty and overly dense columns."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    W = np.abs(np.asarray(W, dtype=np.float64))
    G = W.shape[0]
    sets, cols = [], []
    for k in range(W.shape[1]):
        idx = np.flatnonzero(W[:, k] > tau)
        if idx.size == 0 or idx.size / G > max_density:
            continue
        sets.append(idx)
        cols.append(k)
    return ClusterSet(sets, cols)


def count_nonzero_columns(W, tau: float = DEFAULT_TAU) -> int:
    """Columns with at least one entry above ``tau``, the dimension estimate after pruning."""
    return int(np.sum(np.any(np.abs(np.asarray(W)) > tau, axis=0)))


def jaccard_matrix(truth: ClusterSet, est: ClusterSet) -> np.ndarray:
    return np.array([[jaccard(t, e) for e in est.sets] for t in truth.sets]).reshape(len(truth), len(est))


def relevance_recovery(truth: ClusterSet, est: ClusterSet) -> tuple[float, float]:
    if len(truth) == 0:
        raise ValueError("truth must contain at least one cluster")
    if len(est) == 0:
        return 0.0, 0.0
    J = jaccard_matrix(truth, est)
    return float(J.max(axis=0).mean()), float(J.max(axis=1).mean())


def _optimal_total(score: np.ndarray) -> float:
    if score.size == 0:
        return 0.0
    r, c = linear_sum_assignment(score, maximize=True)
    return float(score[r, c].sum())


def hungarian_assignment(score) -> list[tuple[int, int]]:
    """Maximum-score one-to-one assignment of ``min(R, C)`` pairs.

    Among optimal assignments the lexicographically smallest is returned:
    rows of the shorter axis are fixed in order, each to the smallest
    column index that still admits an optimal completion.
    """
    S = np.asarray(score, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("score must be a 2-d matrix")
    if not np.all(np.isfinite(S)):
        raise ValueError("scores must be finite")
    transpose = S.shape[0] > S.shape[1]
    A = S.T if transpose else S
    best = _optimal_total(A)
    tol = 1e-9 * max(1.0, float(np.abs(A).sum()))
    rows_left = list(range(A.shape[0]))
    cols_left = list(range(A.shape[1]))
    pairs, acc = [], 0.0
    for i in range(A.shape[0]):
        rows_left.remove(i)
        for j in cols_left:
            rest = A[np.ix_(rows_left, [c for c in cols_left if c != j])]
            if acc + A[i, j] + _optimal_total(rest) >= best - tol:
                pairs.append((i, j))
                acc += A[i, j]
                cols_left.remove(j)
                break
    if transpose:
        pairs = sorted((j, i) for i, j in pairs)
    return pairs


def brute_force_assignment(score) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive search over all assignments, for testing."""
    S = np.asarray(score, dtype=np.float64)
    transpose = S.shape[0] > S.shape[1]
    A = S.T if transpose else S
    best, best_pairs = -np.inf, None
    for perm in permutations(range(A.shape[1]), A.shape[0]):
        tot = sum(A[i, j] for i, j in enumerate(perm))
        if tot > best:
            best, best_pairs = tot, list(enumerate(perm))
    if transpose:
        best_pairs = sorted((j, i) for i, j in best_pairs)
    return float(best), best_pairs


def consensus(truth: ClusterSet, est: ClusterSet) -> float:
    if len(truth) == 0:
        raise ValueError("truth must contain at least one cluster")
    if len(est) == 0:
        return 0.0
    J = jaccard_matrix(truth, est)
    pairs = hungarian_assignment(J)
    # fsum is exactly rounded, so the score does not depend on column order
    return math.fsum(J[i, j] for i, j in pairs) / max(len(truth), len(est))


def disentanglement_from_importance(R) -> float:
    """Importance-weighted ``1 - H_K`` over estimated dimensions.

    ``R[k', k]`` is the importance of estimated dimension ``k'`` for true
    dimension ``k``; entropies use base ``K`` (the number of true dims).
    """
    R = np.abs(np.asarray(R, dtype=np.float64))
    if R.ndim != 2 or R.shape[1] < 1:
        raise ValueError("importance matrix must be K_hat x K with K >= 1")
    mass = R.sum(axis=1)
    total = mass.sum()
    if total <= 0:
        return 0.0
    K = R.shape[1]
    D = np.ones(R.shape[0])
    if K > 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            P = np.where(mass[:, None] > 0, R / mass[:, None], 0.0)
            H = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1) / np.log(K)
        D = np.clip(1.0 - H, 0.0, 1.0)
    rho = mass / total
    return float(np.sum(rho * D))


def importance_matrix(Z_true, Z_est, seed: int = 0, n_estimators: int = 100, max_depth: int = 4) -> np.ndarray:
    """Fit one boosted-tree regressor per true dimension; importances form the columns."""
    from sklearn.ensemble import GradientBoostingRegressor

    Z_true = np.asarray(Z_true, dtype=np.float64)
    Z_est = np.asarray(Z_est, dtype=np.float64)
    if Z_true.shape[0] != Z_est.shape[0]:
        raise ValueError("true and estimated latents need the same number of samples")
    if Z_true.shape[0] < 50:
        raise ValueError("need at least 50 samples")
    cols = []
    for k in range(Z_true.shape[1]):
        y = Z_true[:, k]
        if np.ptp(y) == 0:
            warnings.warn(f"true dimension {k} is constant; skipped", RuntimeWarning, stacklevel=2)
            continue
        reg = GradientBoostingRegressor(n_estimators=n_estimators, max_depth=max_depth, random_state=seed)
        reg.fit(Z_est, y)
        cols.append(reg.feature_importances_)
    if not cols:
        raise ValueError("every true dimension is constant")
    return np.stack(cols, axis=1)


def disentanglement(Z_true, Z_est, seed: int = 0) -> float:
    return disentanglement_from_importance(importance_matrix(Z_true, Z_est, seed=seed))


@dataclass
class MetricsReport:
    consensus_shared: float
    consensus_specific: float
    relevance: float
    recovery: float
    disentanglement: float | None
    settings: dict = field(default_factory=dict)
    seed: int | None = None
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_masks(est, truth, Z_est=None, Z_true=None, tau=DEFAULT_TAU, max_density=DEFAULT_MAX_DENSITY,
                   seed: int = 0) -> MetricsReport:
    """Score estimated masks against planted ones.

    ``est`` and ``truth`` are ``MaskSet`` objects. Shared scores compare the
    shared matrices, specific scores average over studies, and relevance and
    recovery use all columns together. Disentanglement uses the estimated
    latent columns that survive thresholding.
    """
    t_shared = ClusterSet.from_support(truth.shared)
    c_shared = consensus(t_shared, extract_clusters(est.shared, tau, max_density))
    c_spec = []
    for w_t, w_e in zip(truth.study, est.study):
        t = ClusterSet.from_support(w_t)
        c_spec.append(consensus(t, extract_clusters(w_e, tau, max_density)) if len(t) else float("nan"))
    t_all = ClusterSet.from_support(truth.full())
    e_all = extract_clusters(est.full(), tau, max_density)
    rel, rec = relevance_recovery(t_all, e_all)
    dis = None
    if Z_est is not None and Z_true is not None:
        keep = e_all.columns
        dis = disentanglement(Z_true, np.asarray(Z_est)[:, keep], seed=seed) if keep else 0.0
    details = {
        "consensus_per_study": c_spec,
        "k_shared_true": truth.k_shared,
        "k_shared_nonzero": count_nonzero_columns(est.shared, tau),
        "k_specific_true": truth.k_specific,
        "k_specific_nonzero": [count_nonzero_columns(w, tau) for w in est.study],
        "k_total_true": truth.k_total,
        "k_total_nonzero": count_nonzero_columns(est.full(), tau),
        "k_total_retained": len(e_all),
        "retained_columns": e_all.columns,
    }
    settings = {
        "tau": tau,
        "max_density": max_density,
        "regressor": "GradientBoostingRegressor(n_estimators=100, max_depth=4)",
    }
    return MetricsReport(
        c_shared, float(np.nanmean(c_spec)) if c_spec else float("nan"), rel, rec, dis, settings, seed, details
    )
