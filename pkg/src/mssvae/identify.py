"""Constructive identification: anchor detection, anchor parameters and support matching.

All group and feature indices are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def marginal_correlation(X) -> np.ndarray:
    """Sample Pearson correlation of the columns of ``X`` (N x G)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("need an N x G matrix with N >= 3")
    sd = X.std(axis=0)
    if np.any(sd == 0):
        raise ValueError(f"column {int(np.flatnonzero(sd == 0)[0])} is constant")
    R = np.corrcoef(X, rowvar=False)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def cov_to_corr(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    d = np.sqrt(np.diag(S))
    if np.any(d <= 0):
        raise ValueError("covariance has a nonpositive diagonal entry")
    R = S / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return R


def parallel_cosines(R) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of rows ``l`` and ``p`` of ``R`` with entries ``l`` and ``p`` removed, for all pairs.

    Returns the cosine matrix and the matching matrix of the smaller of the
    two reduced norms.
    """
    R = np.asarray(R, dtype=np.float64)
    G = R.shape[0]
    if R.shape != (G, G):
        raise ValueError("R must be square")
    d = np.diag(R)
    R2 = R @ R
    sq = np.diag(R2)
    # drop the s = l and s = p terms from the full inner products
    dot = R2 - R * d[:, None] - R * d[None, :]
    n_l = sq[:, None] - d[:, None] ** 2 - R**2
    n_p = sq[None, :] - d[None, :] ** 2 - R**2
    n_l, n_p = np.sqrt(np.maximum(n_l, 0)), np.sqrt(np.maximum(n_p, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where((n_l > 0) & (n_p > 0), dot / (n_l * n_p), 0.0)
    np.fill_diagonal(cos, 1.0)
    return cos, np.minimum(n_l, n_p)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def detect_anchors(R, tol: float = 0.01) -> tuple[list[list[int]], int]:
    """Candidate anchor groups: features whose correlation rows are parallel.

    A pair is parallel when the absolute cosine of the reduced rows is at
    least ``1 - tol`` and both reduced norms exceed ``tol``. Pairs are
    merged by transitive closure. Each group is sorted, and groups are
    ordered by their first index.
    """
    R = np.asarray(R, dtype=np.float64)
    G = R.shape[0]
    if G < 4:
        raise ValueError("need at least 4 features")
    cos, norm = parallel_cosines(R)
    hit = (np.abs(cos) >= 1 - tol) & (norm > tol)
    np.fill_diagonal(hit, False)
    uf = _UnionFind(G)
    for l, p in zip(*np.nonzero(np.triu(hit, 1))):
        uf.union(int(l), int(p))
    groups: dict[int, list[int]] = {}
    for j in range(G):
        groups.setdefault(uf.find(j), []).append(j)
    out = sorted((g for g in groups.values() if len(g) >= 2), key=lambda g: g[0])
    return out, len(out)


@dataclass
class AnchorParams:
    scalings: list[dict[int, float]]
    signal_variance: list[float | None]
    anchor_noise: dict[int, float]
    unresolved: list[int] = field(default_factory=list)


def estimate_anchor_params(S, groups, tol: float = 1e-8, data: bool = False) -> AnchorParams:
    """Scaling constants, signal variances and anchor noise variances.

    ``S`` is a G x G covariance, or an N x G data matrix when ``data`` is
    set. In each group the first feature ``j`` is the representative, so
    its scaling is 1 and ``f`` is its noise-free part. A partner ``j'`` has
    ``c = median_l Cov(x_j', x_l) / Cov(x_j, x_l)`` over features ``l``
    outside the group, skipping ratios with ``|Cov(x_j, x_l)| < tol``.
    """
    S = np.asarray(S, dtype=np.float64)
    if data:
        S = np.cov(S, rowvar=False)
    G = S.shape[0]
    scalings, signal, noise, unresolved = [], [], {}, []
    for gi, group in enumerate(groups):
        group = list(group)
        if len(group) < 2:
            raise ValueError(f"group {gi} has fewer than 2 features")
        others = np.setdiff1d(np.arange(G), group)
        if others.size == 0:
            raise ValueError("need at least one feature outside the anchor groups")
        j = group[0]
        denom = S[j, others]
        ok = np.abs(denom) >= tol
        if not np.any(ok):
            unresolved.append(gi)
            scalings.append({})
            signal.append(None)
            continue
        cs = {j: 1.0}
        vf = []
        for jp in group[1:]:
            c = float(np.median(S[jp, others[ok]] / denom[ok]))
            cs[jp] = c
            vf.append(S[j, jp] / c)
        var_f = float(np.mean(vf))
        scalings.append(cs)
        signal.append(var_f)
        for f_idx, c in cs.items():
            noise[f_idx] = max(float(S[f_idx, f_idx] - c**2 * var_f), 0.0)
    return AnchorParams(scalings, signal, noise, unresolved)


def _jaccard_cols(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = A.astype(np.int64)
    B = B.astype(np.int64)
    inter = A.T @ B
    union = A.sum(0)[:, None] + B.sum(0)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


@dataclass
class SupportMatch:
    shared: np.ndarray  # G x K_S_hat, boolean
    specific: list[np.ndarray]  # per study, G x (K_m_hat)
    families: list[tuple[int, ...]]  # column index per study for each shared column
    specific_columns: list[list[int]]


def match_shared_supports(supports, match_tol: float = 0.9) -> SupportMatch:
    """Split per-study column supports into shared and study-specific parts.

    A family picks one nonempty column from each study so that all pairwise
    Jaccard indices are at least ``match_tol``; its score is the smallest of
    them. Families are accepted greedily by descending score (ties broken by
    the column index tuple), each column used at most once. Each accepted
    family yields the intersection of its supports as a shared column.
    """
    mats = [np.asarray(s) != 0 for s in supports]
    M = len(mats)
    if M < 2:
        raise ValueError("need at least two studies")
    G = mats[0].shape[0]
    if any(m.shape[0] != G for m in mats):
        raise ValueError("all supports need the same number of rows")
    J = {(a, b): _jaccard_cols(mats[a], mats[b]) for a in range(M) for b in range(a + 1, M)}
    nonempty = [np.flatnonzero(m.any(axis=0)) for m in mats]

    candidates: list[tuple[float, tuple[int, ...]]] = []

    def extend(prefix: list[int], score: float):
        s = len(prefix)
        if s == M:
            candidates.append((score, tuple(prefix)))
            return
        for col in nonempty[s]:
            new = score
            for a, ca in enumerate(prefix):
                v = J[(a, s)][ca, col]
                if v < match_tol:
                    break
                new = min(new, v)
            else:
                extend(prefix + [int(col)], new)

    extend([], 1.0)
    candidates.sort(key=lambda t: (-t[0], t[1]))
    used = [set() for _ in range(M)]
    families = []
    for _, fam in candidates:
        if any(c in used[m] for m, c in enumerate(fam)):
            continue
        families.append(fam)
        for m, c in enumerate(fam):
            used[m].add(c)
    families.sort(key=lambda f: f)
    shared = np.zeros((G, len(families)), dtype=bool)
    for k, fam in enumerate(families):
        col = np.ones(G, dtype=bool)
        for m, c in enumerate(fam):
            col &= mats[m][:, c]
        shared[:, k] = col
    spec_cols = [[c for c in range(mats[m].shape[1]) if c not in used[m]] for m in range(M)]
    specific = [mats[m][:, cols] for m, cols in enumerate(spec_cols)]
    return SupportMatch(shared, specific, families, spec_cols)


@dataclass
class AnchorReport:
    anchor_groups: list[list[int]]
    K_hat: int
    scalings: list[dict[int, float]]
    anchor_noise: dict[int, float]
    signal_variance: list[float | None]
    unresolved: list[int] = field(default_factory=list)
    label: str = "candidate anchors"
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["scalings"] = [{str(k): v for k, v in s.items()} for s in self.scalings]
        d["anchor_noise"] = {str(k): v for k, v in sorted(self.anchor_noise.items())}
        return json.dumps(d, indent=2, sort_keys=True)


def identify_anchors(X, tol: float = 0.01, ratio_tol: float = 1e-8) -> AnchorReport:
    """Detect anchors on the sample correlation of ``X`` and estimate their parameters."""
    X = np.asarray(X, dtype=np.float64)
    R = marginal_correlation(X)
    groups, K_hat = detect_anchors(R, tol)
    if groups:
        params = estimate_anchor_params(np.cov(X, rowvar=False), groups, ratio_tol)
    else:
        params = AnchorParams([], [], {})
    return AnchorReport(
        groups, K_hat, params.scalings, params.anchor_noise, params.signal_variance,
        params.unresolved, settings={"tol": tol, "ratio_tol": ratio_tol},
    )
