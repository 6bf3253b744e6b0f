"""Count filtering and highly variable gene selection by analytic Pearson residuals."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import MultiStudyDataset, ValidationError


@dataclass
class PreprocessConfig:
    min_library: float = math.exp(12.5)
    min_gene_total: float = 25
    cpm_threshold: float = 1.0
    cpm_min_fraction: float = 0.2
    n_top_genes: int = 5000
    theta: float = 100.0
    clip: float | None = None  # None clips residuals at sqrt(N)


@dataclass
class PreprocessReport:
    n_samples_in: int
    n_genes_in: int
    samples_removed_library: int
    genes_removed_total: int
    genes_removed_cpm: int
    genes_removed_hvg: int
    n_samples_out: int
    n_genes_out: int
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def pearson_residuals(counts, theta: float = 100.0, clip: float | None = None) -> np.ndarray:
    """``(x - mu) / sqrt(mu + mu^2 / theta)`` with ``mu_ij = l_i * p_j``; clipped at ``+-clip``."""
    X = np.asarray(counts, dtype=np.float64)
    lib = X.sum(axis=1, keepdims=True)
    frac = X.sum(axis=0, keepdims=True) / X.sum()
    mu = lib * frac
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(mu > 0, (X - mu) / np.sqrt(mu + mu**2 / theta), 0.0)
    c = math.sqrt(X.shape[0]) if clip is None else clip
    return np.clip(r, -c, c)


def residual_variance(counts, theta: float = 100.0, clip: float | None = None) -> np.ndarray:
    return pearson_residuals(counts, theta, clip).var(axis=0)


def preprocess_counts(counts, feature_names=None, config: PreprocessConfig | None = None, labels=None):
    """Sample filter, two gene filters, then top-variance genes, in that order.

    Returns ``(values, kept_samples, kept_genes, report)`` where the index
    arrays refer to the input matrix. When ``counts`` is a
    ``MultiStudyDataset`` a filtered dataset is returned in place of
    ``values``.
    """
    config = config or PreprocessConfig()
    ds = counts if isinstance(counts, MultiStudyDataset) else None
    if ds is not None:
        X, labels, feature_names = ds.values, ds.labels, ds.feature_names
    else:
        X = counts
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValidationError("counts must be a 2-d matrix")
    if np.any(X < 0) or not np.all(np.mod(X, 1) == 0):
        raise ValidationError("counts must be nonnegative integers")
    N0, G0 = X.shape
    samples = np.flatnonzero(X.sum(axis=1) >= config.min_library)
    if samples.size == 0:
        raise ValidationError(f"every sample has fewer than {config.min_library:.1f} total counts")
    X1 = X[samples]
    genes = np.flatnonzero(X1.sum(axis=0) >= config.min_gene_total)
    n_total = G0 - genes.size
    X2 = X1[:, genes].astype(np.float64)
    lib = X2.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cpm = np.where(lib > 0, 1e6 * X2 / lib, 0.0)
    keep = (cpm > config.cpm_threshold).mean(axis=0) >= config.cpm_min_fraction
    genes = genes[keep]
    n_cpm = int((~keep).sum())
    if genes.size == 0:
        raise ValidationError("no genes survive the count filters")
    X3 = X1[:, genes]
    rv = residual_variance(X3, config.theta, config.clip)
    order = np.argsort(-rv, kind="stable")[: config.n_top_genes]
    top = genes[np.sort(order)]
    n_hvg = genes.size - top.size
    out = X[np.ix_(samples, top)]
    report = PreprocessReport(
        N0, G0, N0 - samples.size, n_total, n_cpm, n_hvg, samples.size, top.size,
        settings={k: v for k, v in asdict(config).items()},
    )
    if ds is not None:
        names = [ds.feature_names[j] for j in top] if ds.feature_names else None
        sub_labels = ds.labels[samples]
        if np.any(np.bincount(sub_labels, minlength=ds.n_studies) == 0):
            raise ValidationError("filtering removed every sample of at least one study")
        ds_out = MultiStudyDataset(
            out.astype(np.int64), sub_labels, names, ds.study_names, n_studies_declared=ds.n_studies
        )
        return ds_out, samples, top, report
    return out, samples, top, report
