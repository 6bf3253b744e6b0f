"""Observation models: Gaussian and negative binomial, plus the library-size lognormal."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def gaussian_loglik(x, mean, sigma2) -> Tensor:
    """Full Gaussian log density summed over the last axis."""
    x, mean, sigma2 = _t(x), _t(mean), _t(sigma2)
    if torch.any(sigma2 <= 0):
        raise ValueError("noise variances must be positive")
    return (-0.5 * torch.log(2 * np.pi * sigma2) - (x - mean) ** 2 / (2 * sigma2)).sum(dim=-1)


def nb_logpmf(x, mu, phi) -> Tensor:
    """Elementwise log pmf of NB(mean=mu, inverse dispersion=phi)."""
    x, mu, phi = _t(x), _t(mu), _t(phi)
    if torch.any(mu <= 0) or torch.any(phi <= 0):
        raise ValueError("mu and phi must be positive")
    return (
        torch.lgamma(x + phi)
        - torch.lgamma(x + 1)
        - torch.lgamma(phi)
        - phi * torch.log1p(mu / phi)
        + torch.xlogy(x, mu)
        - x * torch.log(phi + mu)
    )


def poisson_logpmf(x, mu) -> Tensor:
    x, mu = _t(x), _t(mu)
    return torch.xlogy(x, mu) - mu - torch.lgamma(x + 1)


def lognormal_kl(q_mu, q_sigma2, p_mu, p_sigma2) -> Tensor:
    """KL(q || p) between lognormals, equal to the KL between the underlying normals."""
    q_mu, q_sigma2, p_mu, p_sigma2 = map(_t, (q_mu, q_sigma2, p_mu, p_sigma2))
    if torch.any(q_sigma2 <= 0) or torch.any(p_sigma2 <= 0):
        raise ValueError("variances must be positive")
    return 0.5 * (torch.log(p_sigma2 / q_sigma2) + (q_sigma2 + (q_mu - p_mu) ** 2) / p_sigma2 - 1)


def calibrate_library_prior(counts) -> tuple[float, float]:
    """Mean and sample variance (ddof=1) of the log library sizes."""
    counts = np.asarray(counts)
    totals = counts.sum(axis=1).astype(np.float64)
    if np.any(totals <= 0):
        bad = int(np.flatnonzero(totals <= 0)[0])
        raise ValueError(f"sample {bad} has a zero library size")
    if totals.shape[0] < 2:
        raise ValueError("need at least two samples to estimate a variance")
    logs = np.log(totals)
    var = float(logs.var(ddof=1))
    if var <= 0:
        raise ValueError(
            "all library sizes are identical, so the log-library variance is zero; "
            "add a small jitter to the totals or fix the prior variance explicitly"
        )
    return float(logs.mean()), var
