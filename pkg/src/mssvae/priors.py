"""Spike-and-slab lasso expectations, Beta-Bernoulli terms and the inverse-gamma noise prior."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats
from torch import Tensor


@dataclass(frozen=True)
class SSLHyper:
    """Slab rate ``lambda1``, spike rate ``lambda0`` and Beta(a, b) hyperparameters."""

    lambda1: float = 0.1
    lambda0: float = 15.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError("lambda1 must be positive")
        if self.lambda0 < self.lambda1:
            raise ValueError("lambda0 must be at least lambda1")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta hyperparameters must be positive")


@dataclass(frozen=True)
class NoisePriorHyper:
    alpha: float = 1.5
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("inverse-gamma hyperparameters must be positive")


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_eta(eta: Tensor):
    if torch.any(torch.isnan(eta)) or torch.any(eta < 0) or torch.any(eta > 1):
        raise ValueError("slab probabilities must lie in [0, 1]")


def ssl_gamma_expectation(w, eta, hyper: SSLHyper) -> Tensor:
    """Posterior slab probability ``E[gamma | w, eta]``.

    Evaluated as a logistic function of the log-odds, so it stays finite for
    large ``|w|`` and large ``lambda0``.
    """
    w, eta = _t(w), _t(eta)
    _check_eta(eta)
    aw = torch.abs(w)
    log_slab = torch.log(eta) + np.log(hyper.lambda1) - hyper.lambda1 * aw
    log_spike = torch.log1p(-eta) + np.log(hyper.lambda0) - hyper.lambda0 * aw
    return torch.sigmoid(log_slab - log_spike)


def ssl_lambda_star(w, eta, hyper: SSLHyper) -> Tensor:
    p = ssl_gamma_expectation(w, eta, hyper)
    return hyper.lambda1 * p + hyper.lambda0 * (1 - p)


def ssl_objective_terms(W, W_old, eta, eta_old, hyper: SSLHyper) -> Tensor:
    """Expected log prior of one mask matrix under the E-step slab probabilities.

    ``W_old`` and ``eta_old`` fix the expectations; gradients flow only
    through ``W`` (the adaptive lasso penalty) and ``eta`` (Beta-Bernoulli).

    Parameters
    ----------
    W, W_old : (G, K) masks at the current and previous iterate.
    eta, eta_old : (K,) slab probabilities at the current and previous iterate.
    """
    W, W_old, eta, eta_old = _t(W), _t(W_old), _t(eta), _t(eta_old)
    if W.shape != W_old.shape:
        raise ValueError(f"W has shape {tuple(W.shape)} but W_old has {tuple(W_old.shape)}")
    if W.ndim != 2 or eta.shape != (W.shape[1],) or eta_old.shape != eta.shape:
        raise ValueError("eta vectors must have one entry per mask column")
    G = W.shape[0]
    with torch.no_grad():
        p = ssl_gamma_expectation(W_old, eta_old[None, :], hyper)
        lam = hyper.lambda1 * p + hyper.lambda0 * (1 - p)
        p_sum = p.sum(dim=0)
    penalty = -(lam * torch.abs(W)).sum()
    beta_bern = (p_sum + hyper.a - 1) * torch.log(eta) + (G - p_sum + hyper.b - 1) * torch.log1p(-eta)
    return penalty + beta_bern.sum()


def invgamma_logpdf(sigma2, hyper: NoisePriorHyper) -> Tensor:
    sigma2 = _t(sigma2)
    if torch.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    a, b = hyper.alpha, hyper.beta
    return a * math.log(b) - math.lgamma(a) - (a + 1) * torch.log(sigma2) - b / sigma2


def noise_prior_beta_from_data(X, alpha: float = 1.5) -> float:
    """Scale ``beta`` placing the inverse-gamma 90% quantile at the 5% quantile of feature variances.

    If ``Y ~ Gamma(alpha, 1)`` then ``beta / Y ~ IG(alpha, beta)``, so the IG
    90% quantile is ``beta / Q_Gamma(0.10)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a 2-d matrix with at least 2 samples")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    v05 = float(np.quantile(X.var(axis=0, ddof=1), 0.05))
    if v05 <= 0:
        raise ValueError("the 5% quantile of feature variances is zero (constant features)")
    return v05 * float(stats.gamma.ppf(0.10, alpha))
