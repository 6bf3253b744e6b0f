"""Evidence lower bound, EM-style stochastic training and parameter initialization."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .likelihoods import gaussian_loglik, lognormal_kl, nb_logpmf, calibrate_library_prior
from .model import MSSVAE, reparameterize
from .priors import NoisePriorHyper, SSLHyper, invgamma_logpdf, noise_prior_beta_from_data, ssl_objective_terms

PHI_CLAMP = (1e-2, 1e2)

# published hyperparameters per data type
PRESETS = {
    "gaussian": dict(
        likelihood="gaussian", batch_size=512, epochs=500, hidden_dims=(50, 50),
        k_shared=30, k_specific=5, lr=0.01, lr_mask=0.01,
    ),
    "rnaseq": dict(
        likelihood="nb", batch_size=512, epochs=800, hidden_dims=(256, 128),
        k_shared=50, k_specific=10, lr=0.001, lr_mask=0.01,
    ),
    "platelet": dict(
        likelihood="nb", batch_size=512, epochs=800, hidden_dims=(256, 128),
        k_shared=50, k_specific=10, lr=0.001, lr_mask=0.01,
    ),
}


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the published Gaussian settings."""

    likelihood: str = "gaussian"
    batch_size: int = 512
    epochs: int = 500
    hidden_dims: tuple[int, ...] = (50, 50)
    k_shared: int = 30
    k_specific: int | tuple[int, ...] = 5
    lr: float = 0.01
    lr_mask: float = 0.01
    lambda1: float = 0.1
    lambda0_schedule: tuple[float, float, float] = (1.0, 10.0, 15.0)
    anneal_fractions: tuple[float, float] = (0.05, 0.30)
    n_mc: int = 1
    a: float = 1.0
    b: float | None = None  # None means b = G
    alpha: float = 1.5
    seed: int = 0
    dtype: str = "float32"
    init_output_bias: bool = True

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not isinstance(self.k_specific, int):
            self.k_specific = tuple(int(k) for k in self.k_specific)
        self.lambda0_schedule = tuple(float(v) for v in self.lambda0_schedule)
        self.anneal_fractions = tuple(float(v) for v in self.anneal_fractions)
        if self.likelihood not in ("gaussian", "nb"):
            raise ValueError(f"likelihood must be 'gaussian' or 'nb', got {self.likelihood!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.n_mc < 1:
            raise ValueError("n_mc must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not (self.lr > 0 and self.lr_mask > 0):
            raise ValueError("learning rates must be positive")
        if len(self.hidden_dims) != 2:
            raise ValueError("hidden_dims needs two widths")
        if len(self.lambda0_schedule) != 3 or len(self.anneal_fractions) != 2:
            raise ValueError("lambda0 schedule needs three values and two boundaries")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def specific_dims(self, n_studies: int) -> list[int]:
        if isinstance(self.k_specific, int):
            return [self.k_specific] * n_studies
        if len(self.k_specific) != n_studies:
            raise ValueError(f"k_specific lists {len(self.k_specific)} studies; data has {n_studies}")
        return list(self.k_specific)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def lambda0_at(epoch: int, epochs: int, schedule=(1.0, 10.0, 15.0), fractions=(0.05, 0.30)) -> float:
    """Spike rate for a 0-based epoch: the first 5% of epochs, the next 25%, then the rest."""
    b1 = math.floor(fractions[0] * epochs + 1e-9)
    b2 = math.floor(fractions[1] * epochs + 1e-9)
    if epoch < b1:
        return schedule[0]
    if epoch < b2:
        return schedule[1]
    return schedule[2]


class StudyBalancedSampler:
    """Draws sample indices with replacement, each weighted by 1 / (size of its study).

    One epoch draws as many indices as there are samples, like a weighted
    random sampler, then cuts them into consecutive batches.
    """

    def __init__(self, labels: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.labels = np.asarray(labels)
        self.batch_size = batch_size
        self.rng = rng
        sizes = np.bincount(self.labels)
        w = 1.0 / sizes[self.labels]
        self.probs = w / w.sum()

    def epoch(self) -> list[np.ndarray]:
        n = self.labels.shape[0]
        idx = self.rng.choice(n, size=n, replace=True, p=self.probs)
        batches = [idx[i : i + self.batch_size] for i in range(0, n, self.batch_size)]
        return [b for b in batches if b.shape[0] >= 2]


def kl_standard_normal(mean, std) -> Tensor:
    """KL(N(mean, diag std^2) || N(0, I)) summed over the last axis."""
    mean = torch.as_tensor(mean, dtype=torch.float64) if not isinstance(mean, Tensor) else mean
    std = torch.as_tensor(std, dtype=torch.float64) if not isinstance(std, Tensor) else std
    if torch.any(std <= 0):
        raise ValueError("standard deviations must be positive")
    var = std**2
    return -0.5 * (1 + torch.log(var) - mean**2 - var).sum(dim=-1)


@dataclass
class Noise:
    """Standard normal draws for one batch: L draws each."""

    shared: Tensor  # (L, B, K_S)
    study: list[Tensor]  # (L, B_m, K_m) per study
    library: Tensor | None = None  # (L, B, 1)


def draw_noise(model: MSSVAE, labels: Tensor, n_mc: int, generator: torch.Generator | None = None,
               dtype=torch.float32) -> Noise:
    B = labels.shape[0]
    kw = dict(generator=generator, dtype=dtype)
    shared = torch.randn(n_mc, B, model.k_shared, **kw)
    study = [torch.randn(n_mc, int((labels == m).sum()), k, **kw) for m, k in enumerate(model.k_specific)]
    library = torch.randn(n_mc, B, 1, **kw) if model.likelihood == "nb" else None
    return Noise(shared, study, library)


@dataclass
class ElboTerms:
    total: Tensor
    terms: dict[str, Tensor] = field(default_factory=dict)


def _encode_block(encoder, h: Tensor, mode: str):
    # a single-sample block cannot form batch statistics; use running ones
    train = mode == "train" and h.shape[0] >= 2
    was = encoder.training
    encoder.train(train)
    try:
        return encoder(h)
    finally:
        encoder.train(was)


def elbo_batch(
    model: MSSVAE,
    x: Tensor,
    labels: Tensor,
    study_sizes: Sequence[int],
    hyper: SSLHyper,
    n_mc: int = 1,
    generator: torch.Generator | None = None,
    noise: Noise | None = None,
    old: dict | None = None,
    mode: str = "train",
) -> ElboTerms:
    """Mini-batch estimate of the lower bound.

    Per-sample terms of study ``m`` are scaled by ``n_m / |batch_m|`` so the
    estimate is unbiased for the full-data objective. ``old`` carries the
    previous-iterate masks and slab probabilities for the E-step; by default
    the current values (detached) are used.
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    M = model.n_studies
    if torch.any(labels < 0) or torch.any(labels >= M):
        raise ValueError(f"study labels must lie in [0, {M})")
    dtype = x.dtype
    if noise is None:
        noise = draw_noise(model, labels, n_mc, generator, dtype)
    L = noise.shared.shape[0]
    B = x.shape[0]

    h = model.encoder_input(x)
    mu_s, sd_s = _encode_block(model.shared_encoder, h, mode)
    blocks, kl_spec = [], x.new_zeros(B)
    for m, enc in enumerate(model.study_encoders):
        idx = torch.nonzero(labels == m).flatten()
        if idx.numel() == 0:
            blocks.append((idx, None, None))
            continue
        mu_m, sd_m = _encode_block(enc, h[idx], mode)
        blocks.append((idx, mu_m, sd_m))
        kl_spec = kl_spec.index_add(0, idx, kl_standard_normal(mu_m, sd_m))
    kl_shared = kl_standard_normal(mu_s, sd_s)

    z_all = []
    for l in range(L):
        z = reparameterize(mu_s, sd_s, noise.shared[l])
        zeta = [
            (idx, reparameterize(mu, sd, noise.study[m][l]) if mu is not None else None)
            for m, (idx, mu, sd) in enumerate(blocks)
        ]
        z_all.append(model.pad_latents(z, zeta))
    z_tilde = torch.cat(z_all, dim=0)  # (L*B, K_tot)
    c = z_tilde[:, None, :] * model.w_full()[None, :, :]
    f = model.decoder(c, model.link).reshape(L, B, -1)

    terms: dict[str, Tensor] = {}
    kl_lib = x.new_zeros(B)
    if model.likelihood == "gaussian":
        sigma2 = torch.exp(model.log_sigma2)
        ll = gaussian_loglik(x[None], f, sigma2).mean(dim=0)
    else:
        mu_l, sd_l = _encode_block(model.library_encoder, h, mode)
        log_lib = mu_l[None] + sd_l[None] * noise.library  # (L, B, 1)
        mean = torch.exp(log_lib) * f
        phi = torch.exp(model.log_phi)
        ll = nb_logpmf(x[None], mean, phi).sum(dim=-1).mean(dim=0)
        prior_mu, prior_var = model.library_prior[0], model.library_prior[1]
        kl_lib = lognormal_kl(mu_l[:, 0], sd_l[:, 0] ** 2, prior_mu, prior_var)

    scale = x.new_zeros(B)
    counts = torch.bincount(labels, minlength=M)
    for m in range(M):
        if counts[m] > 0:
            scale[labels == m] = float(study_sizes[m]) / float(counts[m])
    terms["loglik"] = (scale * ll).sum()
    terms["kl_shared"] = (scale * kl_shared).sum()
    terms["kl_specific"] = (scale * kl_spec).sum()
    if model.likelihood == "nb":
        terms["kl_library"] = (scale * kl_lib).sum()

    if old is None:
        old = snapshot(model)
    eta_s = torch.sigmoid(model.eta_logit_shared)
    terms["ssl_shared"] = ssl_objective_terms(
        model.w_shared, old["w_shared"], eta_s, old["eta_shared"], hyper
    )
    ssl_spec = x.new_zeros(())
    for m in range(M):
        ssl_spec = ssl_spec + ssl_objective_terms(
            model.w_study[m], old["w_study"][m], torch.sigmoid(model.eta_logit_study[m]),
            old["eta_study"][m], hyper,
        )
    terms["ssl_specific"] = ssl_spec
    if model.likelihood == "gaussian":
        nh = NoisePriorHyper(alpha=float(model.noise_alpha), beta=float(model.noise_beta))
        terms["log_prior_noise"] = invgamma_logpdf(torch.exp(model.log_sigma2), nh).sum()

    total = (
        terms["loglik"] - terms["kl_shared"] - terms["kl_specific"]
        - terms.get("kl_library", 0.0)
        + terms["ssl_shared"] + terms["ssl_specific"] + terms.get("log_prior_noise", 0.0)
    )
    return ElboTerms(total, terms)


@torch.no_grad()
def snapshot(model: MSSVAE) -> dict:
    """E-step: the masks and slab probabilities the expectations are taken at."""
    return {
        "w_shared": model.w_shared.detach().clone(),
        "w_study": [w.detach().clone() for w in model.w_study],
        "eta_shared": torch.sigmoid(model.eta_logit_shared).detach().clone(),
        "eta_study": [torch.sigmoid(e).detach().clone() for e in model.eta_logit_study],
    }


@dataclass
class TrainState:
    model: MSSVAE
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    study_sizes: list[int]
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    epoch: int = 0
    step_elbo: list[float] = field(default_factory=list)
    epoch_elbo: list[float] = field(default_factory=list)


def make_optimizer(model: MSSVAE, config: TrainConfig) -> torch.optim.Adam:
    mask_ids = {id(p) for p in model.mask_parameters()}
    others = [p for p in model.parameters() if id(p) not in mask_ids]
    return torch.optim.Adam(
        [
            {"params": model.mask_parameters(), "lr": config.lr_mask},
            {"params": others, "lr": config.lr},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
    )


def moment_inverse_dispersion(counts: np.ndarray) -> np.ndarray:
    """``mu / (var - mu)`` per gene, clamped; underdispersed genes get the upper clamp."""
    counts = np.asarray(counts, dtype=np.float64)
    mu = counts.mean(axis=0)
    var = counts.var(axis=0, ddof=1)
    excess = var - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(excess > 0, mu / excess, PHI_CLAMP[1])
    return np.clip(phi, *PHI_CLAMP)


def build_model(n_features: int, n_studies: int, config: TrainConfig) -> MSSVAE:
    model = MSSVAE(
        n_features, config.k_shared, config.specific_dims(n_studies), config.hidden_dims, config.likelihood
    )
    if config.likelihood == "gaussian":
        model.noise_alpha.fill_(float(config.alpha))
    return model.to(config.torch_dtype)


def init_params(data, config: TrainConfig, rng: np.random.Generator | None = None) -> TrainState:
    """Fresh training state.

    Masks start at 1, slab probabilities at 0.5; the Gaussian noise variance
    starts at the 5% quantile of the feature variances (one value broadcast
    to every feature) and NB inverse dispersions at their moment estimates.
    Network weights use PyTorch's default fan-based initialization under a
    generator seeded from ``config.seed``.
    """
    X = np.asarray(data.values, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng.integers(2**62)))
        model = build_model(X.shape[1], data.n_studies, config)

    with torch.no_grad():
        if config.likelihood == "gaussian":
            v05 = float(np.quantile(X.var(axis=0, ddof=1), 0.05))
            model.log_sigma2.fill_(math.log(v05))
            model.noise_beta.fill_(noise_prior_beta_from_data(X, config.alpha))
            if config.init_output_bias:
                model.decoder.out_bias.copy_(torch.as_tensor(X.mean(axis=0)))
        else:
            model.log_phi.copy_(torch.as_tensor(np.log(moment_inverse_dispersion(X))))
            mu_l, var_l = calibrate_library_prior(X)
            model.library_prior.copy_(torch.tensor([mu_l, var_l]))
            if config.init_output_bias:
                frac = X.sum(axis=0) / X.sum()
                frac = np.maximum(frac, 1e-12)
                # inverse softplus of the average expression fraction
                model.decoder.out_bias.copy_(torch.as_tensor(frac + np.log(-np.expm1(-frac))))
                model.library_encoder.mean_head.bias.fill_(mu_l)
                model.library_encoder.log_std_head.bias.fill_(0.5 * math.log(var_l))

    optimizer = make_optimizer(model, config)
    return TrainState(
        model=model, optimizer=optimizer, config=config, study_sizes=list(map(int, data.study_sizes)),
        np_rng=rng, torch_gen=torch_gen,
    )


class NonFiniteLoss(FloatingPointError):
    pass


def em_train(
    data,
    config: TrainConfig,
    state: TrainState | None = None,
    epochs: int | None = None,
    verbose: bool = False,
    log_path=None,
    callback: Callable[[TrainState], None] | None = None,
) -> tuple[TrainState, list[float]]:
    """Alternate E-steps (slab expectations at the current masks) with Adam M-steps.

    Runs until ``config.epochs`` epochs are complete, or for ``epochs`` more
    epochs when given. Passing a previous ``state`` resumes training.
    Returns the state and the per-epoch mean ELBO history.
    """
    if state is None:
        state = init_params(data, config)
    model, opt = state.model, state.optimizer
    dtype = config.torch_dtype
    X = torch.as_tensor(np.asarray(data.values), dtype=dtype)
    labels_np = np.asarray(data.labels)
    labels = torch.as_tensor(labels_np, dtype=torch.long)
    G = X.shape[1]
    b = float(G) if config.b is None else float(config.b)
    sampler = StudyBalancedSampler(labels_np, config.batch_size, state.np_rng)
    stop = config.epochs if epochs is None else state.epoch + epochs

    log_file = open(log_path, "a") if log_path is not None else None
    try:
        if log_file is not None and state.epoch == 0:
            log_file.write("epoch\telbo\tlambda0\twall_seconds\n")
        model.train()
        while state.epoch < stop:
            t0 = time.perf_counter()
            lam0 = lambda0_at(state.epoch, config.epochs, config.lambda0_schedule, config.anneal_fractions)
            hyper = SSLHyper(lambda1=config.lambda1, lambda0=lam0, a=config.a, b=b)
            values = []
            for idx in sampler.epoch():
                ix = torch.as_tensor(idx)
                old = snapshot(model)
                out = elbo_batch(
                    model, X[ix], labels[ix], state.study_sizes, hyper, config.n_mc,
                    generator=state.torch_gen, old=old,
                )
                if not torch.isfinite(out.total):
                    bad = [k for k, v in out.terms.items() if not torch.isfinite(v)]
                    raise NonFiniteLoss(
                        f"non-finite ELBO at epoch {state.epoch}; offending terms: {', '.join(bad) or 'total'}"
                    )
                opt.zero_grad(set_to_none=True)
                (-out.total).backward()
                opt.step()
                v = float(out.total.detach())
                values.append(v)
                state.step_elbo.append(v)
            mean_elbo = float(np.mean(values)) if values else float("nan")
            state.epoch_elbo.append(mean_elbo)
            wall = time.perf_counter() - t0
            if verbose:
                print(f"epoch {state.epoch}\telbo {mean_elbo:.6g}\tlambda0 {lam0:g}\t{wall:.3f}s", flush=True)
            if log_file is not None:
                log_file.write(f"{state.epoch}\t{mean_elbo:.17g}\t{lam0:g}\t{wall:.3f}\n")
            state.epoch += 1
            if callback is not None:
                callback(state)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return state, state.epoch_elbo
