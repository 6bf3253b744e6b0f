"""Masked decoder, amortized encoders and latent assembly.

A sample from study ``m`` is decoded from the padded latent vector
``[z | 0 | ... | zeta_m | ... | 0]``; the masks multiply it elementwise,
one row per feature, before the shared decoder network sees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LOG_STD_CLAMP = 10.0


@dataclass
class MaskSet:
    """Shared mask ``shared`` (G x K_S) and one study mask per study (G x K_m)."""

    shared: np.ndarray
    study: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.shared = np.asarray(self.shared, dtype=np.float64)
        self.study = [np.asarray(w, dtype=np.float64) for w in self.study]
        if self.shared.ndim != 2:
            raise ValueError("shared mask must be a 2-d matrix")
        for m, w in enumerate(self.study):
            if w.ndim != 2 or w.shape[0] != self.shared.shape[0]:
                raise ValueError(
                    f"study mask {m} has shape {w.shape}; expected ({self.shared.shape[0]}, K_m)"
                )
        for w in [self.shared, *self.study]:
            if not np.all(np.isfinite(w)):
                raise ValueError("mask entries must be finite")

    @property
    def n_features(self) -> int:
        return self.shared.shape[0]

    @property
    def k_shared(self) -> int:
        return self.shared.shape[1]

    @property
    def k_specific(self) -> list[int]:
        return [w.shape[1] for w in self.study]

    @property
    def n_studies(self) -> int:
        return len(self.study)

    @property
    def k_total(self) -> int:
        return self.k_shared + sum(self.k_specific)

    def offsets(self) -> list[int]:
        """Column offset of each study block inside the padded layout."""
        return block_offsets(self.k_shared, self.k_specific)

    def full(self) -> np.ndarray:
        """All masks side by side, G x K_tot."""
        return np.concatenate([self.shared, *self.study], axis=1)

    def padded(self, study_index: int) -> np.ndarray:
        """The per-feature padded masks for one study (rows are w~_j)."""
        if not 0 <= study_index < self.n_studies:
            raise IndexError(f"study index {study_index} out of range [0, {self.n_studies})")
        out = np.zeros((self.n_features, self.k_total))
        out[:, : self.k_shared] = self.shared
        off = self.offsets()[study_index]
        out[:, off : off + self.k_specific[study_index]] = self.study[study_index]
        return out


@dataclass
class LatentSample:
    shared: np.ndarray
    specific: np.ndarray
    study_index: int

    def __post_init__(self):
        self.shared = np.atleast_1d(np.asarray(self.shared, dtype=np.float64))
        self.specific = np.atleast_1d(np.asarray(self.specific, dtype=np.float64))


def block_offsets(k_shared: int, k_specific: Sequence[int]) -> list[int]:
    offs, pos = [], k_shared
    for k in k_specific:
        offs.append(pos)
        pos += k
    return offs


def padded_latent(latent: LatentSample, k_shared: int, k_specific: Sequence[int]) -> np.ndarray:
    m = latent.study_index
    if not 0 <= m < len(k_specific):
        raise IndexError(f"study index {m} out of range [0, {len(k_specific)})")
    if latent.shared.shape[0] != k_shared or latent.specific.shape[0] != k_specific[m]:
        raise ValueError(
            f"latent lengths ({latent.shared.shape[0]}, {latent.specific.shape[0]}) do not match "
            f"model dimensions ({k_shared}, {k_specific[m]})"
        )
    out = np.zeros(k_shared + sum(k_specific))
    out[:k_shared] = latent.shared
    off = block_offsets(k_shared, k_specific)[m]
    out[off : off + k_specific[m]] = latent.specific
    return out


def assemble_masked_input(masks: MaskSet, latent: LatentSample, feature_index: int) -> np.ndarray:
    """Masked decoder input ``w~_j * z~_i`` for one feature and one sample.

    The layout is ``[shared | study 1 | ... | study M]``; only the block of
    the sample's own study is nonzero among the study blocks.
    """
    if not 0 <= feature_index < masks.n_features:
        raise IndexError(f"feature index {feature_index} out of range [0, {masks.n_features})")
    if latent.study_index >= masks.n_studies or latent.study_index < 0:
        raise IndexError(f"study index {latent.study_index} out of range [0, {masks.n_studies})")
    z_tilde = padded_latent(latent, masks.k_shared, masks.k_specific)
    return masks.padded(latent.study_index)[feature_index] * z_tilde


def masked_inputs(w_full: Tensor, z_tilde: Tensor) -> Tensor:
    """Batched masked inputs, shape (B, G, K_tot).

    ``w_full`` holds every mask side by side (G x K_tot). Because ``z_tilde``
    is already zero outside the sample's own blocks, multiplying by the full
    mask equals multiplying by the study's padded mask.
    """
    return z_tilde[:, None, :] * w_full[None, :, :]


def softplus(u: Tensor) -> Tensor:
    # overflow-safe form of log(1 + exp(u)); floored so very negative inputs stay positive
    out = torch.clamp(u, min=0) + torch.log1p(torch.exp(-torch.abs(u)))
    return torch.clamp(out, min=torch.finfo(out.dtype).tiny)


class Decoder(nn.Module):
    """Two-layer ReLU network with a skip connection from the masked latents.

    Every feature shares the hidden layers; only the output row
    ``out_weight[j]`` and ``out_bias[j]`` are feature specific. The skip
    connection adds the masked input to the second hidden layer, so that
    layer must have exactly ``k_total`` units.
    """

    def __init__(self, n_features: int, k_total: int, hidden: int, hidden2: int | None = None):
        super().__init__()
        if hidden2 is not None and hidden2 != k_total:
            raise ValueError(
                f"second decoder layer width {hidden2} must equal the latent width {k_total} "
                "for the skip connection"
            )
        self.n_features = n_features
        self.k_total = k_total
        self.layer1 = nn.Linear(k_total, hidden, bias=False)
        self.layer2 = nn.Linear(hidden, k_total)
        self.out_weight = nn.Parameter(torch.empty(n_features, k_total))
        self.out_bias = nn.Parameter(torch.empty(n_features))
        bound = 1.0 / np.sqrt(k_total)
        nn.init.uniform_(self.out_weight, -bound, bound)
        nn.init.uniform_(self.out_bias, -bound, bound)

    def pre_activation(self, c: Tensor) -> Tensor:
        """``c`` has shape (B, G, K_tot); returns (B, G)."""
        h1 = torch.relu(self.layer1(c))
        h2 = torch.relu(self.layer2(h1))
        return torch.einsum("bgk,gk->bg", h2 + c, self.out_weight) + self.out_bias

    def forward(self, c: Tensor, link: str = "identity") -> Tensor:
        return apply_link(self.pre_activation(c), link)


def apply_link(u: Tensor, link: str) -> Tensor:
    if link == "identity":
        return u
    if link == "softplus":
        return softplus(u)
    raise ValueError(f"unknown link {link!r}")


def decode(decoder: Decoder, masked_input, feature_index: int, link: str = "identity") -> float:
    """Mean of one feature from its masked input vector (unbatched reference path)."""
    p = next(decoder.parameters())
    c = torch.as_tensor(np.asarray(masked_input), dtype=p.dtype)
    if c.shape != (decoder.k_total,):
        raise ValueError(f"masked input has shape {tuple(c.shape)}; expected ({decoder.k_total},)")
    with torch.no_grad():
        h1 = torch.relu(decoder.layer1.weight @ c)
        h2 = torch.relu(decoder.layer2.weight @ h1 + decoder.layer2.bias)
        u = decoder.out_weight[feature_index] @ (h2 + c) + decoder.out_bias[feature_index]
        out = apply_link(u, link)
    if not torch.isfinite(out):
        raise FloatingPointError("decoder produced a non-finite value")
    return float(out)


class Encoder(nn.Module):
    """Gaussian posterior network: (affine -> batch norm -> ReLU) x 2, then mean and log-std heads."""

    def __init__(self, n_inputs: int, hidden_dims: Sequence[int], n_latent: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = n_inputs
        for width in hidden_dims:
            layers += [
                nn.Linear(prev, width),
                nn.BatchNorm1d(width, eps=BN_EPS, momentum=BN_MOMENTUM),
                nn.ReLU(),
            ]
            prev = width
        self.body = nn.Sequential(*layers)
        self.mean_head = nn.Linear(prev, n_latent)
        self.log_std_head = nn.Linear(prev, n_latent)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.training and x.shape[0] < 2:
            raise ValueError("batch statistics need at least 2 samples in train mode")
        h = self.body(x)
        log_std = torch.clamp(self.log_std_head(h), -LOG_STD_CLAMP, LOG_STD_CLAMP)
        return self.mean_head(h), torch.exp(log_std)


def encode(encoder: Encoder, x: Tensor, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Run ``encoder`` on a batch in ``train`` (batch statistics) or ``eval`` (running statistics) mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not torch.all(torch.isfinite(x)):
        raise ValueError("encoder input contains non-finite values")
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        squeeze = x.ndim == 1
        out = encoder(x[None, :] if squeeze else x)
    finally:
        encoder.train(was_training)
    if squeeze:
        return out[0][0], out[1][0]
    return out


def reparameterize(mean: Tensor, std: Tensor, noise: Tensor) -> Tensor:
    if mean.shape != std.shape or mean.shape != noise.shape:
        raise ValueError("mean, std and noise must have the same shape")
    return mean + std * noise


class MSSVAE(nn.Module):
    """All trainable quantities of the multi-study sparse VAE.

    Masks are stored unconstrained; slab probabilities through their logits;
    Gaussian noise variances and negative-binomial inverse dispersions
    through their logs.
    """

    def __init__(
        self,
        n_features: int,
        k_shared: int,
        k_specific: Sequence[int],
        hidden_dims: Sequence[int] = (50, 50),
        likelihood: str = "gaussian",
    ):
        super().__init__()
        if likelihood not in ("gaussian", "nb"):
            raise ValueError(f"unknown likelihood {likelihood!r}")
        self.n_features = n_features
        self.k_shared = k_shared
        self.k_specific = list(k_specific)
        self.hidden_dims = list(hidden_dims)
        self.likelihood = likelihood
        self.k_total = k_shared + sum(self.k_specific)
        self.offsets = block_offsets(k_shared, self.k_specific)

        self.w_shared = nn.Parameter(torch.ones(n_features, k_shared))
        self.w_study = nn.ParameterList(
            [nn.Parameter(torch.ones(n_features, k)) for k in self.k_specific]
        )
        self.eta_logit_shared = nn.Parameter(torch.zeros(k_shared))
        self.eta_logit_study = nn.ParameterList(
            [nn.Parameter(torch.zeros(k)) for k in self.k_specific]
        )
        self.decoder = Decoder(n_features, self.k_total, self.hidden_dims[0])
        self.shared_encoder = Encoder(n_features, self.hidden_dims, k_shared)
        self.study_encoders = nn.ModuleList(
            [Encoder(n_features, self.hidden_dims, k) for k in self.k_specific]
        )
        if likelihood == "gaussian":
            self.log_sigma2 = nn.Parameter(torch.zeros(n_features))
            self.register_buffer("noise_alpha", torch.tensor(1.5))
            self.register_buffer("noise_beta", torch.tensor(1.0))
        else:
            self.log_phi = nn.Parameter(torch.zeros(n_features))
            self.library_encoder = Encoder(n_features, self.hidden_dims, 1)
            # lognormal prior on library size: mean and variance of log totals
            self.register_buffer("library_prior", torch.tensor([0.0, 1.0]))

    @property
    def n_studies(self) -> int:
        return len(self.k_specific)

    @property
    def link(self) -> str:
        return "identity" if self.likelihood == "gaussian" else "softplus"

    def mask_parameters(self) -> list[nn.Parameter]:
        return [self.w_shared, *self.w_study]

    def w_full(self) -> Tensor:
        return torch.cat([self.w_shared, *self.w_study], dim=1)

    def masks(self) -> MaskSet:
        return MaskSet(
            self.w_shared.detach().cpu().double().numpy(),
            [w.detach().cpu().double().numpy() for w in self.w_study],
        )

    def encoder_input(self, x: Tensor) -> Tensor:
        return torch.log1p(x) if self.likelihood == "nb" else x

    def pad_latents(self, z: Tensor, zeta_blocks: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
        """Assemble (B, K_tot) padded latents from shared ``z`` and (row index, zeta) blocks."""
        spec = z.new_zeros(z.shape[0], self.k_total - self.k_shared)
        for m, (idx, zeta) in enumerate(zeta_blocks):
            if idx.numel() == 0:
                continue
            off = self.offsets[m] - self.k_shared
            spec[idx, off : off + self.k_specific[m]] = zeta
        return torch.cat([z, spec], dim=1)

    @torch.no_grad()
    def posterior_means(self, x: Tensor, labels: Tensor) -> Tensor:
        """Eval-mode posterior means laid out like the padded latents (N x K_tot)."""
        was = self.training
        self.eval()
        try:
            h = self.encoder_input(x)
            mu_s, _ = self.shared_encoder(h)
            blocks = []
            for m, enc in enumerate(self.study_encoders):
                idx = torch.nonzero(labels == m).flatten()
                blocks.append((idx, enc(h[idx])[0] if idx.numel() else None))
            return self.pad_latents(mu_s, blocks)
        finally:
            self.train(was)
