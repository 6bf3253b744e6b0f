"""Synthetic multi-study benchmarks with planted sparse masks.

Ground truth is kept alongside the data so metrics are always computed
against the realized masks rather than an assumed layout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import MultiStudyDataset, load_bundle, save_bundle
from .model import MaskSet

MASK_ENTRY_VAR = 0.01


@dataclass
class BlockLayout:
    """Row ranges of each column's block: ``shared[k]`` and ``study[m][k]`` are index arrays."""

    shared: list[np.ndarray]
    study: list[list[np.ndarray]]


def block_layout(G: int, K_S: int, K_list: list[int]) -> BlockLayout:
    """Contiguous, equal-height blocks: shared columns first, then each study's.

    Rows left over after ``h = G // K_total`` rows per column are dealt
    round-robin to the shared columns. Raises when a block would be empty.
    """
    K_tot = K_S + sum(K_list)
    if K_tot < 1:
        raise ValueError("need at least one latent column")
    h = G // K_tot
    if h < 1:
        raise ValueError(f"infeasible block geometry: {K_tot} columns do not fit into G={G} features")
    blocks = [np.arange(i * h, (i + 1) * h) for i in range(K_tot)]
    leftover = np.arange(K_tot * h, G)
    if K_S > 0:
        for r, row in enumerate(leftover):
            k = r % K_S
            blocks[k] = np.append(blocks[k], row)
    elif leftover.size:
        blocks[-1] = np.append(blocks[-1], leftover)
    shared, pos, study = blocks[:K_S], K_S, []
    for k in K_list:
        study.append(blocks[pos : pos + k])
        pos += k
    return BlockLayout(shared, study)


def _fill_matrix(G, blocks, mean, offblock_frac, rng):
    K = len(blocks)
    W = np.zeros((G, K))
    in_block = np.zeros((G, K), dtype=bool)
    for k, rows in enumerate(blocks):
        in_block[rows, k] = True
    W[in_block] = rng.normal(mean, np.sqrt(MASK_ENTRY_VAR), size=int(in_block.sum()))
    off = np.flatnonzero(~in_block.ravel())
    n_off = int(round(offblock_frac * off.size))
    if n_off:
        pick = rng.choice(off, size=n_off, replace=False)
        W.ravel()[np.sort(pick)] = rng.normal(mean, np.sqrt(MASK_ENTRY_VAR), size=n_off)
    return W


def gen_block_masks(
    G: int,
    K_S: int,
    K_list: list[int],
    offblock_frac: float = 0.0,
    shared_mean: float = 8.0,
    specific_mean: float = 10.0,
    rng: np.random.Generator | None = None,
) -> MaskSet:
    """Block-structured masks with entries ``N(mean, 0.01)``.

    ``offblock_frac`` of the zero cells of each matrix (chosen without
    replacement) receive draws from the same distribution.
    """
    if not 0 <= offblock_frac < 1:
        raise ValueError("offblock_frac must lie in [0, 1)")
    rng = np.random.default_rng() if rng is None else rng
    layout = block_layout(G, K_S, list(K_list))
    shared = _fill_matrix(G, layout.shared, shared_mean, offblock_frac, rng)
    study = [_fill_matrix(G, b, specific_mean, offblock_frac, rng) for b in layout.study]
    return MaskSet(shared, study)


def gen_anchor_masks(
    G: int,
    K_S: int,
    K_list: list[int],
    rng: np.random.Generator | None = None,
    scale_range: tuple[float, float] = (0.5, 2.0),
    extra_nonzeros: tuple[int, int] = (2, 3),
    max_cosine: float = 0.9,
    max_tries: int = 1000,
) -> MaskSet:
    """Masks with two proportional anchor rows per column.

    Column ``k`` owns rows ``2k`` and ``2k + 1``, which are nonzero in that
    column only, with values ``w`` and ``c * w``. Every other row loads on a
    random set of ``extra_nonzeros`` columns and is redrawn until its
    absolute cosine with every earlier row is at most ``max_cosine``, so no
    pair outside the anchors is close to parallel.
    """
    rng = np.random.default_rng() if rng is None else rng
    K_tot = K_S + sum(K_list)
    if G < 2 * K_tot + 2:
        raise ValueError(f"need G >= {2 * K_tot + 2} for {K_tot} anchor pairs")
    W = np.zeros((G, K_tot))
    for k in range(K_tot):
        w = rng.uniform(*scale_range) * rng.choice([-1.0, 1.0])
        c = rng.uniform(*scale_range) * rng.choice([-1.0, 1.0])
        W[2 * k, k] = w
        W[2 * k + 1, k] = c * w
    lo, hi = extra_nonzeros
    for j in range(2 * K_tot, G):
        for _ in range(max_tries):
            n = int(rng.integers(lo, min(hi, K_tot) + 1))
            cols = rng.choice(K_tot, size=min(n, K_tot), replace=False)
            row = np.zeros(K_tot)
            row[cols] = rng.uniform(*scale_range, size=cols.size) * rng.choice([-1.0, 1.0], size=cols.size)
            prev = W[:j]
            cos = np.abs(prev @ row) / (np.linalg.norm(prev, axis=1) * np.linalg.norm(row))
            if cos.max() <= max_cosine:
                break
        else:
            raise RuntimeError(f"could not draw row {j} with cosine <= {max_cosine} to earlier rows")
        W[j] = row
    offs = np.cumsum([K_S, *K_list])
    return MaskSet(W[:, :K_S], [W[:, a:b] for a, b in zip(offs[:-1], offs[1:])])


@dataclass
class GroundTruth:
    masks: MaskSet
    shared_latents: np.ndarray  # N x K_S
    specific_latents: list[np.ndarray]  # per study, N_m x K_m
    labels: np.ndarray
    library_sizes: np.ndarray | None = None
    bcv: np.ndarray | None = None
    intercepts: np.ndarray | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.labels.shape[0]
        if self.shared_latents.shape != (N, self.masks.k_shared):
            raise ValueError("shared latents do not match labels and masks")
        sizes = np.bincount(self.labels, minlength=self.masks.n_studies)
        for m, z in enumerate(self.specific_latents):
            if z.shape != (sizes[m], self.masks.k_specific[m]):
                raise ValueError(f"study {m} latents have shape {z.shape}")

    def padded_latents(self) -> np.ndarray:
        """N x K_tot latents in the ``[shared | study 1 | ... ]`` layout, zeros elsewhere."""
        N = self.labels.shape[0]
        out = np.zeros((N, self.masks.k_total))
        out[:, : self.masks.k_shared] = self.shared_latents
        for m, off in enumerate(self.masks.offsets()):
            k = self.masks.k_specific[m]
            out[np.flatnonzero(self.labels == m), off : off + k] = self.specific_latents[m]
        return out


@dataclass
class GaussianSimConfig:
    n_studies: int = 3
    n_per_study: int = 1000
    n_features: int = 100
    k_shared: int = 8
    k_specific: int = 2
    shared_mean: float = 8.0
    specific_mean: float = 10.0
    latent_sd: float = 0.5
    noise_var: float = 0.2
    offblock_frac: float = 0.0
    anchors: bool = False

    def __post_init__(self):
        if self.n_studies < 1 or self.n_per_study < 1 or self.n_features < 1:
            raise ValueError("study count, samples per study and features must be positive")
        if self.noise_var < 0 or self.latent_sd <= 0:
            raise ValueError("noise variance must be nonnegative and latent sd positive")


@dataclass
class RNASimConfig:
    n_samples: int = 3200
    n_features: int = 5000
    proportions: tuple[float, ...] = (0.3, 0.3, 0.4)
    k_shared: int = 8
    k_specific: int = 2
    shared_mean: float = 10.0
    specific_mean: float = 12.0
    offblock_frac: float = 0.05
    latent_sd: float = 0.5
    intercept_sd: float = 0.5
    library_mean: float = 12.0
    library_sd: float = 0.5
    bcv_phi: float = 0.1
    bcv_dof: float = 60.0

    def __post_init__(self):
        self.proportions = tuple(float(p) for p in self.proportions)
        if abs(sum(self.proportions) - 1) > 1e-9 or min(self.proportions) <= 0:
            raise ValueError("group proportions must be positive and sum to 1")
        if self.n_samples < len(self.proportions):
            raise ValueError("need at least one sample per group")

    def group_sizes(self) -> list[int]:
        sizes = [int(round(p * self.n_samples)) for p in self.proportions[:-1]]
        sizes.append(self.n_samples - sum(sizes))
        if min(sizes) < 1:
            raise ValueError(f"group sizes {sizes} leave a group empty")
        return sizes


def _nonlinear_rows(G: int) -> np.ndarray:
    # 1-based feature index divisible by 3
    return (np.arange(1, G + 1) % 3) == 0


def _signal(masks: MaskSet, z: np.ndarray, xi: np.ndarray, m: int, fn) -> np.ndarray:
    nl = _nonlinear_rows(masks.n_features)
    lin = z @ masks.shared.T + xi @ masks.study[m].T
    non = fn(z) @ masks.shared.T + fn(xi) @ masks.study[m].T
    return np.where(nl[None, :], non, lin)


def gen_gaussian_multistudy(config: GaussianSimConfig | None = None, rng: np.random.Generator | None = None):
    """Gaussian nonlinear factor data: linear rows, plus squared latents on every third feature."""
    config = config or GaussianSimConfig()
    rng = np.random.default_rng() if rng is None else rng
    M, n, G = config.n_studies, config.n_per_study, config.n_features
    K_list = [config.k_specific] * M
    if config.anchors:
        masks = gen_anchor_masks(G, config.k_shared, K_list, rng)
    else:
        masks = gen_block_masks(
            G, config.k_shared, K_list, config.offblock_frac, config.shared_mean, config.specific_mean, rng
        )
    X, labels, zs, xis = [], [], [], []
    for m in range(M):
        z = rng.normal(0.0, config.latent_sd, size=(n, config.k_shared))
        xi = rng.normal(0.0, config.latent_sd, size=(n, config.k_specific))
        eps = rng.normal(0.0, np.sqrt(config.noise_var), size=(n, G))
        fn = (lambda u: u) if config.anchors else np.square
        X.append(_signal(masks, z, xi, m, fn) + eps)
        labels.append(np.full(n, m))
        zs.append(z)
        xis.append(xi)
    labels = np.concatenate(labels)
    ds = MultiStudyDataset(np.vstack(X), labels, [f"f{j}" for j in range(G)], [f"study{m}" for m in range(M)])
    truth = GroundTruth(
        masks, np.vstack(zs), xis, labels, settings={"generator": "gaussian", **dataclasses.asdict(config)}
    )
    return ds, truth


def base_expression(masks: MaskSet, z, xi, m: int, intercepts) -> np.ndarray:
    """Pre-softplus base expression with the sine link on every third gene."""
    return intercepts[None, :] + _signal(masks, z, xi, m, lambda u: np.sin(0.75 * np.pi * u))


def normalized_expression(mu: np.ndarray) -> np.ndarray:
    """Softplus, then divide each sample by its total so rows sum to 1."""
    sp = np.logaddexp(0.0, mu)
    return sp / sp.sum(axis=1, keepdims=True)


def gen_rnaseq_multistudy(config: RNASimConfig | None = None, rng: np.random.Generator | None = None):
    """Bulk RNA-seq style counts with lognormal libraries and per-cell BCV dispersion."""
    config = config or RNASimConfig()
    rng = np.random.default_rng() if rng is None else rng
    sizes = config.group_sizes()
    M, G = len(sizes), config.n_features
    masks = gen_block_masks(
        G, config.k_shared, [config.k_specific] * M, config.offblock_frac,
        config.shared_mean, config.specific_mean, rng,
    )
    b = rng.normal(0.0, config.intercept_sd, size=G)
    labels = np.repeat(np.arange(M), sizes)
    z = rng.normal(0.0, config.latent_sd, size=(config.n_samples, config.k_shared))
    xis = [rng.normal(0.0, config.latent_sd, size=(n, config.k_specific)) for n in sizes]
    prop = np.empty((config.n_samples, G))
    for m in range(M):
        rows = labels == m
        prop[rows] = normalized_expression(base_expression(masks, z[rows], xis[m], m, b))
    lib = rng.lognormal(config.library_mean, config.library_sd, size=config.n_samples)
    mean = lib[:, None] * prop
    q = rng.chisquare(config.bcv_dof, size=mean.shape)
    bcv = (config.bcv_phi + 1.0 / np.sqrt(mean)) * np.sqrt(config.bcv_dof / q)
    r = 1.0 / bcv**2
    # NB(mean, inverse dispersion r) as a gamma-Poisson mixture
    counts = rng.poisson(rng.gamma(r, mean / r)).astype(np.int64)
    ds = MultiStudyDataset(counts, labels, [f"g{j}" for j in range(G)], [f"group{m}" for m in range(M)])
    truth = GroundTruth(
        masks, z, xis, labels, library_sizes=lib, bcv=bcv, intercepts=b,
        settings={"generator": "rnaseq", **dataclasses.asdict(config), "proportions": list(config.proportions)},
    )
    return ds, truth


def simulate_preset(name: str, seed: int, **overrides):
    """Named generator settings: ``gaussian-s5.1`` and ``rnaseq-s5.2``."""
    rng = np.random.default_rng(seed)
    if name == "gaussian-s5.1":
        return gen_gaussian_multistudy(GaussianSimConfig(**overrides), rng)
    if name == "rnaseq-s5.2":
        return gen_rnaseq_multistudy(RNASimConfig(**overrides), rng)
    raise KeyError(f"unknown preset {name!r}; choose gaussian-s5.1 or rnaseq-s5.2")


def save_ground_truth(truth: GroundTruth, path, seed: int | None = None):
    arrays = {"masks/shared": truth.masks.shared, "labels": truth.labels, "latents/shared": truth.shared_latents}
    for m, (w, z) in enumerate(zip(truth.masks.study, truth.specific_latents)):
        arrays[f"masks/study{m}"] = w
        arrays[f"latents/study{m}"] = z
    for name in ("library_sizes", "bcv", "intercepts"):
        if getattr(truth, name) is not None:
            arrays[name] = getattr(truth, name)
    supports = {
        "shared": [np.flatnonzero(col).tolist() for col in truth.masks.shared.T],
        "study": [[np.flatnonzero(col).tolist() for col in w.T] for w in truth.masks.study],
    }
    manifest = {
        "kind": "ground_truth",
        "dimensions": {
            "n_features": truth.masks.n_features,
            "k_shared": truth.masks.k_shared,
            "k_specific": truth.masks.k_specific,
            "n_samples": int(truth.labels.shape[0]),
        },
        "supports": supports,
        "settings": truth.settings,
        "seed": seed,
    }
    save_bundle(path, arrays, manifest)


def load_ground_truth(path) -> GroundTruth:
    arrays, man = load_bundle(Path(path))
    if man.get("kind") != "ground_truth":
        raise ValueError(f"{path} is not a ground-truth bundle")
    M = len(man["dimensions"]["k_specific"])
    masks = MaskSet(arrays["masks/shared"], [arrays[f"masks/study{m}"] for m in range(M)])
    return GroundTruth(
        masks,
        arrays["latents/shared"],
        [arrays[f"latents/study{m}"] for m in range(M)],
        arrays["labels"].astype(np.int64),
        library_sizes=arrays.get("library_sizes"),
        bcv=arrays.get("bcv"),
        intercepts=arrays.get("intercepts"),
        settings=man.get("settings", {}),
    )
