"""Shared builders for the test suite."""

import json

import numpy as np
import torch

from mssvae.cli import main
from mssvae.io import MultiStudyDataset
from mssvae.objective import Noise, TrainConfig, draw_noise, elbo_batch, init_params, snapshot
from mssvae.priors import SSLHyper


def tiny_state(likelihood="gaussian", seed=0):
    gen = np.random.default_rng(seed)
    G = 6
    labels = np.array([0, 0, 0, 0, 1, 1, 1])
    if likelihood == "gaussian":
        X = gen.normal(size=(labels.size, G))
    else:
        X = gen.poisson(gen.uniform(2, 20, size=G), size=(labels.size, G))
    data = MultiStudyDataset(X, labels)
    cfg = TrainConfig(likelihood=likelihood, k_shared=2, k_specific=1, hidden_dims=(4, 4), dtype="float64",
                      seed=seed, batch_size=3)
    state = init_params(data, cfg)
    with torch.no_grad():
        # move masks away from the |w| kink and eta away from 1/2 so every term is exercised
        for w in state.model.mask_parameters():
            w.copy_(torch.as_tensor(gen.uniform(0.3, 1.5, size=w.shape) * gen.choice([-1, 1], size=w.shape)))
        state.model.eta_logit_shared.copy_(torch.as_tensor(gen.normal(size=2)))
    return state, data


def frozen_objective(state, data, idx=(0, 1, 2, 4, 5, 6), seed=1):
    """Closure evaluating the batch objective with fixed noise, E-step values and BN buffers."""
    model = state.model
    x = torch.as_tensor(np.asarray(data.values)[list(idx)], dtype=torch.float64)
    labels = torch.as_tensor(data.labels[list(idx)])
    gen = torch.Generator().manual_seed(seed)
    noise = draw_noise(model, labels, 1, gen, torch.float64)
    old = snapshot(model)
    buffers = {k: v.clone() for k, v in model.named_buffers()}
    hyper = SSLHyper(0.1, 10.0, 1.0, float(data.n_features))
    model.train()

    def f():
        with torch.no_grad():
            for k, v in model.named_buffers():
                v.copy_(buffers[k])
        return elbo_batch(model, x, labels, data.study_sizes, hyper, noise=noise, old=old).total

    return f


def finite_difference_check(state, data, eps=1e-6):
    """Relative error ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, 1e-4 |f|) per named parameter."""
    f = frozen_objective(state, data)
    model = state.model
    model.zero_grad()
    value = f()
    value.backward()
    floor = 1e-4 * max(1.0, abs(value.item()))
    errors = {}
    for name, p in model.named_parameters():
        g_ad = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        g_fd = torch.zeros_like(g_ad)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            g_fd[i] = (up - down) / (2 * eps)
        # central differences carry round-off near 1e-16 * |f| / eps; the floor keeps biases feeding a
        # batch norm (true gradient zero) from reporting that noise as relative error
        scale = max(g_ad.norm().item(), g_fd.norm().item(), floor)
        errors[name] = (g_ad - g_fd).norm().item() / scale
    return errors


def small_gaussian(seed=0, n=60):
    from mssvae.datagen import GaussianSimConfig, gen_gaussian_multistudy

    return gen_gaussian_multistudy(
        GaussianSimConfig(n_per_study=n, n_features=12, k_shared=2, k_specific=1), np.random.default_rng(seed)
    )


SMALL_SIM = ["--param", "n_per_study=40", "--param", "n_features=12", "--param", "k_shared=2",
             "--param", "k_specific=1"]


def write_config(path, **kw):
    base = dict(k_shared=3, k_specific=2, hidden_dims=[8, 8], epochs=3, batch_size=32)
    base.update(kw)
    path.write_text("\n".join(f"{k}: {json.dumps(v)}" for k, v in base.items()) + "\n")
    return path


def pipeline(root, seed=7):
    sim, run = root / "sim", root / "run"
    assert main(["simulate", "--preset", "gaussian-s5.1", "--seed", str(seed), "--out", str(sim), *SMALL_SIM]) == 0
    cfg = write_config(root / "cfg.yaml")
    assert main(["train", "--data", str(sim / "data.csv"), "--config", str(cfg), "--seed", str(seed),
                 "--out", str(run), "--quiet"]) == 0
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint"), "--truth", str(sim / "truth"),
                 "--data", str(sim / "data.csv"), "--out", str(root / "metrics.json")]) == 0
    return sim, run


def output_files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def strip_times(log: bytes) -> list:
    return [line.rsplit(b"\t", 1)[0] for line in log.splitlines()]
