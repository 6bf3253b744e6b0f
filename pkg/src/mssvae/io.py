"""Datasets, binary array bundles and training checkpoints.

Bundles (datasets, ground truth, checkpoints) share one layout: a directory
holding ``manifest.json`` plus one raw little-endian, row-major ``.bin`` file
per array. Every write goes to a temporary name first and is renamed into
place.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class ValidationError(ValueError):
    """Malformed input: exits the CLI with status 2."""


@dataclass
class MultiStudyDataset:
    """An N x G matrix over a common feature set with one study label per row."""

    values: np.ndarray
    labels: np.ndarray
    feature_names: list[str] | None = None
    study_names: list[str] | None = None
    n_studies_declared: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValidationError("values must be a 2-d matrix")
        if self.labels.shape != (self.values.shape[0],):
            raise ValidationError("one study label per sample is required")
        if np.issubdtype(self.values.dtype, np.floating) and not np.all(np.isfinite(self.values)):
            r, c = np.argwhere(~np.isfinite(self.values))[0]
            raise ValidationError(f"non-finite value at row {r}, column {c}")
        M = self.n_studies_declared or (
            len(self.study_names) if self.study_names else int(self.labels.max()) + 1 if self.labels.size else 0
        )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= M):
            raise ValidationError(f"unknown study label outside [0, {M})")
        sizes = np.bincount(self.labels, minlength=M)
        if np.any(sizes == 0):
            raise ValidationError(f"study {int(np.flatnonzero(sizes == 0)[0])} has no samples")
        self.n_studies_declared = M
        if self.feature_names is not None and len(self.feature_names) != self.values.shape[1]:
            raise ValidationError("feature_names length does not match the number of columns")

    @property
    def n_studies(self) -> int:
        return int(self.n_studies_declared)

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def study_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_studies)

    def study(self, m: int) -> np.ndarray:
        return self.values[self.labels == m]

    def check_counts(self):
        v = self.values
        if np.any(v < 0) or not np.all(np.equal(np.mod(v, 1), 0)):
            bad = np.argwhere((v < 0) | (np.mod(v, 1) != 0))[0]
            raise ValidationError(f"counts must be nonnegative integers (row {bad[0]}, column {bad[1]})")


def _atomic_dir(path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))


def _replace_dir(tmp: Path, path: Path):
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        if old.exists():
            _rmtree(old)
        os.rename(path, old)
        os.rename(tmp, path)
        _rmtree(old)
    else:
        os.rename(tmp, path)


def _rmtree(p: Path):
    for child in p.iterdir():
        if child.is_dir():
            _rmtree(child)
        else:
            child.unlink()
    p.rmdir()


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _array_file(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_bundle(path, arrays: dict[str, np.ndarray], manifest: dict):
    """Write ``arrays`` as raw 64-bit little-endian blobs plus a JSON manifest."""
    path = Path(path)
    tmp = _atomic_dir(path)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = "i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind])
        fname = _array_file(name)
        data.tofile(tmp / fname)
        entries[name] = {"file": fname, "dtype": kind, "shape": list(arr.shape)}
    manifest = {"version": FORMAT_VERSION, **manifest, "arrays": entries}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _replace_dir(tmp, path)


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupt manifest {mpath}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise ValidationError(
            f"bundle version {manifest.get('version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    arrays = {}
    for name, e in manifest.get("arrays", {}).items():
        fpath = path / e["file"]
        shape = tuple(e["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if not fpath.exists():
            raise ValidationError(f"array file for {name!r} is missing")
        if fpath.stat().st_size != expected:
            raise ValidationError(
                f"array {name!r} has {fpath.stat().st_size} bytes; shape {list(shape)} needs {expected}"
            )
        arrays[name] = np.fromfile(fpath, dtype=_DTYPES[e["dtype"]]).reshape(shape)
    return arrays, manifest


# -- datasets -----------------------------------------------------------------

def save_dataset_csv(ds: MultiStudyDataset, path):
    names = ds.feature_names or [f"f{j}" for j in range(ds.n_features)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    integer = np.issubdtype(ds.values.dtype, np.integer)
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["study", *names])
        for lab, row in zip(ds.labels, ds.values):
            # repr round-trips float64 exactly
            w.writerow([int(lab), *(str(int(v)) if integer else repr(float(v)) for v in row)])
    os.replace(tmp, path)


def load_dataset_csv(path, counts: bool = False, n_studies: int | None = None) -> MultiStudyDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    G = len(header) - 1
    labels, values = [], []
    for r, row in enumerate(body):
        if len(row) != G + 1:
            raise ValidationError(f"row {r} has {len(row) - 1} values; header declares {G}")
        try:
            labels.append(int(row[0]))
        except ValueError:
            raise ValidationError(f"row {r}: study label {row[0]!r} is not an integer") from None
        vals = []
        for c, tok in enumerate(row[1:]):
            try:
                v = float(tok)
            except ValueError:
                raise ValidationError(f"row {r}, column {c}: cannot parse {tok!r}") from None
            if not np.isfinite(v):
                raise ValidationError(f"row {r}, column {c}: value {tok!r} is not finite")
            vals.append(v)
        values.append(vals)
    arr = np.array(values, dtype=np.float64).reshape(len(body), G)
    if counts:
        if np.any(arr < 0):
            r, c = np.argwhere(arr < 0)[0]
            raise ValidationError(f"negative count at row {r}, column {c}")
        if np.any(arr != np.round(arr)):
            r, c = np.argwhere(arr != np.round(arr))[0]
            raise ValidationError(f"non-integer count at row {r}, column {c}")
        arr = arr.astype(np.int64)
    return MultiStudyDataset(arr, np.array(labels), feature_names=header[1:], n_studies_declared=n_studies)


def save_dataset(ds: MultiStudyDataset, path):
    """CSV when ``path`` ends in .csv, otherwise a binary bundle directory."""
    if str(path).endswith(".csv"):
        return save_dataset_csv(ds, path)
    save_bundle(
        path,
        {"values": ds.values, "labels": ds.labels},
        {
            "kind": "dataset",
            "integer": bool(np.issubdtype(ds.values.dtype, np.integer)),
            "feature_names": ds.feature_names,
            "study_names": ds.study_names,
            "n_studies": ds.n_studies,
        },
    )


def load_dataset(path, counts: bool = False) -> MultiStudyDataset:
    """Load a CSV file or bundle directory; ``counts`` enforces nonnegative integers."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_file():
        return load_dataset_csv(path, counts=counts)
    arrays, man = load_bundle(path)
    if man.get("kind") != "dataset":
        raise ValidationError(f"{path} is not a dataset bundle")
    values = arrays["values"]
    if man.get("integer"):
        values = values.astype(np.int64)
    ds = MultiStudyDataset(
        values, arrays["labels"], man.get("feature_names"), man.get("study_names"), man.get("n_studies")
    )
    if counts:
        ds.check_counts()
    return ds


# -- checkpoints ----------------------------------------------------------------

def _rng_manifest(state) -> dict:
    np_state = state.np_rng.bit_generator.state
    torch_state = state.torch_gen.get_state().numpy().tobytes()
    blob = json.dumps(np_state, sort_keys=True).encode() + torch_state
    return {
        "numpy": np_state,
        "torch": base64.b64encode(torch_state).decode(),
        "digest": hashlib.sha256(blob).hexdigest(),
    }


def save_checkpoint(state, path, extra: dict | None = None):
    """Persist every parameter, buffer and optimizer moment as float64/int64 arrays."""
    from .objective import TrainConfig  # noqa: F401  (documents the manifest schema)

    model, opt = state.model, state.optimizer
    arrays: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        arrays[f"model/{name}"] = t.detach().cpu().numpy()
    names = {id(p): n for n, p in model.named_parameters()}
    opt_meta = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            arrays[f"optim/{n}/exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            arrays[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
            opt_meta[n] = float(st["step"])
    arrays["history/step_elbo"] = np.asarray(state.step_elbo, dtype=np.float64)
    arrays["history/epoch_elbo"] = np.asarray(state.epoch_elbo, dtype=np.float64)
    manifest = {
        "kind": "checkpoint",
        "config": state.config.to_dict(),
        "dimensions": {
            "n_features": model.n_features,
            "k_shared": model.k_shared,
            "k_specific": model.k_specific,
            "n_studies": model.n_studies,
        },
        "study_sizes": list(state.study_sizes),
        "epoch": state.epoch,
        "optimizer_steps": opt_meta,
        "rng": _rng_manifest(state),
        **(extra or {}),
    }
    save_bundle(path, arrays, manifest)


def load_checkpoint(path):
    from .objective import TrainConfig, TrainState, build_model, make_optimizer

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, man = load_bundle(path)
    if man.get("kind") != "checkpoint":
        raise ValidationError(f"{path} is not a checkpoint")
    config = TrainConfig(**man["config"])
    dims = man["dimensions"]
    if config.k_shared != dims["k_shared"] or config.specific_dims(dims["n_studies"]) != dims["k_specific"]:
        raise ValidationError("manifest dimensions disagree with the stored config")
    model = build_model(dims["n_features"], dims["n_studies"], config)
    sd = model.state_dict()
    new_sd = {}
    for name, ref in sd.items():
        key = f"model/{name}"
        if key not in arrays:
            raise ValidationError(f"checkpoint is missing parameter {name!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValidationError(f"parameter {name!r} has shape {arr.shape}; expected {tuple(ref.shape)}")
        new_sd[name] = torch.as_tensor(arr).to(ref.dtype)
    model.load_state_dict(new_sd)
    opt = make_optimizer(model, config)
    params = dict(model.named_parameters())
    for n, step in man.get("optimizer_steps", {}).items():
        p = params[n]
        opt.state[p] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": torch.as_tensor(arrays[f"optim/{n}/exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.as_tensor(arrays[f"optim/{n}/exp_avg_sq"]).to(p.dtype),
        }
    rng = np.random.default_rng()
    rng.bit_generator.state = man["rng"]["numpy"]
    gen = torch.Generator()
    gen.set_state(torch.frombuffer(bytearray(base64.b64decode(man["rng"]["torch"])), dtype=torch.uint8))
    state = TrainState(
        model=model, optimizer=opt, config=config, study_sizes=man["study_sizes"], np_rng=rng,
        torch_gen=gen, epoch=int(man["epoch"]),
        step_elbo=arrays["history/step_elbo"].tolist(), epoch_elbo=arrays["history/epoch_elbo"].tolist(),
    )
    return state, man
