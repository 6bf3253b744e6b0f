import json

import numpy as np
import pytest
import torch

from helpers import small_gaussian
from mssvae.io import (
    MultiStudyDataset, ValidationError, load_bundle, load_checkpoint, load_dataset, save_bundle, save_checkpoint,
    save_dataset,
)
from mssvae.objective import TrainConfig, em_train, init_params


def write(path, text):
    path.write_text(text)
    return path


def test_csv_small(tmp_path):
    p = write(tmp_path / "d.csv", "study,a,b,c,d\n0,1,2,3,4\n1,5,6,7,8\n0,9,10,11,12\n")
    ds = load_dataset(p)
    assert ds.values.shape == (3, 4)
    assert list(ds.study_sizes) == [2, 1]
    assert ds.feature_names == ["a", "b", "c", "d"]


@pytest.mark.parametrize("fmt", ["d.csv", "bundle"])
def test_round_trip_bit_identical(tmp_path, rng, fmt):
    X = rng.normal(size=(7, 5)) * 1e3
    ds = MultiStudyDataset(X, [0, 1, 1, 0, 2, 2, 1], [f"f{i}" for i in range(5)])
    save_dataset(ds, tmp_path / fmt)
    back = load_dataset(tmp_path / fmt)
    assert np.array_equal(back.values, X) and np.array_equal(back.labels, ds.labels)


def test_counts_round_trip(tmp_path, rng):
    ds = MultiStudyDataset(rng.poisson(4, size=(6, 3)), [0, 0, 1, 1, 1, 0])
    save_dataset(ds, tmp_path / "c.csv")
    back = load_dataset(tmp_path / "c.csv", counts=True)
    assert back.values.dtype == np.int64 and np.array_equal(back.values, ds.values)


def test_csv_errors(tmp_path):
    with pytest.raises(ValidationError, match="row 1, column 2"):
        load_dataset(write(tmp_path / "nan.csv", "study,a,b,c\n0,1,2,3\n0,1,2,NaN\n"))
    with pytest.raises(ValidationError, match="row 0"):
        load_dataset(write(tmp_path / "rag.csv", "study,a,b\n0,1\n"))
    with pytest.raises(ValidationError, match="negative count at row 0, column 1"):
        load_dataset(write(tmp_path / "neg.csv", "study,a,b\n0,1,-2\n"), counts=True)
    with pytest.raises(ValidationError, match="unknown study label"):
        MultiStudyDataset(np.ones((2, 2)), [0, 5], study_names=["a", "b"])
    with pytest.raises(ValidationError):
        MultiStudyDataset(np.ones((2, 2)), [0, 2])  # study 1 empty
    with pytest.raises(FileNotFoundError, match="missing.csv"):
        load_dataset(tmp_path / "missing.csv")


def test_bundle_version_and_truncation(tmp_path):
    save_bundle(tmp_path / "b", {"x/y": np.arange(6.0).reshape(2, 3)}, {"kind": "test"})
    arrays, man = load_bundle(tmp_path / "b")
    assert np.array_equal(arrays["x/y"], np.arange(6.0).reshape(2, 3))
    man["version"] = 99
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValidationError, match="version"):
        load_bundle(tmp_path / "b")


def trained_state(epochs=2):
    ds, _ = small_gaussian()
    cfg = TrainConfig(k_shared=3, k_specific=2, hidden_dims=(8, 8), epochs=epochs, batch_size=32, seed=5)
    state, _ = em_train(ds, cfg)
    return ds, cfg, state


def test_checkpoint_round_trip_fresh(tmp_path):
    ds, _ = small_gaussian()
    state = init_params(ds, TrainConfig(k_shared=3, k_specific=2, hidden_dims=(8, 8)))
    save_checkpoint(state, tmp_path / "ck")
    back, _ = load_checkpoint(tmp_path / "ck")
    for (n, a), (_, b) in zip(state.model.state_dict().items(), back.model.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_round_trip_trained_including_optimizer(tmp_path):
    ds, cfg, state = trained_state()
    save_checkpoint(state, tmp_path / "ck")
    back, man = load_checkpoint(tmp_path / "ck")
    assert man["epoch"] == 2 and back.epoch_elbo == state.epoch_elbo
    # resuming either copy gives identical continuations
    s1, h1 = em_train(ds, cfg, state=state, epochs=2)
    s2, h2 = em_train(ds, cfg, state=back, epochs=2)
    assert h1 == h2 and len(h2) == 4 and s2.epoch == 4


def test_checkpoint_float64_storage(tmp_path):
    _, _, state = trained_state(1)
    save_checkpoint(state, tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    entry = man["arrays"]["model/w_shared"]
    size = (tmp_path / "ck" / entry["file"]).stat().st_size
    assert entry["dtype"] == "f8" and size == 8 * np.prod(entry["shape"])


def test_checkpoint_truncated_names_parameter(tmp_path):
    _, _, state = trained_state(1)
    save_checkpoint(state, tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    f = tmp_path / "ck" / man["arrays"]["model/decoder.layer1.weight"]["file"]
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(ValidationError, match="decoder.layer1.weight"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_corrupt_manifest(tmp_path):
    _, _, state = trained_state(1)
    save_checkpoint(state, tmp_path / "ck")
    (tmp_path / "ck" / "manifest.json").write_text("{not json")
    with pytest.raises(ValidationError, match="corrupt"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_overwrite_is_atomic_replacement(tmp_path):
    _, _, state = trained_state(1)
    save_checkpoint(state, tmp_path / "ck")
    save_checkpoint(state, tmp_path / "ck")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]
