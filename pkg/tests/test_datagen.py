import numpy as np
import pytest

from mssvae.datagen import (
    GaussianSimConfig, RNASimConfig, block_layout, gen_anchor_masks, gen_block_masks, gen_gaussian_multistudy,
    gen_rnaseq_multistudy, load_ground_truth, normalized_expression, save_ground_truth, simulate_preset,
)


def test_block_masks_pure_blocks(rng):
    masks = gen_block_masks(60, 4, [2, 2, 2], 0.0, rng=rng)
    full = masks.full()
    assert np.all((full != 0).sum(axis=1) >= 1)
    assert np.all((full != 0).sum(axis=0) >= 1)
    layout = block_layout(60, 4, [2, 2, 2])
    expected = np.zeros_like(full, dtype=bool)
    cols = layout.shared + [b for blocks in layout.study for b in blocks]
    for k, rows in enumerate(cols):
        expected[rows, k] = True
    np.testing.assert_array_equal(full != 0, expected)


def test_block_geometry_leftover_rows():
    layout = block_layout(23, 2, [1, 2])
    sizes = [len(b) for b in layout.shared] + [len(b) for s in layout.study for b in s]
    assert sum(sizes) == 23 and sizes == [6, 5, 4, 4, 4]
    all_rows = np.sort(np.concatenate(layout.shared + [b for s in layout.study for b in s]))
    np.testing.assert_array_equal(all_rows, np.arange(23))
    with pytest.raises(ValueError):
        block_layout(3, 2, [1, 1])


def test_block_entry_distribution(rng):
    masks = gen_block_masks(100, 8, [2, 2, 2], 0.0, shared_mean=8.0, rng=rng)
    vals = masks.shared[masks.shared != 0]
    se = 0.1 / np.sqrt(vals.size)
    assert abs(vals.mean() - 8.0) < 3 * se


def test_offblock_count(rng):
    masks = gen_block_masks(100, 8, [2, 2, 2], 0.05, rng=rng)
    layout = block_layout(100, 8, [2, 2, 2])
    for W, blocks in [(masks.shared, layout.shared)] + list(zip(masks.study, layout.study)):
        in_block = np.zeros(W.shape, dtype=bool)
        for k, rows in enumerate(blocks):
            in_block[rows, k] = True
        off_cells = (~in_block).sum()
        assert ((W != 0) & ~in_block).sum() == round(0.05 * off_cells)
    with pytest.raises(ValueError):
        gen_block_masks(100, 8, [2], 1.0, rng=rng)


def test_gaussian_generator_shapes_and_latents():
    ds, truth = gen_gaussian_multistudy(GaussianSimConfig(), np.random.default_rng(0))
    assert ds.values.shape == (3000, 100)
    np.testing.assert_array_equal(ds.study_sizes, [1000, 1000, 1000])
    z = truth.shared_latents
    se = 0.25 * np.sqrt(2 / (z.shape[0] - 1))
    assert np.all(np.abs(z.var(axis=0, ddof=1) - 0.25) < 3 * se)


def test_gaussian_generator_quadratic_rows():
    ds, truth = gen_gaussian_multistudy(GaussianSimConfig(), np.random.default_rng(1))
    W = truth.masks.shared
    m0 = ds.labels == 0
    checked = 0
    for j in range(2, 100, 3):  # 1-based index divisible by 3
        nz = np.flatnonzero(W[j])
        if nz.size == 1 and not np.any(np.concatenate([w[j] for w in truth.masks.study]) != 0):
            k = nz[0]
            z = truth.shared_latents[m0, k]
            x = ds.values[m0, j]
            # under the null the sample correlation of z and z^2 has sd sqrt(E z^6 / (2 E z^2 ^3 n)), about 0.087
            assert abs(np.corrcoef(x, z)[0, 1]) < 4 * np.sqrt(7.5 / m0.sum())
            assert np.corrcoef(x, z**2)[0, 1] > 0.5
            checked += 1
    assert checked > 5


def test_gaussian_generator_deterministic():
    a, ta = simulate_preset("gaussian-s5.1", 3, n_per_study=20, n_features=30, k_shared=3)
    b, tb = simulate_preset("gaussian-s5.1", 3, n_per_study=20, n_features=30, k_shared=3)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(ta.masks.full(), tb.masks.full())


def small_rna(seed=0, **kw):
    cfg = RNASimConfig(n_samples=600, n_features=500, **kw)
    return gen_rnaseq_multistudy(cfg, np.random.default_rng(seed))


def test_rna_group_sizes_and_counts():
    ds, truth = small_rna()
    assert list(ds.study_sizes) == [180, 180, 240]
    assert np.issubdtype(ds.values.dtype, np.integer) and ds.values.min() >= 0
    assert RNASimConfig(n_samples=1001).group_sizes() == [300, 300, 401]


def test_rna_normalization_sums_to_one(rng):
    prop = normalized_expression(rng.normal(scale=5, size=(50, 200)))
    np.testing.assert_allclose(prop.sum(axis=1), 1.0, rtol=0, atol=1e-15)


def test_rna_library_sizes():
    ds, truth = gen_rnaseq_multistudy(RNASimConfig(n_samples=3200, n_features=200), np.random.default_rng(5))
    logl = np.log(truth.library_sizes)
    n = logl.size
    assert abs(logl.mean() - 12) < 3 * 0.5 / np.sqrt(n)
    assert abs(logl.var(ddof=1) - 0.25) < 3 * 0.25 * np.sqrt(2 / (n - 1))


def test_rna_overdispersion():
    ds, truth = small_rna(seed=2)
    X = ds.values.astype(float)
    mu = X.mean(axis=0)
    var = X.var(axis=0, ddof=1)
    high = mu > 50
    assert high.sum() > 20
    assert np.mean(var[high] > mu[high]) >= 0.95


def test_rna_deterministic():
    a, _ = small_rna(seed=9)
    b, _ = small_rna(seed=9)
    assert np.array_equal(a.values, b.values)


def test_ground_truth_round_trip(tmp_path):
    ds, truth = small_rna(seed=1)
    save_ground_truth(truth, tmp_path / "truth", seed=1)
    back = load_ground_truth(tmp_path / "truth")
    assert np.array_equal(back.masks.full(), truth.masks.full())
    assert np.array_equal(back.library_sizes, truth.library_sizes)
    assert np.array_equal(back.padded_latents(), truth.padded_latents())


def test_anchor_masks(rng):
    masks = gen_anchor_masks(30, 2, [1, 1], rng)
    full = masks.full()
    for k in range(4):
        rows = np.flatnonzero(full[:, k])
        anchors = [r for r in rows if np.count_nonzero(full[r]) == 1]
        assert anchors == [2 * k, 2 * k + 1]
