import numpy as np
import pytest
import torch

from mssvae.model import (
    MSSVAE, Decoder, Encoder, LatentSample, MaskSet, assemble_masked_input, decode, encode,
    masked_inputs, padded_latent, reparameterize, softplus,
)


def two_study_masks():
    return MaskSet(np.array([[2.0]]), [np.array([[3.0]]), np.array([[3.0]])])


def test_assemble_zero_masks():
    masks = MaskSet(np.zeros((4, 2)), [np.zeros((4, 1)), np.zeros((4, 3))])
    lat = LatentSample([1.0, -2.0], [5.0, 6.0, 7.0], 1)
    np.testing.assert_array_equal(assemble_masked_input(masks, lat, 2), np.zeros(6))


def test_assemble_hand_example():
    masks = two_study_masks()
    np.testing.assert_array_equal(assemble_masked_input(masks, LatentSample([5.0], [7.0], 0), 0), [10, 21, 0])
    np.testing.assert_array_equal(assemble_masked_input(masks, LatentSample([5.0], [7.0], 1), 0), [10, 0, 21])


def test_assemble_errors():
    masks = two_study_masks()
    with pytest.raises(IndexError):
        assemble_masked_input(masks, LatentSample([5.0], [7.0], 0), 1)
    with pytest.raises(IndexError):
        assemble_masked_input(masks, LatentSample([5.0], [7.0], 2), 0)
    with pytest.raises(ValueError):
        assemble_masked_input(masks, LatentSample([5.0, 1.0], [7.0], 0), 0)


def test_assemble_linear_in_latent(rng):
    masks = MaskSet(rng.normal(size=(5, 2)), [rng.normal(size=(5, 1)), rng.normal(size=(5, 2))])
    lat = LatentSample(rng.normal(size=2), rng.normal(size=2), 1)
    scaled = LatentSample(3.5 * lat.shared, 3.5 * lat.specific, 1)
    np.testing.assert_allclose(
        assemble_masked_input(masks, scaled, 3), 3.5 * assemble_masked_input(masks, lat, 3), rtol=1e-14
    )


def test_maskset_validation():
    with pytest.raises(ValueError):
        MaskSet(np.zeros((3, 2)), [np.zeros((4, 1))])
    with pytest.raises(ValueError):
        MaskSet(np.array([[np.nan]]), [])


def test_batched_masks_equal_padded_per_study(rng):
    masks = MaskSet(rng.normal(size=(4, 2)), [rng.normal(size=(4, 1)), rng.normal(size=(4, 2))])
    lat = LatentSample(rng.normal(size=2), rng.normal(size=2), 1)
    z = torch.as_tensor(padded_latent(lat, 2, [1, 2]))[None]
    c = masked_inputs(torch.as_tensor(masks.full()), z)[0].numpy()
    for j in range(4):
        np.testing.assert_array_equal(c[j], assemble_masked_input(masks, lat, j))


def zero_decoder(G=3, K=4, d1=5):
    dec = Decoder(G, K, d1).double()
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
    return dec


def test_decode_zero_weights():
    assert decode(zero_decoder(), np.array([1.0, -2.0, 3.0, 0.5]), 1) == 0.0


def test_decode_skip_identity():
    dec = zero_decoder()
    with torch.no_grad():
        dec.out_weight[2, 1] = 1.0
    assert decode(dec, np.array([1.0, -2.0, 3.0, 0.5]), 2) == -2.0


def test_decode_softplus_zero():
    assert decode(zero_decoder(), np.zeros(4), 0, link="softplus") == pytest.approx(np.log(2.0), abs=1e-15)


def test_decoder_rejects_wrong_second_width():
    with pytest.raises(ValueError):
        Decoder(3, 4, 5, hidden2=6)
    Decoder(3, 4, 5, hidden2=4)


def test_vectorized_decoder_matches_per_feature(rng):
    dec = Decoder(6, 4, 7).double()
    c = torch.as_tensor(rng.normal(size=(3, 6, 4)))
    batched = dec(c, "softplus").detach().numpy()
    for b in range(3):
        for j in range(6):
            assert batched[b, j] == pytest.approx(decode(dec, c[b, j].numpy(), j, "softplus"), rel=1e-13)


def test_decode_constant_in_masked_dimension(rng):
    dec = Decoder(5, 3, 6).double()
    w = rng.normal(size=(5, 3))
    w[:, 1] = 0.0
    z1 = rng.normal(size=3)
    z2 = z1.copy()
    z2[1] += 4.0
    for j in range(5):
        assert decode(dec, w[j] * z1, j) == decode(dec, w[j] * z2, j)


def test_softplus_stable_and_positive():
    u = torch.tensor([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=torch.float64)
    out = softplus(u)
    assert torch.all(torch.isfinite(out))
    assert torch.all(out > 0)
    assert out[-1] == 1e4
    np.testing.assert_allclose(out[1:4].numpy(), np.logaddexp(0, u[1:4].numpy()), rtol=1e-14)


def zero_head_encoder(G=4, K=2):
    enc = Encoder(G, [5, 3], K).double()
    with torch.no_grad():
        for head in (enc.mean_head, enc.log_std_head):
            head.weight.zero_()
            head.bias.zero_()
    return enc


def test_encode_zero_heads(rng):
    enc = zero_head_encoder()
    mu, sd = encode(enc, torch.as_tensor(rng.normal(size=(6, 4))), "train")
    assert torch.all(mu == 0) and torch.all(sd == 1)


def test_encode_eval_deterministic(rng):
    enc = Encoder(4, [5, 3], 2).double()
    x = torch.as_tensor(rng.normal(size=(3, 4)))
    a, b = encode(enc, x, "eval"), encode(enc, x, "eval")
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_encode_single_sample_train_rejected(rng):
    enc = Encoder(4, [5, 3], 2).double()
    with pytest.raises(ValueError):
        encode(enc, torch.as_tensor(rng.normal(size=(1, 4))), "train")
    with pytest.raises(ValueError):
        encode(enc, torch.tensor([[np.nan, 0, 0, 0]], dtype=torch.float64), "eval")


def test_batch_norm_uses_batch_statistics(rng):
    enc = Encoder(4, [5, 3], 2).double()
    x = torch.as_tensor(rng.normal(size=(4, 4)))
    enc.train()
    pre = enc.body[0](x)
    normed = enc.body[1](pre)
    mean = pre.mean(0)
    var = pre.var(0, unbiased=False)
    expected = (pre - mean) / torch.sqrt(var + 1e-5)
    torch.testing.assert_close(normed, expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(normed.mean(0).detach().numpy(), 0, atol=1e-12)


def test_running_variance_positive(rng):
    enc = Encoder(4, [5, 3], 2)
    encode(enc, torch.as_tensor(rng.normal(size=(8, 4)), dtype=torch.float32), "train")
    for m in enc.modules():
        if isinstance(m, torch.nn.BatchNorm1d):
            assert torch.all(m.running_var > 0)


def test_reparameterize():
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    assert torch.equal(reparameterize(t([1.0, 2]), t([3.0, 4]), t([0.0, 0])), t([1.0, 2]))
    assert torch.equal(reparameterize(t([0.0, 0]), t([1.0, 1]), t([0.3, -2])), t([0.3, -2]))
    assert torch.equal(reparameterize(t([1.0, 2]), t([3.0, 4]), t([1.0, -1])), t([4.0, -2]))
    with pytest.raises(ValueError):
        reparameterize(t([1.0]), t([1.0, 2]), t([1.0]))


def test_model_pads_latents():
    model = MSSVAE(5, 2, [1, 3], hidden_dims=(4, 4))
    z = torch.ones(3, 2)
    zeta = [(torch.tensor([0, 2]), torch.full((2, 1), 7.0)), (torch.tensor([1]), torch.full((1, 3), 9.0))]
    out = model.pad_latents(z, zeta)
    expected = torch.tensor([[1, 1, 7, 0, 0, 0], [1, 1, 0, 9, 9, 9], [1, 1, 7, 0, 0, 0]], dtype=torch.float32)
    assert torch.equal(out, expected)


def test_model_masks_start_at_one():
    model = MSSVAE(5, 2, [1, 3])
    assert np.all(model.masks().full() == 1.0)
    assert model.decoder.layer2.out_features == model.k_total
