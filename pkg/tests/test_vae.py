import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from text2pose import tensor as T
from text2pose.vae import (ConfigurationError, LossError, PoseVAE, TrainingError, VaeConfig, VaeLatentParams,
                           kl_loss, load_vae, recon_loss, reconstruct, reparameterize, save_vae, train_vae,
                           vae_loss)

SMALL = VaeConfig(widths=(8, 8, 8), steps=3, batch_frames=4)


def test_encode_shapes():
    model = PoseVAE(VaeConfig(widths=(16, 16, 16)))
    p = torch.randn(64, 128, 3)
    params = model.encode(p)
    assert params.mu.shape == (64, 16, 4) == params.log_var.shape
    assert params.k == 64 * 16 * 4
    assert model.decode(params.mu).shape == (64, 128, 3)
    assert model.decode(params.mu, params.skips).shape == (64, 128, 3)


def test_encode_batched_leading_dims():
    model = PoseVAE(SMALL)
    p = torch.randn(2, 5, 128, 3)
    assert model.encode(p).mu.shape == (2, 5, 16, 4)


def test_encode_deterministic_and_finite_on_zeros():
    model = PoseVAE(SMALL)
    p = torch.randn(3, 128, 3)
    a, b = model.encode(p), model.encode(p.clone())
    assert torch.equal(a.mu, b.mu) and torch.equal(a.log_var, b.log_var)
    z = model.encode(torch.zeros(3, 128, 3))
    assert torch.isfinite(z.mu).all() and torch.isfinite(z.log_var).all()


def test_indivisible_keypoints_rejected():
    with pytest.raises(ConfigurationError):
        PoseVAE(VaeConfig(keypoints=100))


def test_wrong_input_shape():
    with pytest.raises(T.ShapeError):
        PoseVAE(SMALL).encode(torch.zeros(2, 127, 3))
    with pytest.raises(T.ShapeError):
        PoseVAE(SMALL).decode(torch.zeros(2, 15, 4))


@given(st.integers(1, 6))
def test_roundtrip_shape_any_frame_count(f):
    model = PoseVAE(SMALL)
    p = torch.randn(f, 128, 3)
    params = model.encode(p)
    z = reparameterize(params, torch.randn_like(params.mu))
    assert model.decode(z).shape == p.shape


def test_decode_deterministic():
    model = PoseVAE(SMALL)
    z = torch.randn(2, 16, 4)
    assert torch.equal(model.decode(z), model.decode(z))


def test_reparameterize_examples():
    mu = torch.ones(1, 1)
    zero = VaeLatentParams(mu, torch.zeros(1, 1))
    assert torch.equal(reparameterize(zero, torch.zeros(1, 1)), mu)
    e = torch.zeros(2, 3)
    e[1, 2] = 1
    params = VaeLatentParams(torch.randn(2, 3), torch.zeros(2, 3))
    assert torch.equal(reparameterize(params, e), params.mu + e)
    params = VaeLatentParams(torch.ones(1, dtype=torch.float64), torch.full((1,), math.log(4), dtype=torch.float64))
    assert reparameterize(params, torch.full((1,), 0.5, dtype=torch.float64)).item() == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(T.ShapeError):
        reparameterize(params, torch.zeros(2))


def test_kl_examples():
    assert kl_loss(torch.zeros(5, 4), torch.zeros(5, 4)).item() == 0.0
    assert kl_loss(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)).item() == 0.5
    v = kl_loss(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64)).item()
    assert v == pytest.approx(0.5 * (math.e - 2), abs=1e-12)
    assert v == pytest.approx(0.359, abs=1e-3)
    with pytest.raises(LossError):
        kl_loss(torch.zeros(1), torch.tensor([float("inf")]))


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=8))
def test_kl_nonnegative_zero_iff_prior(pairs):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    lv = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    kl = kl_loss(mu, lv).item()
    assert kl >= 0
    if kl == 0:
        # exp(x) - x - 1 underflows to 0 only for |x| far below 1e-6
        assert mu.abs().max() < 1e-6 and lv.abs().max() < 1e-6
    if (mu.abs() > 1e-3).any() or (lv.abs() > 1e-3).any():
        assert kl > 0


def test_recon_examples():
    p = torch.randn(2, 128, 3, dtype=torch.float64)
    assert recon_loss(p, p).item() == 0
    q = p.clone()
    q[1, 5, 2] += 2
    assert recon_loss(p, q).item() == pytest.approx(4.0, abs=1e-12)
    r = torch.randn(2, 128, 3, dtype=torch.float64)
    brute = sum((p.numpy().ravel()[i] - r.numpy().ravel()[i]) ** 2 for i in range(p.numel()))
    assert recon_loss(p, r).item() == pytest.approx(brute, abs=1e-9)
    with pytest.raises(T.ShapeError):
        recon_loss(p, r[:1])


def test_vae_loss_composition():
    model = PoseVAE(SMALL)
    p = torch.randn(3, 128, 3)
    recon, params = model(p)
    total, l_r, l_kl = vae_loss(p, recon, params, 1e-7)
    assert total.item() == (l_r + 1e-7 * l_kl).item()
    total0, l_r0, _ = vae_loss(p, recon, params, 0.0)
    assert total0.item() == l_r0.item()


def test_beta_zero_kl_absent_from_gradient():
    torch.manual_seed(0)
    model = PoseVAE(SMALL)
    p = torch.randn(3, 128, 3)
    recon, params = model(p)
    total, l_r, l_kl = vae_loss(p, recon, params, 0.0)
    g_total = torch.autograd.grad(total, model.to_stats.weight, retain_graph=True)[0]
    g_r = torch.autograd.grad(l_r, model.to_stats.weight)[0]
    assert torch.equal(g_total, g_r)


@pytest.mark.parametrize("seed", range(5))
def test_vae_loss_gradient_check(seed):
    torch.manual_seed(seed)
    cfg = VaeConfig(keypoints=16, widths=(8, 8, 8))
    model = PoseVAE(cfg).double()
    g = torch.Generator().manual_seed(seed)
    p = torch.randn(4, 16, 3, generator=g, dtype=torch.float64)
    noise = torch.randn(4, 2, 4, generator=g, dtype=torch.float64)

    def loss(x):
        recon, params = model(x, noise)
        return vae_loss(x, recon, params, 1e-7)[0]

    # the 2-point GroupNorm at the miniature bottleneck is sharply curved, so the
    # central difference needs a small step to sit inside its O(eps^2) regime
    assert T.gradient_check(loss, p, eps=1e-6) < 1e-4

    def loss_params():
        return loss(p)
    params = [model.stem.weight, model.to_stats.bias, model.head[2].weight]
    assert T.gradient_check_params(loss_params, params, eps=1e-6, max_entries=12, generator=g) < 1e-4


def test_confidence_channel_reconstructed():
    model = PoseVAE(SMALL)
    assert model.decode(torch.zeros(1, 16, 4)).shape[-1] == 3


def test_train_deterministic_and_logged(rng):
    data = rng.normal(size=(4, 6, 128, 3)).astype(np.float32)
    seen = []
    m1, h1 = train_vae(data, SMALL, callback=seen.append)
    m2, h2 = train_vae(data, SMALL)
    assert h1 == h2 and len(h1) == 3 and seen == h1
    assert {"recon", "kl", "loss", "recon_mse"} <= set(h1[0])
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_train_nan_aborts_with_last_good(rng):
    data = rng.normal(size=(2, 4, 128, 3)).astype(np.float32)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        train_vae(data, VaeConfig(widths=(8, 8, 8), steps=50, batch_frames=8))
    assert info.value.last_good_state is not None


def test_checkpoint_roundtrip(tmp_path):
    model = PoseVAE(SMALL)
    save_vae(model, tmp_path / "vae.ckpt")
    back = load_vae(tmp_path / "vae.ckpt")
    p = torch.randn(2, 128, 3)
    assert torch.equal(reconstruct(model.eval(), p), reconstruct(back, p))
