import numpy as np
import pytest
from scipy import stats

from bldlab import nn
from bldlab.data import make_scenes
from bldlab.denoiser import UNet, UNetConfig
from bldlab.diffusion import NoiseSchedule
from bldlab.nn import Module, Tensor
from bldlab.trainer import (CSV_HEADER, LatentDataset, TrainBatch, TrainConfig, config_echo, draw_step_inputs,
                            reports_to_csv, sample_timestep, standard_v_loss, train_denoiser, train_step,
                            two_step_loss)

SCHED = NoiseSchedule()


class OracleV(Module):
    """Returns the velocity consistent with a known clean latent, or zero."""

    def __init__(self, z0, zero=False):
        self.cfg = UNetConfig(widths=(4, 4, 4))
        self.z0 = z0
        self.zero = zero

    def forward(self, z, t, c=None, extra=None):
        if self.zero:
            return Tensor(np.zeros_like(z.data))
        a, s = SCHED.coef(np.asarray(t), z.data)
        eps = (z.data - a * self.z0) / s
        return Tensor((a * eps - s * self.z0).astype(z.dtype))


def small_unet(seed=0):
    return UNet(UNetConfig(widths=(8, 16, 16), temb_dim=16, groups=4, seed=seed))


@pytest.fixture
def batch(rng):
    n = 4
    z0 = rng.standard_normal((n, 4, 8, 8))
    m_r = (rng.random((n, 8, 8)) < 0.5).astype(np.float64)
    z0m = rng.standard_normal(z0.shape)
    return z0, z0m, m_r, rng.standard_normal(z0.shape), rng.standard_normal(z0.shape), rng.integers(2, 1001, n)


def test_oracle_and_zero_model_first_loss(f64, batch):
    z0, _, _, eps1, _, t = batch
    l1, _, _ = standard_v_loss(OracleV(z0), SCHED, z0, 0, t, eps1)
    assert float(l1.data) < 1e-20
    l1, _, _ = standard_v_loss(OracleV(z0, zero=True), SCHED, z0, 0, t, eps1)
    assert float(l1.data) == pytest.approx(np.mean(SCHED.v_target(z0, eps1, t) ** 2), rel=1e-12)


def test_all_generated_mask_recovers_true_noise(f64, batch):
    z0, z0m, _, eps1, eps2, t = batch
    l1, l2, aux = two_step_loss(OracleV(z0), SCHED, z0, z0m, np.zeros((4, 8, 8)), 0, t, eps1, eps2,
                                return_aux=True)
    np.testing.assert_allclose(aux["z0_hat"], z0, atol=1e-10)
    np.testing.assert_allclose(aux["eps2_star"], eps2, atol=1e-8)
    np.testing.assert_allclose(aux["v2"], SCHED.v_target(z0, eps2, t - 1), atol=1e-8)
    assert float(l1.data) < 1e-20 and float(l2.data) < 1e-16


def test_preserved_cells_take_masked_latent(f64, batch):
    z0, z0m, m_r, eps1, eps2, t = batch
    _, _, aux = two_step_loss(OracleV(z0), SCHED, z0, z0m, m_r, 0, t, eps1, eps2, return_aux=True)
    keep = np.broadcast_to(m_r[:, None].astype(bool), z0.shape)
    np.testing.assert_array_equal(aux["z0_hat"][keep], z0m[keep])
    np.testing.assert_allclose(aux["z0_hat"][~keep], z0[~keep], atol=1e-10)


def test_true_noise_inversion_identity(batch):
    z0, z0m, m_r, eps1, eps2, t = (x.astype(np.float32) if x.dtype.kind == "f" else x for x in batch)
    _, _, aux = two_step_loss(small_unet(), SCHED, z0, z0m, m_r, 0, t, eps1, eps2, return_aux=True)
    rebuilt = aux["a_prev"] * z0 + aux["s_prev"] * aux["eps2_star"]
    assert np.max(np.abs(rebuilt - aux["z_tm1"])) < 1e-6


def test_two_step_rejects_small_t_and_bad_shapes(batch):
    z0, z0m, m_r, eps1, eps2, t = batch
    with pytest.raises(ValueError, match="t >= 2"):
        two_step_loss(OracleV(z0), SCHED, z0, z0m, m_r, 0, np.ones(4, dtype=int), eps1, eps2)
    with pytest.raises(ValueError, match="eps2"):
        two_step_loss(OracleV(z0), SCHED, z0, z0m, m_r, 0, t, eps1, eps2[:2])
    with pytest.raises(ValueError, match="t >= 2"):
        TrainConfig(mode="two_step", t_min_two_step=1)
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="other")
    with pytest.raises(ValueError, match="lambda"):
        TrainConfig(lam=-0.1)


def _tbatch(batch):
    z0, z0m, m_r, *_ = batch
    return TrainBatch(z0.astype(np.float32), np.array([0, 1, 2, 3]), z0m.astype(np.float32),
                      m_r.astype(np.float32))


def test_lambda_zero_update_equals_standard(batch):
    tb = _tbatch(batch)
    cfg_s = TrainConfig(mode="standard", cond_dropout=0.0)
    cfg_t = TrainConfig(mode="two_step", lam=0.0, cond_dropout=0.0)
    inputs = draw_step_inputs(cfg_t, tb, 0, SCHED.T)
    models = []
    for cfg in (cfg_s, cfg_t):
        m = small_unet(seed=2)
        train_step(m, SCHED, tb, cfg, nn.Adam(m.parameters(), lr=1e-3), 0, inputs)
        models.append(m.parameters().state_dict())
    for k in models[0]:
        np.testing.assert_array_equal(models[0][k], models[1][k])


def test_combined_equals_l1_plus_lambda_l2(batch):
    tb = _tbatch(batch)
    cfg = TrainConfig(mode="two_step", lam=0.5)
    m = small_unet()
    opt = nn.Adam(m.parameters(), lr=1e-3)
    for step in range(3):
        r = train_step(m, SCHED, tb, cfg, opt, step)
        assert abs(r.combined - (r.l1 + 0.5 * r.l2)) < 1e-6
        assert min(r.t) >= 2


def toy_dataset(n=64, seed=0):
    scenes = make_scenes(n, seed)
    img = np.stack([s.image for s in scenes]).astype(np.float32) / 127.5 - 1.0
    # 4x4 average pooling stands in for an encoder
    pooled = img.reshape(n, 16, 4, 16, 4, 3).mean(axis=(2, 4)).transpose(0, 3, 1, 2)
    z0 = np.concatenate([pooled, pooled.mean(axis=1, keepdims=True)], axis=1) * 2.0
    m = np.ones((n, 2, 16, 16), dtype=np.float32)
    m[:, 0, :, 8:] = 0
    m[:, 1, 8:, :] = 0
    z0m = z0[:, None] * m[:, :, None]
    return LatentDataset(z0.astype(np.float32), np.array([s.class_id for s in scenes]), z0m, m)


def test_report_sequence_deterministic():
    data = toy_dataset(16)
    cfg = TrainConfig(mode="two_step", steps=4, batch_size=4, seed=9)
    a = train_denoiser(small_unet(), SCHED, data, cfg)
    b = train_denoiser(small_unet(), SCHED, data, cfg)
    assert [r.csv_row() for r in a] == [r.csv_row() for r in b]


@pytest.mark.slow
def test_two_step_loss_trends_down():
    data = toy_dataset()
    cfg = TrainConfig(mode="two_step", steps=500, batch_size=8, lr=2e-3, seed=0)
    combined = np.array([r.combined for r in train_denoiser(small_unet(), SCHED, data, cfg)])
    assert combined[-50:].mean() < 0.7 * combined[:50].mean()


def test_timestep_distribution_uniform():
    r = np.random.default_rng(0)
    t = sample_timestep("standard", r, 100_000)
    assert t.min() >= 1 and t.max() <= 1000
    counts = np.bincount((t - 1) // 50, minlength=20)
    assert stats.chisquare(counts).pvalue > 0.01
    t2 = sample_timestep("two_step", r, 100_000)
    assert t2.min() == 2 and t2.max() == 1000 and not (t2 == 1).any()
    with pytest.raises(ValueError):
        sample_timestep("other", r)


def test_csv_format_and_echo():
    from bldlab.trainer import LossReport
    text = reports_to_csv([LossReport(0, [5, 7], 0.25, None, 0.25), LossReport(1, [3], 0.5, 0.125, 0.5625)])
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "0,5 7,0.25,,0.25"
    assert lines[2] == "1,3,0.5,0.125,0.5625"
    echo = config_echo(TrainConfig(lam=0.5))
    assert echo["lambda"] == 0.5 and "lam" not in echo
