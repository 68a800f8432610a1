import numpy as np
import pytest

from bldlab.denoiser import UNet, UNetConfig, predict_v, predict_v_guided


def small(**kw):
    return UNet(UNetConfig(widths=(8, 16, 16), temb_dim=16, groups=4, **kw))


@pytest.fixture(scope="module")
def unet():
    return small(seed=7)


@pytest.fixture
def z(rng):
    return rng.standard_normal((3, 4, 8, 8)).astype(np.float32)


def test_output_shape_and_finite(unet, z):
    v = predict_v(unet, z, 500, [0, 3, None])
    assert v.shape == z.shape and np.isfinite(v.data).all()
    assert predict_v(unet, z[0], 10, 2).shape == (4, 8, 8)


def test_deterministic_and_seeded_init(unet, z):
    np.testing.assert_array_equal(predict_v(unet, z, 300, 1).data, predict_v(unet, z, 300, 1).data)
    np.testing.assert_array_equal(predict_v(small(seed=7), z, 300, 1).data, predict_v(unet, z, 300, 1).data)
    assert not np.array_equal(predict_v(small(seed=8), z, 300, 1).data, predict_v(unet, z, 300, 1).data)


def test_condition_and_time_change_output(unet, z):
    base = predict_v(unet, z, 300, 1).data
    assert not np.allclose(base, predict_v(unet, z, 300, 2).data)
    assert not np.allclose(base, predict_v(unet, z, 700, 1).data)
    assert not np.allclose(base, predict_v(unet, z, 300, None).data)


def test_per_sample_timesteps(unet, z):
    t = np.array([5, 500, 1000])
    batched = predict_v(unet, z, t, 1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], predict_v(unet, z[i:i + 1], int(t[i]), 1).data[0], atol=1e-5)


@pytest.mark.parametrize("scale,which", [(1.0, "cond"), (0.0, "null")])
def test_guidance_endpoints(unet, z, scale, which):
    cond = predict_v(unet, z, 400, 2).data
    null = predict_v(unet, z, 400, None).data
    got = predict_v_guided(unet, z, 400, 2, scale).data
    np.testing.assert_allclose(got, cond if which == "cond" else null, atol=1e-5)


def test_guidance_is_affine_in_scale(unet, z):
    v = {s: predict_v_guided(unet, z, 400, 2, s).data for s in (0.0, 1.5, 3.0)}
    np.testing.assert_allclose(v[1.5], 0.5 * (v[0.0] + v[3.0]), atol=1e-5)
    cond = predict_v(unet, z, 400, 2).data
    null = predict_v(unet, z, 400, None).data
    np.testing.assert_allclose(v[3.0], null + 3.0 * (cond - null), atol=1e-4)


@pytest.mark.parametrize("t", [0, 1001, -3])
def test_invalid_timestep_rejected(unet, z, t):
    with pytest.raises(ValueError, match="timestep"):
        predict_v(unet, z, t, 0)


def test_invalid_shapes_and_classes_rejected(unet, rng):
    with pytest.raises(ValueError, match="latent"):
        predict_v(unet, rng.standard_normal((1, 3, 8, 8)).astype(np.float32), 10, 0)
    with pytest.raises(ValueError, match="divisible"):
        predict_v(unet, rng.standard_normal((1, 4, 6, 8)).astype(np.float32), 10, 0)
    with pytest.raises(ValueError, match="condition"):
        predict_v(unet, rng.standard_normal((1, 4, 8, 8)).astype(np.float32), 10, 9)


def test_mask_conditioning_inputs(rng, z):
    model = small(mask_conditioning=True)
    assert model.cfg.in_channels == 9
    m_r = (rng.random((3, 8, 8)) < 0.5).astype(np.float32)
    z_m = rng.standard_normal(z.shape).astype(np.float32)
    v = predict_v(model, z, 100, 0, (m_r, z_m))
    assert v.shape == z.shape
    other = predict_v(model, z, 100, 0, (1 - m_r, z_m))
    assert not np.allclose(v.data, other.data)
    with pytest.raises(ValueError, match="mask-conditioned"):
        predict_v(model, z, 100, 0)


def test_config_round_trip(unet):
    clone = UNet.from_config(unet.config_dict())
    assert clone.cfg == unet.cfg
    for k, v in unet.parameters().state_dict().items():
        np.testing.assert_array_equal(v, clone.parameters()[k].data)
