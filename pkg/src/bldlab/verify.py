"""Self-contained identity and gradient suites (no dataset or checkpoint needed)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .denoiser import UNet, UNetConfig, predict_v
from .diffusion import NoiseSchedule
from .nn import Tensor
from .trainer import blend, standard_v_loss, two_step_loss
from .vae import VAE, VaeConfig, VaeTrainConfig, vae_loss


@dataclass
class Check:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value < self.tolerance)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e})"

    def to_dict(self) -> dict:
        return {"check": self.name, "value": self.value, "tolerance": self.tolerance, "passed": self.passed}


def _random_cases(n: int, seed: int, dtype, shape=(4, 8, 8), t_lo: int = 1, T: int = 1000):
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((n,) + shape).astype(dtype)
    eps = rng.standard_normal((n,) + shape).astype(dtype)
    t = rng.integers(t_lo, T + 1, size=n)
    return rng, z0, eps, t


def round_trip_error(dtype, n: int = 1000, seed: int = 0) -> float:
    """Max |recover_z0(forward_diffuse(z0, eps, t), v_target(z0, eps, t), t) - z0| over n draws."""
    sched = NoiseSchedule()
    with nn.precision(dtype):
        _, z0, eps, t = _random_cases(n, seed, dtype)
        z_t = sched.forward_diffuse(z0, eps, t)
        v = sched.v_target(z0, eps, t)
        return float(np.max(np.abs(sched.recover_z0(z_t, v, t) - z0)))


def _two_step_pieces(dtype, n: int, seed: int):
    sched = NoiseSchedule()
    rng, z0, eps2, t = _random_cases(n, seed, dtype, t_lo=2)
    z0_hat = rng.standard_normal(z0.shape).astype(dtype)
    z0_masked = rng.standard_normal(z0.shape).astype(dtype)
    m = (rng.random((n,) + z0.shape[2:]) < 0.5).astype(dtype)
    a, s = sched.coef(t - 1, z0)
    return z0, z0_hat, z0_masked, m, eps2, a, s


def inversion_error(dtype=np.float32, n: int = 1000, seed: int = 1) -> float:
    """Rebuilding the blended noisy latent from the true noise: a*z0 + s*eps2_star vs z_{t-1}."""
    z0, z0_hat, zm, m, eps2, a, s = _two_step_pieces(dtype, n, seed)
    z_tm1 = a * blend(z0_hat, zm, m) + s * eps2
    eps2_star = (z_tm1 - a * z0) / s
    return float(np.max(np.abs(a * z0 + s * eps2_star - z_tm1)))


def blend_order_error(dtype=np.float32, n: int = 1000, seed: int = 2) -> float:
    """Noising the blended clean latent vs blending the two noised latents (shared eps2)."""
    _, z0_hat, zm, m, eps2, a, s = _two_step_pieces(dtype, n, seed)
    first = a * blend(z0_hat, zm, m) + s * eps2
    second = blend(a * z0_hat + s * eps2, a * zm + s * eps2, m)
    return float(np.max(np.abs(first - second)))


def identity_suite(n: int = 1000, seed: int = 0) -> list[Check]:
    return [
        Check("round trip float32", round_trip_error(np.float32, n, seed), 1e-5),
        Check("round trip float64", round_trip_error(np.float64, n, seed), 1e-12),
        Check("true-noise inversion float32", inversion_error(np.float32, n, seed + 1), 1e-6),
        Check("blend-order equivalence float32", blend_order_error(np.float32, n, seed + 2), 1e-6),
    ]


# -- gradient suite (64-bit) -------------------------------------------------------

def mini_vae(seed: int = 0) -> VAE:
    return VAE(VaeConfig(widths=(4, 8), seed=seed))


def mini_unet(seed: int = 0, **kw) -> UNet:
    return UNet(UNetConfig(widths=(4, 8, 8), temb_dim=8, groups=2, seed=seed, **kw))


def _mini_images(rng, n=2, size=8):
    return np.tanh(rng.standard_normal((n, 3, size, size)))


def gradient_suite(seed: int = 0, tolerance: float = 1e-4, max_entries: int = 6) -> list[Check]:
    checks = []
    rng = np.random.default_rng(seed)
    with nn.precision(np.float64):
        vae = mini_vae(seed).to_dtype(np.float64)
        x = _mini_images(rng)

        def vae_recon():
            return nn.functional.mse(vae.decode(vae.encode(Tensor(x))), Tensor(x))

        rep = nn.grad_check(vae_recon, vae.parameters(), tolerance, max_entries=max_entries, seed=seed)
        checks.append(Check("grad VAE reconstruction", rep.max_rel_error, tolerance))

        m = np.ones((2, 8, 8))
        m[:, 2:6, 2:6] = 0
        mr = np.ones((2, 2, 2))
        mr[:, 0:2, 0:2] = 0
        cfg = VaeTrainConfig(blend_objective=True, kl_weight=1e-2)
        rep = nn.grad_check(lambda: vae_loss(vae, Tensor(x), (m, mr), cfg)[0], vae.parameters(), tolerance,
                            max_entries=max_entries, seed=seed)
        checks.append(Check("grad vae_loss (blended + KL)", rep.max_rel_error, tolerance))

        unet = mini_unet(seed).to_dtype(np.float64)
        sched = NoiseSchedule()
        z = rng.standard_normal((2, 4, 8, 8))
        target = rng.standard_normal((2, 4, 8, 8))

        def unet_loss():
            return nn.functional.mse(predict_v(unet, z, np.array([10, 700]), np.array([1, 8])), Tensor(target))

        rep = nn.grad_check(unet_loss, unet.parameters(), tolerance, max_entries=max_entries, seed=seed)
        checks.append(Check("grad U-Net", rep.max_rel_error, tolerance))

        z0 = rng.standard_normal((2, 4, 8, 8))
        zm = rng.standard_normal((2, 4, 8, 8))
        eps1 = rng.standard_normal((2, 4, 8, 8))
        eps2 = rng.standard_normal((2, 4, 8, 8))
        mlat = (rng.random((2, 8, 8)) < 0.5).astype(np.float64)
        t = np.array([5, 900])

        c = np.array([0, 3])

        def combined():
            l1, l2 = two_step_loss(unet, sched, z0, zm, mlat, c, t, eps1, eps2)
            return l1 + l2 * 0.5

        # the blended z_{t-1} is a constant of the loss; freeze it for the numeric side
        with nn.no_grad():
            _, _, aux = two_step_loss(unet, sched, z0, zm, mlat, c, t, eps1, eps2, return_aux=True)

        def combined_frozen():
            l1 = standard_v_loss(unet, sched, z0, c, t, eps1)[0]
            v_hat2 = predict_v(unet, aux["z_tm1"], t - 1, c)
            return l1 + nn.functional.mse(v_hat2, Tensor(aux["v2"])) * 0.5

        rep = nn.grad_check(combined, unet.parameters(), tolerance, max_entries=max_entries, seed=seed,
                            reference_fn=combined_frozen)
        checks.append(Check("grad L1 + 0.5 L2", rep.max_rel_error, tolerance))
    return checks
