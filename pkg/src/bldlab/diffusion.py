"""Noise schedule, v-parameterization arithmetic and the strided deterministic sampler.

All helpers accept numpy arrays (or anything supporting ``*``/``+`` with
scalars, e.g. :class:`~bldlab.nn.Tensor`). A timestep may be a Python int or an
integer array of per-sample timesteps, in which case coefficients broadcast over
the leading (batch) axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    stride: int = 20
    guidance_scale: float = 3.0
    eta: float = 0.0

    def timesteps(self, T: int) -> list[int]:
        """Visited timesteps, highest first: T, T-stride, ..., stride."""
        if self.num_steps * self.stride > T:
            raise ValueError(f"num_steps*stride = {self.num_steps * self.stride} exceeds T = {T}")
        if self.eta != 0.0:
            raise ValueError("only the deterministic sampler (eta = 0) is implemented")
        return [T - i * self.stride for i in range(self.num_steps)]


class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar[0]`` is defined as 1."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2, betas=None):
        if betas is None:
            betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must be a 1-D array with entries in (0, 1)")
        self.T = int(betas.size)
        # index 0 is the t = 0 convention; tables are read-only
        self.beta = np.concatenate([[0.0], betas])
        self.alpha = 1.0 - self.beta
        alpha_bar = np.empty(self.T + 1)
        alpha_bar[0] = 1.0
        for t in range(1, self.T + 1):
            alpha_bar[t] = alpha_bar[t - 1] * self.alpha[t]
        self.alpha_bar = alpha_bar
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.flags.writeable = False

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSchedule) and np.array_equal(self.beta, other.beta)

    def _check(self, t, lo: int) -> np.ndarray:
        ta = np.asarray(t)
        if not np.issubdtype(ta.dtype, np.integer):
            raise TypeError(f"timestep must be an integer, got {t!r}")
        if ta.size and (ta.min() < lo or ta.max() > self.T):
            raise ValueError(f"timestep {t!r} out of range [{lo}, {self.T}]")
        return ta

    def coef(self, t, like=None, lo: int = 0):
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)), shaped to broadcast against ``like``."""
        ta = self._check(t, lo)
        ab = self.alpha_bar[ta]
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
        if ta.ndim == 0:
            return float(a), float(s)
        ndim = np.ndim(_arr(like))
        shape = (-1,) + (1,) * max(ndim - 1, 0)
        dtype = _dtype_of(like)
        return a.reshape(shape).astype(dtype), s.reshape(shape).astype(dtype)

    def forward_diffuse(self, z0, eps, t):
        _same_shape(z0, eps, "forward_diffuse")
        a, s = self.coef(t, z0)
        return forward_diffuse(z0, eps, None, a, s)

    def v_target(self, z0, eps, t):
        _same_shape(z0, eps, "v_target")
        a, s = self.coef(t, z0)
        return v_target(z0, eps, None, a, s)

    def recover_z0(self, z_t, v, t):
        _same_shape(z_t, v, "recover_z0")
        a, s = self.coef(t, z_t, lo=1)
        return recover_z0(z_t, v, None, a, s)

    def recover_eps(self, z_t, v, t):
        a, s = self.coef(t, z_t, lo=1)
        return s * z_t + a * v

    def ddim_step(self, z_t, v_pred, t: int, t_prev: int):
        """Deterministic update from ``t`` to ``t_prev`` given a v prediction."""
        t, t_prev = int(t), int(t_prev)
        if t_prev >= t:
            raise ValueError(f"ddim_step: t_prev ({t_prev}) must be < t ({t})")
        self._check(t, 1)
        self._check(t_prev, 0)
        return ddim_update(z_t, v_pred, self.alpha_bar[t], self.alpha_bar[t_prev])


def _arr(x):
    return x if isinstance(x, np.ndarray) else getattr(x, "data", x)


def _dtype_of(x):
    if x is None:
        return np.float64
    d = getattr(_arr(x), "dtype", None)
    return d if d is not None and np.issubdtype(d, np.floating) else np.float64


def _same_shape(a, b, op: str) -> None:
    sa, sb = np.shape(_arr(a)), np.shape(_arr(b))
    if sa != sb:
        raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


def _ab(alpha_bar, a, s):
    if a is None:
        if not 0.0 <= alpha_bar <= 1.0:
            raise ValueError(f"alpha_bar must lie in [0, 1], got {alpha_bar}")
        return float(np.sqrt(alpha_bar)), float(np.sqrt(1.0 - alpha_bar))
    return a, s


def forward_diffuse(z0, eps, alpha_bar=None, a=None, s=None):
    """sqrt(ab) * z0 + sqrt(1 - ab) * eps."""
    a, s = _ab(alpha_bar, a, s)
    return a * z0 + s * eps


def v_target(z0, eps, alpha_bar=None, a=None, s=None):
    """sqrt(ab) * eps - sqrt(1 - ab) * z0."""
    a, s = _ab(alpha_bar, a, s)
    return a * eps - s * z0


def recover_z0(z_t, v, alpha_bar=None, a=None, s=None):
    """sqrt(ab) * z_t - sqrt(1 - ab) * v."""
    a, s = _ab(alpha_bar, a, s)
    return a * z_t - s * v


def ddim_update(z_t, v_pred, alpha_bar_t: float, alpha_bar_prev: float):
    """Move ``z_t`` to the noise level ``alpha_bar_prev`` along the predicted trajectory."""
    a, s = _ab(alpha_bar_t, None, None)
    if s == 0.0:
        raise ValueError("ddim_update needs alpha_bar_t < 1")
    ap, sp = _ab(alpha_bar_prev, None, None)
    z0_hat = a * z_t - s * v_pred
    eps_hat = (z_t - a * z0_hat) * (1.0 / s)
    return ap * z0_hat + sp * eps_hat


def cfg_combine(v_cond, v_uncond, scale: float):
    _same_shape(v_cond, v_uncond, "cfg_combine")
    return v_uncond + scale * (v_cond - v_uncond)


def timestep_embedding(t, dim: int = 64, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features [len(t), dim]: cos half then sin half."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)
