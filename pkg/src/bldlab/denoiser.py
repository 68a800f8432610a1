"""Compact conditional U-Net predicting v from (z_t, t, class condition)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .diffusion import cfg_combine, timestep_embedding
from .nn import Conv2d, Embedding, GroupNorm, Linear, Module, Tensor
from .nn import functional as F

NULL_CLASS = None
TIME_FEATURES = 64


@dataclass
class UNetConfig:
    widths: tuple[int, int, int] = (64, 128, 128)
    latent_channels: int = 4
    num_classes: int = 8
    temb_dim: int = 128
    groups: int = 8
    mask_conditioning: bool = False
    T: int = 1000
    seed: int = 0

    @property
    def in_channels(self) -> int:
        # z_t, plus m_resized and the masked latent when mask conditioning is on
        return self.latent_channels * 2 + 1 if self.mask_conditioning else self.latent_channels


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int, rng):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.temb = Linear(tdim, cout, rng=rng)
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.skip = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        t = self.temb(emb)
        h = h + F.reshape(t, t.shape + (1, 1))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class UNet(Module):
    def __init__(self, cfg: UNetConfig | None = None):
        self.cfg = cfg = cfg or UNetConfig()
        rng = np.random.default_rng(cfg.seed)
        c0, c1, c2 = cfg.widths
        td, g = cfg.temb_dim, cfg.groups
        self.time1 = Linear(TIME_FEATURES, td, rng=rng)
        self.time2 = Linear(td, td, rng=rng)
        # last row is the learned null condition
        self.class_emb = Embedding(cfg.num_classes + 1, td, rng=rng)
        self.conv_in = Conv2d(cfg.in_channels, c0, 3, rng=rng)
        self.down0 = ResBlock(c0, c0, td, g, rng)
        self.pool0 = Conv2d(c0, c0, 3, stride=2, rng=rng)
        self.down1 = ResBlock(c0, c1, td, g, rng)
        self.pool1 = Conv2d(c1, c1, 3, stride=2, rng=rng)
        self.down2 = ResBlock(c1, c2, td, g, rng)
        self.mid = ResBlock(c2, c2, td, g, rng)
        self.up1 = ResBlock(c2 + c1, c1, td, g, rng)
        self.up0 = ResBlock(c1 + c0, c0, td, g, rng)
        self.norm_out = GroupNorm(c0, g)
        self.conv_out = Conv2d(c0, cfg.latent_channels, 3, rng=rng)

    def config_dict(self) -> dict:
        d = asdict(self.cfg)
        d["widths"] = list(d["widths"])
        return d

    @classmethod
    def from_config(cls, d: dict) -> "UNet":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(UNetConfig(**d))

    def class_ids(self, c, n: int) -> np.ndarray:
        K = self.cfg.num_classes
        if c is None:
            return np.full(n, K, dtype=np.int64)
        ids = np.array([K if v is None else v for v in np.atleast_1d(np.asarray(c, dtype=object))],
                       dtype=np.int64)
        if ids.size == 1:
            ids = np.repeat(ids, n)
        if ids.size != n or ids.min() < 0 or ids.max() > K:
            raise ValueError(f"condition ids {c!r} invalid for batch {n} and {K} classes")
        return ids

    def forward(self, z_t: Tensor, t, c=None, extra: Tensor | None = None) -> Tensor:
        n = z_t.shape[0]
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(n, int(t))
        feats = Tensor(timestep_embedding(t, TIME_FEATURES), dtype=z_t.dtype)
        emb = self.time2(F.silu(self.time1(feats)))
        emb = F.silu(emb + self.class_emb(self.class_ids(c, n)))
        x = z_t if extra is None else F.concat_channels([z_t, extra])
        h = self.conv_in(x)
        s0 = self.down0(h, emb)
        s1 = self.down1(self.pool0(s0), emb)
        h = self.down2(self.pool1(s1), emb)
        h = self.mid(h, emb)
        h = self.up1(F.concat_channels([F.nearest_upsample2x(h), s1]), emb)
        h = self.up0(F.concat_channels([F.nearest_upsample2x(h), s0]), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def _check_inputs(model: UNet, z_t, t, mask_inputs):
    z = nn.tensor.as_tensor(z_t)
    squeeze = z.ndim == 3
    if squeeze:
        z = F.reshape(z, (1,) + z.shape)
    cfg = model.cfg
    if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[2] % 4 or z.shape[3] % 4:
        raise ValueError(f"predict_v: expected latent [N,{cfg.latent_channels},h,w] with h, w divisible by 4, "
                         f"got {z.shape}")
    ta = np.asarray(t)
    if not np.issubdtype(ta.dtype, np.integer) or ta.min() < 1 or ta.max() > cfg.T:
        raise ValueError(f"predict_v: timestep {t!r} outside [1, {cfg.T}]")
    extra = None
    if cfg.mask_conditioning:
        if mask_inputs is None:
            raise ValueError("predict_v: mask-conditioned model needs (m_resized, z0_masked)")
        m_r, z_m = mask_inputs
        m_r = np.asarray(m_r, dtype=z.dtype)
        m_r = m_r.reshape((-1, 1) + m_r.shape[-2:])
        if m_r.shape[0] == 1 and z.shape[0] > 1:
            m_r = np.repeat(m_r, z.shape[0], axis=0)
        z_m = np.asarray(getattr(z_m, "data", z_m), dtype=z.dtype).reshape(z.shape)
        extra = Tensor(np.concatenate([m_r, z_m], axis=1), dtype=z.dtype)
    return z, squeeze, extra


def predict_v(model: UNet, z_t, t, c=None, mask_inputs=None) -> Tensor:
    """v prediction for latent ``z_t`` at timestep(s) ``t`` under condition ``c`` (None = null)."""
    z, squeeze, extra = _check_inputs(model, z_t, t, mask_inputs)
    out = model(z, t, c, extra)
    return F.reshape(out, out.shape[1:]) if squeeze else out


def predict_v_guided(model: UNet, z_t, t, c, scale: float, mask_inputs=None) -> Tensor:
    """Classifier-free guidance: v_null + scale * (v_cond - v_null)."""
    z, squeeze, extra = _check_inputs(model, z_t, t, mask_inputs)
    n = z.shape[0]
    # one batched pass for the conditional and null branches
    z2 = Tensor(np.concatenate([z.data, z.data], axis=0), dtype=z.dtype)
    ids = np.concatenate([model.class_ids(c, n), model.class_ids(None, n)])
    t_arr = np.asarray(t)
    t2 = np.concatenate([np.broadcast_to(t_arr, (n,)), np.broadcast_to(t_arr, (n,))])
    e2 = None if extra is None else Tensor(np.concatenate([extra.data, extra.data], axis=0), dtype=z.dtype)
    with nn.no_grad():
        out = model(z2, t2, ids, e2).data
    v = cfg_combine(out[:n], out[n:], scale)
    v = Tensor(v, dtype=z.dtype)
    return F.reshape(v, v.shape[1:]) if squeeze else v
