"""Small convolutional VAE (downsample factor 4, 4 latent channels).

``blended_reconstruct`` decodes the latent mix used by blended inference:
full-image latents in cells to be generated, masked-image latents in cells that
are preserved. Fine-tuning on that target teaches the autoencoder to produce
seam-free images from such mixed latents.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import Conv2d, GroupNorm, Module, Tensor
from .nn import functional as F

LATENT_CHANNELS = 4
FACTOR = 4


@dataclass
class VaeConfig:
    widths: tuple[int, int] = (32, 64)
    latent_channels: int = LATENT_CHANNELS
    groups: int = 0        # GroupNorm groups per block; 0 disables normalization
    seed: int = 0


@dataclass
class VaeTrainConfig:
    recon_weight: float = 1.0
    kl_weight: float = 1e-6
    blend_objective: bool = False
    freeze_encoder: bool = False
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kl_weight < 0:
            raise ValueError(f"kl_weight must be >= 0, got {self.kl_weight}")


@dataclass
class LossReport:
    step: int
    loss: float
    recon: float
    kl: float


class _Block(Module):
    # per-sample normalization discards the mean colour of flat images, so it is opt-in
    def __init__(self, cin, cout, groups, rng, stride=1):
        self.conv = Conv2d(cin, cout, 3, stride=stride, rng=rng)
        self.norm = GroupNorm(cout, groups) if groups else None

    def forward(self, x):
        h = self.conv(x)
        return F.silu(self.norm(h) if self.norm is not None else h)


class Encoder(Module):
    def __init__(self, cfg: VaeConfig, rng):
        c0, c1 = cfg.widths
        g = cfg.groups
        self.blocks = [
            _Block(3, c0, g, rng),
            _Block(c0, c0, g, rng, stride=2),
            _Block(c0, c1, g, rng),
            _Block(c1, c1, g, rng, stride=2),
        ]
        self.head = Conv2d(c1, 2 * cfg.latent_channels, 3, rng=rng)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return self.head(x)


class Decoder(Module):
    def __init__(self, cfg: VaeConfig, rng):
        c0, c1 = cfg.widths
        g = cfg.groups
        self.inp = _Block(cfg.latent_channels, c1, g, rng)
        self.mid = _Block(c1, c1, g, rng)
        self.up1 = _Block(c1, c0, g, rng)
        self.up2 = _Block(c0, c0, g, rng)
        self.out = Conv2d(c0, 3, 3, rng=rng)

    def forward(self, z):
        h = self.mid(self.inp(z))
        h = self.up1(F.nearest_upsample2x(h))
        h = self.up2(F.nearest_upsample2x(h))
        return F.tanh(self.out(h))


class VAE(Module):
    def __init__(self, cfg: VaeConfig | None = None):
        self.cfg = cfg or VaeConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        # multiplies latents handed to the diffusion model (unit-variance convention)
        self.latent_scale = 1.0

    def config_dict(self) -> dict:
        d = asdict(self.cfg)
        d["widths"] = list(d["widths"])
        d["latent_scale"] = self.latent_scale
        return d

    @classmethod
    def from_config(cls, d: dict) -> "VAE":
        d = dict(d)
        scale = float(d.pop("latent_scale", 1.0))
        d["widths"] = tuple(d["widths"])
        model = cls(VaeConfig(**d))
        model.latent_scale = scale
        return model

    # -- encoder / decoder ----------------------------------------------------
    def _check_image(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % FACTOR or x.shape[3] % FACTOR:
            raise ValueError(f"encode: expected [3,H,W] with H, W divisible by {FACTOR}, got {x.shape}")
        if np.abs(x.data).max() > 1.0 + 1e-6:
            raise ValueError("encode: pixel values must lie in [-1, 1]")
        return x

    def encode_stats(self, x) -> tuple[Tensor, Tensor]:
        x = self._check_image(nn.tensor.as_tensor(x))
        mean, logvar = F.split_channels(self.encoder(x), [self.cfg.latent_channels] * 2)
        return mean, logvar

    def encode(self, x, sample: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        squeeze = nn.tensor.as_tensor(x).ndim == 3
        mean, logvar = self.encode_stats(x)
        z = mean
        if sample:
            if rng is None:
                raise ValueError("encode(sample=True) needs an rng")
            eps = rng.standard_normal(mean.shape).astype(mean.dtype)
            z = mean + F.exp(logvar * 0.5) * Tensor(eps, dtype=mean.dtype)
        return F.reshape(z, z.shape[1:]) if squeeze else z

    def decode(self, z) -> Tensor:
        z = nn.tensor.as_tensor(z)
        squeeze = z.ndim == 3
        if squeeze:
            z = F.reshape(z, (1,) + z.shape)
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"decode: expected latent with {self.cfg.latent_channels} channels, got {z.shape}")
        out = self.decoder(z)
        return F.reshape(out, out.shape[1:]) if squeeze else out


def _mask4(m, like: Tensor, spatial) -> np.ndarray:
    """Broadcastable [N,1,h,w] float mask for a [N,C,h,w] tensor."""
    m = np.asarray(m, dtype=like.dtype)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.shape[2:] != tuple(spatial):
        raise ValueError(f"mask spatial shape {m.shape[2:]} does not match {tuple(spatial)}")
    return m


def blend_latents(z_full: Tensor, z_masked: Tensor, m_resized) -> Tensor:
    """z_full * (1 - m) + z_masked * m."""
    m = _mask4(m_resized, z_full, z_full.shape[2:])
    return z_full * (1.0 - m) + z_masked * m


def blended_reconstruct(model: VAE, x, m, m_resized, return_parts: bool = False):
    """D(E(x) * (1 - m_resized) + E(x * m) * m_resized) with mean-mode encoders."""
    x = model._check_image(nn.tensor.as_tensor(x))
    mp = _mask4(m, x, x.shape[2:])
    mean_full, logvar_full = model.encode_stats(x)
    mean_masked, _ = model.encode_stats(x * mp)
    mr = _mask4(m_resized, mean_full, mean_full.shape[2:])
    z = blend_latents(mean_full, mean_masked, mr)
    out = model.decode(z)
    if return_parts:
        return out, (mean_full, logvar_full, mean_masked, z)
    return out


def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """Per-element mean of KL(N(mean, exp(logvar)) || N(0, 1))."""
    return F.mean(F.square(mean) + F.exp(logvar) - 1.0 - logvar) * 0.5


def vae_loss(model: VAE, x, masks=None, cfg: VaeTrainConfig | None = None) -> tuple[Tensor, dict]:
    """Reconstruction (plain or blended) + kl_weight * KL of the full-image encoding.

    ``masks`` is a (pixel mask, latent mask) pair, each [N,H,W] / [N,h,w] or 2-D.
    """
    cfg = cfg or VaeTrainConfig()
    x = model._check_image(nn.tensor.as_tensor(x))
    if cfg.blend_objective:
        if masks is None:
            raise ValueError("vae_loss: blend objective requires a mask pair")
        m, m_resized = masks
        if cfg.freeze_encoder:
            with nn.no_grad():
                mean_full, logvar_full = model.encode_stats(x)
                mean_masked, _ = model.encode_stats(x * _mask4(m, x, x.shape[2:]))
            z = blend_latents(mean_full, mean_masked, m_resized)
            recon_img = model.decode(z)
        else:
            recon_img, (mean_full, logvar_full, _, _) = blended_reconstruct(
                model, x, m, m_resized, return_parts=True)
    else:
        if cfg.freeze_encoder:
            with nn.no_grad():
                mean_full, logvar_full = model.encode_stats(x)
            mean_full, logvar_full = mean_full.detach(), logvar_full.detach()
        else:
            mean_full, logvar_full = model.encode_stats(x)
        recon_img = model.decode(mean_full)
    recon = F.mse(recon_img, x)
    kl = kl_divergence(mean_full, logvar_full)
    loss = recon * cfg.recon_weight + kl * cfg.kl_weight
    return loss, {"recon": float(recon.data), "kl": float(kl.data)}


def trainable_params(model: VAE, cfg: VaeTrainConfig) -> nn.ParameterSet:
    ps = model.parameters()
    return ps.subset("decoder.") if cfg.freeze_encoder else ps


def train_step(model: VAE, x: np.ndarray, masks, optimizer: nn.Adam, cfg: VaeTrainConfig,
               step: int = 0) -> LossReport:
    """One Adam update against ``vae_loss``; the tape is cleared afterwards."""
    nn.clear_tape()
    optimizer.zero_grad()
    loss, parts = vae_loss(model, Tensor(x), masks, cfg)
    nn.backward(loss)
    optimizer.step()
    nn.clear_tape()
    return LossReport(step, float(loss.data), parts["recon"], parts["kl"])


def finetune_step(model: VAE, x: np.ndarray, masks, optimizer: nn.Adam, cfg: VaeTrainConfig,
                  step: int = 0) -> LossReport:
    """Blend-objective update (``cfg.blend_objective`` is forced on)."""
    if not cfg.blend_objective:
        cfg = VaeTrainConfig(**{**asdict(cfg), "blend_objective": True})
    return train_step(model, x, masks, optimizer, cfg, step)


def encode_batch(model: VAE, x: np.ndarray, batch: int = 64) -> np.ndarray:
    """Mean-mode latents for a stack of images, without recording a tape."""
    outs = []
    with nn.no_grad():
        for i in range(0, len(x), batch):
            outs.append(model.encode(Tensor(x[i:i + batch])).data)
    return np.concatenate(outs, axis=0)


def decode_batch(model: VAE, z: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = []
    with nn.no_grad():
        for i in range(0, len(z), batch):
            outs.append(model.decode(Tensor(z[i:i + batch])).data)
    return np.concatenate(outs, axis=0)


def blended_reconstruct_batch(model: VAE, x: np.ndarray, m: np.ndarray, m_resized: np.ndarray,
                              batch: int = 64) -> np.ndarray:
    outs = []
    with nn.no_grad():
        for i in range(0, len(x), batch):
            sl = slice(i, i + batch)
            outs.append(blended_reconstruct(model, Tensor(x[sl]), m[sl], m_resized[sl]).data)
    return np.concatenate(outs, axis=0)


def fit_latent_scale(model: VAE, x: np.ndarray) -> float:
    """Set ``latent_scale`` so encoded training latents have unit standard deviation."""
    z = encode_batch(model, x)
    std = float(np.std(z))
    model.latent_scale = 1.0 / std if std > 0 else 1.0
    return model.latent_scale
