"""Blended latent diffusion inference for inpainting and outpainting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint
from .denoiser import UNet, predict_v_guided
from .diffusion import NoiseSchedule, SamplerConfig
from .imageio import read_pgm_mask, read_ppm, to_bytes, to_unit, write_ppm
from .masks import border_mask, check_mask, resize_to_latent
from .metrics import color_distance
from .nn import Tensor
from .vae import FACTOR, VAE


class PipelineError(ValueError):
    pass


@dataclass
class Models:
    vae: VAE
    unet: UNet
    schedule: NoiseSchedule
    vae_path: str = ""
    unet_path: str = ""


@dataclass
class InpaintRequest:
    image: object                 # uint8 [H,W,3] array or PPM path
    mask: object                  # 0/1 [H,W] array or PGM path
    condition: int | None = 0
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    paste_pixels: bool = False
    vae_path: str | None = None
    unet_path: str | None = None


@dataclass
class InpaintResult:
    image: np.ndarray             # uint8 [H,W,3]; pasted when paste_pixels is on
    raw_image: np.ndarray         # uint8 decode before any pixel paste
    cd: float                     # CD of the raw decode
    cd_pasted: float | None
    preserved_max_dev: float      # max |out - input| over preserved pixels, byte scale
    per_step_residual: list[float] = field(default_factory=list)
    sidecar: dict = field(default_factory=dict)


def load_models(vae_path, unet_path) -> Models:
    vck = load_checkpoint(vae_path)
    uck = load_checkpoint(unet_path)
    vae = VAE.from_config(vck.config["model"])
    vae.parameters().load_state_dict(vck.tensors)
    unet = UNet.from_config(uck.config["model"])
    unet.parameters().load_state_dict(uck.tensors)
    if uck.schedule is None:
        raise PipelineError(f"{unet_path}: denoiser checkpoint carries no noise schedule")
    if unet.cfg.T != uck.schedule.T:
        raise PipelineError(f"schedule mismatch: model T = {unet.cfg.T}, checkpoint schedule T = {uck.schedule.T}")
    if vae.cfg.latent_channels != unet.cfg.latent_channels:
        raise PipelineError(f"latent shape mismatch: VAE latent channels = {vae.cfg.latent_channels}, "
                            f"denoiser latent channels = {unet.cfg.latent_channels}")
    return Models(vae, unet, uck.schedule, str(vae_path), str(unet_path))


def paste_pixels(generated: np.ndarray, original: np.ndarray, m: np.ndarray) -> np.ndarray:
    """generated * (1 - m) + original * m; works on [H,W,3] or [3,H,W] images."""
    generated, original = np.asarray(generated), np.asarray(original)
    if generated.shape != original.shape:
        raise PipelineError(f"paste_pixels: shape mismatch {generated.shape} vs {original.shape}")
    m = check_mask(m)
    if generated.ndim == 3 and generated.shape[-1] == 3 and generated.shape[:2] == m.shape:
        mm = m[:, :, None]
    elif generated.shape[-2:] == m.shape:
        mm = m
    else:
        raise PipelineError(f"paste_pixels: mask {m.shape} does not match image {generated.shape}")
    return np.where(mm == 1, original, generated)


def _encode_scaled(vae: VAE, x: np.ndarray) -> np.ndarray:
    with nn.no_grad():
        return vae.encode(Tensor(x)).data * np.float32(vae.latent_scale)


def _decode_scaled(vae: VAE, z: np.ndarray) -> np.ndarray:
    with nn.no_grad():
        return vae.decode(Tensor(z / np.float32(vae.latent_scale))).data


def sample_blended(models: Models, x0: np.ndarray, m: np.ndarray, conditions, seeds,
                   sampler: SamplerConfig, debug: bool = False):
    """Batched core of ``bld_generate``.

    x0: float [N,3,H,W] in [-1, 1]; m: [N,H,W] pixel masks. Returns the final
    blended latents [N,4,h,w] and a per-step residual log (max deviation of the
    preserved latent cells from the freshly noised masked latent).
    """
    vae, unet, sched = models.vae, models.unet, models.schedule
    n = x0.shape[0]
    seeds = np.broadcast_to(np.asarray(seeds, dtype=np.int64), (n,))
    m_lat = np.stack([resize_to_latent(mi, FACTOR) for mi in m]).astype(np.float32)[:, None]
    z0_masked = _encode_scaled(vae, (x0 * m[:, None]).astype(np.float32))
    rngs = [np.random.default_rng([int(s), 0]) for s in seeds]
    z = np.stack([r.standard_normal(z0_masked.shape[1:]) for r in rngs]).astype(np.float32)
    steps = sampler.timesteps(sched.T)
    mask_inputs = (m_lat[:, 0], z0_masked) if unet.cfg.mask_conditioning else None
    residuals = []
    for i, t in enumerate(steps):
        t_prev = t - sampler.stride
        v = predict_v_guided(unet, z, t, conditions, sampler.guidance_scale, mask_inputs).data
        z = sched.ddim_step(z, v, t, t_prev).astype(np.float32)
        noise = np.stack([np.random.default_rng([int(s), 1, i]).standard_normal(z.shape[1:]) for s in seeds])
        z_masked_t = sched.forward_diffuse(z0_masked, noise.astype(np.float32), t_prev).astype(np.float32)
        z = z * (1 - m_lat) + z_masked_t * m_lat
        pres = np.broadcast_to(m_lat, z.shape) == 1
        residuals.append(float(np.max(np.abs(z[pres] - z_masked_t[pres]))) if pres.any() else 0.0)
    return z, residuals, z0_masked


def bld_generate_batch(models: Models, x0: np.ndarray, m: np.ndarray, conditions, seeds,
                       sampler: SamplerConfig, paste: bool = False):
    """Returns (raw decoded images [N,3,H,W], optionally pasted images, residual log)."""
    z, residuals, _ = sample_blended(models, x0, m, conditions, seeds, sampler)
    raw = _decode_scaled(models.vae, z)
    out = np.where(m[:, None] == 1, x0, raw) if paste else raw
    return raw, out, residuals


def _load_request(req: InpaintRequest):
    img = read_ppm(req.image) if isinstance(req.image, (str, Path)) else np.asarray(req.image, dtype=np.uint8)
    m = read_pgm_mask(req.mask) if isinstance(req.mask, (str, Path)) else check_mask(req.mask)
    if img.shape[:2] != m.shape:
        raise PipelineError(f"image size {img.shape[1]}x{img.shape[0]} does not match mask size "
                            f"{m.shape[1]}x{m.shape[0]}")
    if img.shape[0] % FACTOR or img.shape[1] % FACTOR:
        raise PipelineError(f"image size {img.shape[1]}x{img.shape[0]} is not divisible by {FACTOR}")
    return img, m


def bld_generate(req: InpaintRequest, models: Models | None = None) -> InpaintResult:
    img, m = _load_request(req)
    if models is None:
        if not req.vae_path or not req.unet_path:
            raise PipelineError("bld_generate: checkpoint paths are required when no models are given")
        models = load_models(req.vae_path, req.unet_path)
    x0 = to_unit(img)[None]
    raw, _, residuals = bld_generate_batch(models, x0, m[None], req.condition, req.seed, req.sampler)
    raw_bytes = to_bytes(raw[0])
    out = paste_pixels(raw_bytes, img, m) if req.paste_pixels else raw_bytes
    cd = color_distance(raw_bytes, m)
    cd_pasted = color_distance(out, m) if req.paste_pixels else None
    dev = np.abs(out.astype(np.int16) - img.astype(np.int16))[m == 1]
    result = InpaintResult(out, raw_bytes, cd, cd_pasted, float(dev.max()) if dev.size else 0.0, residuals)
    result.sidecar = {
        "cd": cd,
        "cd_pasted": cd_pasted,
        "preserved_max_dev": result.preserved_max_dev,
        "seed": int(req.seed),
        "steps": req.sampler.num_steps,
        "stride": req.sampler.stride,
        "guidance": req.sampler.guidance_scale,
        "condition": req.condition,
        "paste_pixels": bool(req.paste_pixels),
        "checkpoints": {"vae": models.vae_path, "denoiser": models.unet_path},
        "per_step_residual": residuals,
    }
    return result


def outpaint(req: InpaintRequest, keep_ratio: float, models: Models | None = None) -> InpaintResult:
    img = read_ppm(req.image) if isinstance(req.image, (str, Path)) else np.asarray(req.image, dtype=np.uint8)
    h, w = img.shape[:2]
    m = border_mask(h, w, keep_ratio)
    sub = InpaintRequest(img, m, req.condition, req.seed, req.sampler, req.paste_pixels,
                         req.vae_path, req.unet_path)
    return bld_generate(sub, models)


def write_result(result: InpaintResult, out_png_base) -> tuple[Path, Path]:
    base = Path(out_png_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    img_path = base.with_suffix(".ppm")
    write_ppm(img_path, result.image)
    side = base.with_suffix(".json")
    side.write_text(json.dumps(result.sidecar, indent=1, sort_keys=True))
    return img_path, side
