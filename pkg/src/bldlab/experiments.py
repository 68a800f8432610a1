"""Fixed-seed toy protocol comparing the blend-aware VAE and two-step training.

Per seed: pretrain a VAE on full images, fine-tune a copy on the blended
objective, train one denoiser per training mode on the shared latents, then
inpaint held-out scenes whose masks are the expanded hulls of their largest
object. Four configurations are scored by mean color distance (CD).

Run ``python -m bldlab.experiments --seeds 0 1 2`` for the full protocol.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import make_scenes, eval_mask, training_mask, SyntheticScene
from .denoiser import UNet, UNetConfig
from .diffusion import NoiseSchedule, SamplerConfig
from .imageio import to_bytes, to_unit
from .masks import resize_to_latent
from .metrics import color_distance
from .pipeline import Models, sample_blended, _decode_scaled
from .trainer import LatentDataset, TrainConfig, train_denoiser
from .vae import (FACTOR, VAE, VaeConfig, VaeTrainConfig, blended_reconstruct_batch, encode_batch,
                  fit_latent_scale, train_step as vae_train_step)

log = logging.getLogger(__name__)

CONFIGS = ("neither", "vae_only", "two_step_only", "combined")


@dataclass
class ProtocolConfig:
    n_train: int = 2000
    n_eval: int = 200
    vae_widths: tuple[int, int] = (16, 32)
    unet_widths: tuple[int, int, int] = (16, 32, 32)
    temb_dim: int = 64
    vae_pretrain_steps: int = 1500
    vae_finetune_steps: int = 500
    vae_batch: int = 8
    vae_lr: float = 2e-3
    vae_finetune_lr: float = 1e-3
    # denoisers are trained on the pretrained encoder's latents, so the fine-tune keeps that encoder
    freeze_encoder: bool = True
    denoiser_steps: int = 5000
    denoiser_batch: int = 8
    denoiser_lr: float = 1e-3
    lam: float = 0.5
    masks_per_scene: int = 4
    hull_expand: int = 3
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval_batch: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = asdict(self.sampler)
        return d


def _images(scenes: list[SyntheticScene]) -> np.ndarray:
    return np.stack([to_unit(s.image) for s in scenes]).astype(np.float32)


def _mask_pool(scenes, seed: int, per_scene: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 77])
    return np.stack([[training_mask(s, rng) for _ in range(per_scene)] for s in scenes]).astype(np.uint8)


def train_vae(x: np.ndarray, masks: np.ndarray | None, cfg: VaeTrainConfig, model: VAE,
              log_every: int = 0) -> list:
    """Run ``cfg.steps`` Adam updates (plain or blended objective) on random minibatches."""
    params = model.parameters().subset("decoder.") if cfg.freeze_encoder else model.parameters()
    opt = nn.Adam(params, lr=cfg.lr)
    reports = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step, 2])
        idx = rng.integers(0, len(x), size=cfg.batch_size)
        pair = None
        if cfg.blend_objective:
            k = rng.integers(0, masks.shape[1], size=cfg.batch_size)
            m = masks[idx, k]
            pair = (m, np.stack([resize_to_latent(mi, FACTOR) for mi in m]))
        rep = vae_train_step(model, x[idx], pair, opt, cfg, step)
        reports.append(rep)
        if log_every and step % log_every == 0:
            log.info("vae step %d loss %.5f", step, rep.loss)
    return reports


def blend_cd(model: VAE, scenes, hull_expand: int) -> float:
    """Mean CD of blended reconstructions on ``scenes`` with their evaluation masks."""
    x = _images(scenes)
    m = np.stack([eval_mask(s, hull_expand) for s in scenes])
    mr = np.stack([resize_to_latent(mi, FACTOR) for mi in m])
    rec = blended_reconstruct_batch(model, x, m, mr)
    return float(np.mean([color_distance(to_bytes(r), mi) for r, mi in zip(rec, m)]))


def blend_finetune(plain: VAE, x: np.ndarray, masks: np.ndarray, seed: int, pc: ProtocolConfig,
                   freeze_encoder: bool) -> VAE:
    """Copy of ``plain`` fine-tuned on the blended objective; keeps its latent scale."""
    tuned = copy.deepcopy(plain)
    train_vae(x, masks, VaeTrainConfig(steps=pc.vae_finetune_steps, batch_size=pc.vae_batch,
                                       lr=pc.vae_finetune_lr, seed=seed + 1000, blend_objective=True,
                                       freeze_encoder=freeze_encoder), tuned)
    tuned.latent_scale = plain.latent_scale
    return tuned


def vae_stage(seed: int, pc: ProtocolConfig, scenes_train, scenes_eval, freeze_encoder: bool | None = None):
    """Pretrained and blend-fine-tuned VAEs plus blended-reconstruction CD before/after."""
    freeze = pc.freeze_encoder if freeze_encoder is None else freeze_encoder
    x = _images(scenes_train)
    plain = VAE(VaeConfig(widths=pc.vae_widths, seed=seed))
    train_vae(x, None, VaeTrainConfig(steps=pc.vae_pretrain_steps, batch_size=pc.vae_batch,
                                      lr=pc.vae_lr, seed=seed), plain)
    fit_latent_scale(plain, x[:256])
    masks = _mask_pool(scenes_train, seed, pc.masks_per_scene)
    tuned = blend_finetune(plain, x, masks, seed, pc, freeze)
    cds = {"before": blend_cd(plain, scenes_eval, pc.hull_expand),
           "after": blend_cd(tuned, scenes_eval, pc.hull_expand)}
    return plain, tuned, masks, cds


def latent_dataset(vae: VAE, scenes, masks: np.ndarray) -> LatentDataset:
    x = _images(scenes)
    z0 = encode_batch(vae, x) * np.float32(vae.latent_scale)
    s, p = masks.shape[:2]
    xm = (x[:, None] * masks[:, :, None]).reshape((s * p,) + x.shape[1:]).astype(np.float32)
    zm = (encode_batch(vae, xm) * np.float32(vae.latent_scale)).reshape((s, p) + z0.shape[1:])
    mr = np.stack([[resize_to_latent(mi, FACTOR) for mi in row] for row in masks])
    return LatentDataset(z0.astype(np.float32), np.array([sc.class_id for sc in scenes]), zm.astype(np.float32), mr)


def run_seed(seed: int, pc: ProtocolConfig | None = None, keep_models: bool = False) -> dict:
    """Full protocol for one seed; returns mean CD per configuration plus timings.

    With ``keep_models`` the result also carries the trained networks and the
    scene split under ``"models"`` (not JSON-serializable).
    """
    pc = pc or ProtocolConfig()
    t0 = time.time()
    scenes = make_scenes(pc.n_train + pc.n_eval, seed)
    train, held = scenes[:pc.n_train], scenes[pc.n_train:]
    plain, tuned, masks, vae_cds = vae_stage(seed, pc, train, held)
    t_vae = time.time() - t0

    data = latent_dataset(plain, train, masks)
    schedule = NoiseSchedule()
    denoisers = {}
    for mode in ("standard", "two_step"):
        unet = UNet(UNetConfig(widths=pc.unet_widths, temb_dim=pc.temb_dim, seed=seed))
        cfg = TrainConfig(mode=mode, lam=pc.lam, lr=pc.denoiser_lr, batch_size=pc.denoiser_batch,
                          steps=pc.denoiser_steps, seed=seed)
        reports = train_denoiser(unet, schedule, data, cfg)
        denoisers[mode] = (unet, reports)
    t_den = time.time() - t0 - t_vae

    xe = _images(held)
    me = np.stack([eval_mask(s, pc.hull_expand) for s in held])
    classes = [s.class_id for s in held]
    cds: dict[str, float] = {}
    per_image: dict[str, list[float]] = {}
    names = {("standard", "plain"): "neither", ("standard", "tuned"): "vae_only",
             ("two_step", "plain"): "two_step_only", ("two_step", "tuned"): "combined"}
    for mode, (unet, _) in denoisers.items():
        for vae_name, vae in (("plain", plain), ("tuned", tuned)):
            # the same autoencoder encodes the masked image and decodes the result
            models = Models(vae, unet, schedule)
            imgs = []
            for i in range(0, len(held), pc.eval_batch):
                sl = slice(i, i + pc.eval_batch)
                z, _, _ = sample_blended(models, xe[sl], me[sl], classes[sl],
                                         np.arange(len(held))[sl] + 10_000 * seed, pc.sampler)
                imgs.append(_decode_scaled(vae, z))
            vals = [color_distance(to_bytes(im), mi) for im, mi in zip(np.concatenate(imgs), me)]
            per_image[names[(mode, vae_name)]] = vals
            cds[names[(mode, vae_name)]] = float(np.mean(vals))
    reference = float(np.mean([color_distance(s.image, mi) for s, mi in zip(held, me)]))
    out = {
        "seed": seed,
        "cd": cds,
        "cd_reference_images": reference,
        "vae_blend_cd": vae_cds,
        "final_loss": {m: float(np.mean([r.combined for r in rep[-200:]])) for m, (_, rep) in denoisers.items()},
        "seconds": {"vae": t_vae, "denoisers": t_den, "total": time.time() - t0},
        "config": pc.to_dict(),
    }
    if keep_models:
        out["models"] = {"plain": plain, "tuned": tuned, "masks": masks, "train": train, "held": held,
                         **{m: u for m, (u, _) in denoisers.items()}}
    return out


def ablation_ordering_holds(cd: dict) -> dict:
    return {
        "combined<vae_only": cd["combined"] < cd["vae_only"],
        "combined<two_step_only": cd["combined"] < cd["two_step_only"],
        "combined<=0.8*neither": cd["combined"] <= 0.8 * cd["neither"],
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-train", type=int, default=None)
    ap.add_argument("--denoiser-steps", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    pc = ProtocolConfig()
    if args.n_train:
        pc.n_train = args.n_train
    if args.denoiser_steps:
        pc.denoiser_steps = args.denoiser_steps
    results = []
    for s in args.seeds:
        res = run_seed(s, pc)
        res["ordering"] = ablation_ordering_holds(res["cd"])
        print(json.dumps({k: res[k] for k in ("seed", "cd", "cd_reference_images", "vae_blend_cd", "ordering",
                                              "seconds", "final_loss")}), flush=True)
        results.append(res)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
