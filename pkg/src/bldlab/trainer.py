"""v-prediction training, plain and with the two-step blending simulation.

The two-step objective predicts v at ``t``, recovers the clean latent, pastes the
masked-image latent into the preserved cells, re-noises the result to ``t-1``
with a second noise draw, and asks the same network to predict the velocity
that is consistent with the *true* clean latent at that blended point.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .denoiser import UNet, predict_v
from .diffusion import NoiseSchedule
from .nn import Tensor
from .nn import functional as F

MODES = ("standard", "two_step")


@dataclass
class TrainConfig:
    mode: str = "standard"
    lam: float = 0.5
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 5000
    t_min_two_step: int = 2
    cond_dropout: float = 0.1
    seed: int = 0
    debug_checks: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.mode == "two_step" and self.t_min_two_step < 2:
            raise ValueError("two-step training needs t >= 2")


@dataclass
class LossReport:
    step: int
    t: list[int]
    l1: float
    l2: float | None
    combined: float

    def csv_row(self) -> list:
        return [self.step, " ".join(map(str, self.t)), f"{self.l1:.9g}",
                "" if self.l2 is None else f"{self.l2:.9g}", f"{self.combined:.9g}"]


CSV_HEADER = ["step", "t", "L1", "L2", "combined"]


def reports_to_csv(reports: list[LossReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


@dataclass
class TrainBatch:
    z0: np.ndarray            # [N,4,h,w] full-image latents
    c: np.ndarray             # [N] class ids (num_classes = null)
    z0_masked: np.ndarray | None = None   # [N,4,h,w] latents of x * m
    m_resized: np.ndarray | None = None   # [N,h,w] latent masks


def sample_timestep(mode: str, rng: np.random.Generator, size=None, T: int = 1000, t_min_two_step: int = 2):
    """Uniform integer timestep on [1, T] (standard) or [t_min, T] (two-step)."""
    lo = 1 if mode == "standard" else t_min_two_step
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return rng.integers(lo, T + 1, size=size)


def _mask_inputs(model: UNet, batch_m, batch_zm):
    return (batch_m, batch_zm) if model.cfg.mask_conditioning else None


def standard_v_loss(model: UNet, schedule: NoiseSchedule, z0: np.ndarray, c, t, eps1: np.ndarray,
                    mask_inputs=None):
    """Returns (L1 tensor, predicted v tensor, z_t array)."""
    z_t = schedule.forward_diffuse(z0, eps1, t)
    v1 = schedule.v_target(z0, eps1, t)
    v_hat = predict_v(model, z_t, t, c, mask_inputs)
    return F.mse(v_hat, Tensor(v1, dtype=v_hat.dtype)), v_hat, z_t


def blend(z, z_masked, m_resized):
    m = np.asarray(m_resized, dtype=np.asarray(z).dtype)
    m = m.reshape(m.shape[:-2] + (1,) + m.shape[-2:]) if m.ndim == np.ndim(z) - 1 else m
    return z * (1 - m) + z_masked * m


def two_step_loss(model: UNet, schedule: NoiseSchedule, z0: np.ndarray, z0_masked: np.ndarray,
                  m_resized: np.ndarray, c, t, eps1: np.ndarray, eps2: np.ndarray,
                  return_aux: bool = False):
    """(L1, L2) tensors for one two-step training example batch.

    The second prediction is queried at timestep ``t - 1`` on the blended,
    re-noised latent, which enters as a constant (no gradient flows through the
    first prediction into it).
    """
    t = np.asarray(t)
    if t.min() < 2:
        raise ValueError(f"two_step_loss needs t >= 2, got {t.min()}")
    for name, arr in (("z0_masked", z0_masked), ("eps1", eps1), ("eps2", eps2)):
        if np.shape(arr) != np.shape(z0):
            raise ValueError(f"two_step_loss: {name} shape {np.shape(arr)} does not match z0 {np.shape(z0)}")
    mask_inputs = _mask_inputs(model, m_resized, z0_masked)
    l1, v_hat, z_t = standard_v_loss(model, schedule, z0, c, t, eps1, mask_inputs)

    z0_hat = schedule.recover_z0(z_t, v_hat.data, t)
    z0_hat = blend(z0_hat, z0_masked, m_resized)
    tm1 = t - 1
    a, s = schedule.coef(tm1, z0)
    z_tm1 = a * z0_hat + s * eps2
    eps2_star = (z_tm1 - a * z0) / s
    v2 = a * eps2_star - s * z0

    v_hat2 = predict_v(model, z_tm1, tm1, c, mask_inputs)
    l2 = F.mse(v_hat2, Tensor(v2, dtype=v_hat2.dtype))
    if return_aux:
        aux = {"z_t": z_t, "z0_hat": z0_hat, "z_tm1": z_tm1, "eps2_star": eps2_star, "v2": v2,
               "a_prev": a, "s_prev": s}
        return l1, l2, aux
    return l1, l2


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def draw_step_inputs(cfg: TrainConfig, batch: TrainBatch, step: int, T: int):
    """Timesteps, noises and the condition-dropout pattern for one step (pure in (seed, step))."""
    rng = step_rng(cfg.seed, step)
    n = batch.z0.shape[0]
    t = sample_timestep(cfg.mode, rng, n, T, cfg.t_min_two_step)
    eps1 = rng.standard_normal(batch.z0.shape).astype(batch.z0.dtype)
    eps2 = rng.standard_normal(batch.z0.shape).astype(batch.z0.dtype)
    drop = rng.random(n) < cfg.cond_dropout
    return t, eps1, eps2, drop


def train_step(model: UNet, schedule: NoiseSchedule, batch: TrainBatch, cfg: TrainConfig,
               optimizer: nn.Adam, step: int = 0, inputs=None) -> LossReport:
    """One Adam update on L1 (standard) or L1 + lam * L2 (two-step)."""
    t, eps1, eps2, drop = inputs if inputs is not None else draw_step_inputs(cfg, batch, step, schedule.T)
    c = np.where(drop, model.cfg.num_classes, np.asarray(batch.c))
    nn.clear_tape()
    optimizer.zero_grad()
    if cfg.mode == "standard":
        mask_inputs = _mask_inputs(model, batch.m_resized, batch.z0_masked)
        l1, _, _ = standard_v_loss(model, schedule, batch.z0, c, t, eps1, mask_inputs)
        loss, l2v = l1, None
    else:
        if batch.z0_masked is None or batch.m_resized is None:
            raise ValueError("two-step training needs z0_masked and m_resized in the batch")
        l1, l2, aux = two_step_loss(model, schedule, batch.z0, batch.z0_masked, batch.m_resized,
                                    c, t, eps1, eps2, return_aux=True)
        if cfg.debug_checks:
            rebuilt = aux["a_prev"] * batch.z0 + aux["s_prev"] * aux["eps2_star"]
            if np.max(np.abs(rebuilt - aux["z_tm1"])) > 1e-4:
                raise AssertionError("two-step: true-noise inversion identity violated")
        loss = l1 + l2 * cfg.lam
        l2v = float(l2.data)
    nn.backward(loss)
    optimizer.step()
    nn.clear_tape()
    return LossReport(step, [int(v) for v in np.atleast_1d(t)], float(l1.data), l2v, float(loss.data))


@dataclass
class LatentDataset:
    """Pre-encoded training latents with a pool of masks per scene."""

    z0: np.ndarray                 # [S,4,h,w]
    classes: np.ndarray            # [S]
    z0_masked: np.ndarray | None = None   # [S,P,4,h,w]
    m_resized: np.ndarray | None = None   # [S,P,h,w]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.z0)

    def batch(self, rng: np.random.Generator, size: int) -> TrainBatch:
        idx = rng.integers(0, len(self.z0), size=size)
        if self.z0_masked is None:
            return TrainBatch(self.z0[idx], self.classes[idx])
        k = rng.integers(0, self.z0_masked.shape[1], size=size)
        return TrainBatch(self.z0[idx], self.classes[idx], self.z0_masked[idx, k], self.m_resized[idx, k])


def train_denoiser(model: UNet, schedule: NoiseSchedule, data: LatentDataset, cfg: TrainConfig,
                   log_every: int = 0, on_report=None) -> list[LossReport]:
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    reports = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([int(cfg.seed), int(step), 1])
        batch = data.batch(rng, cfg.batch_size)
        rep = train_step(model, schedule, batch, cfg, opt, step)
        reports.append(rep)
        if on_report is not None and (log_every and step % log_every == 0):
            on_report(rep)
    return reports


def config_echo(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lambda"] = d.pop("lam")
    return d
