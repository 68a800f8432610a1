"""Procedural scenes with known foreground geometry.

Each scene is a smooth two-colour linear gradient background with 1-3 solid or
gradient-filled shapes (circle, rectangle, stripe) drawn inside a window that
never exceeds ~40% of the image, so background masks can always be sampled.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import write_pgm_mask, write_ppm
from .masks import Box, border_mask, convex_hull_expand, random_background_mask

SIZE = 64
NUM_CLASSES = 8
SHAPE_TYPES = ("circle", "rectangle", "stripe")
WINDOW = 40
MAX_BG_DELTA = 180


@dataclass
class SyntheticScene:
    image: np.ndarray  # uint8 [H, W, 3]
    class_id: int
    box: Box
    silhouettes: list[np.ndarray] = field(default_factory=list)  # bool [H, W] per shape
    shape_types: list[str] = field(default_factory=list)
    seed: int = 0


def scene_seed(root_seed: int, index: int) -> int:
    """Per-scene seed derived from the root seed; independent of generation order."""
    return int(np.random.SeedSequence([int(root_seed), int(index)]).generate_state(1)[0])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.integers(0, 256, size=3).astype(np.float64)
    delta = rng.integers(-MAX_BG_DELTA, MAX_BG_DELTA + 1, size=3)
    c1 = np.clip(c0 + delta, 0, 255)
    theta = rng.uniform(0, 2 * np.pi)
    d = np.array([np.sin(theta), np.cos(theta)])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = yy * d[0] + xx * d[1]
    proj = (proj - proj.min()) / (proj.max() - proj.min())
    img = c0[None, None, :] + (c1 - c0)[None, None, :] * proj[..., None]
    return img


def _fill(rng: np.random.Generator, region: np.ndarray, size: int) -> np.ndarray:
    base = rng.integers(0, 256, size=3).astype(np.float64)
    if rng.random() < 0.5:
        return np.broadcast_to(base, (size, size, 3))
    other = rng.integers(0, 256, size=3).astype(np.float64)
    ys, xs = np.nonzero(region)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = yy * np.sin(theta) + xx * np.cos(theta)
    inside = proj[ys, xs]
    lo, hi = inside.min(), inside.max()
    t = np.clip((proj - lo) / max(hi - lo, 1e-9), 0, 1)
    return base[None, None, :] + (other - base)[None, None, :] * t[..., None]


def _shape(rng: np.random.Generator, kind: str, win: Box, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    wh, ww = win.y1 - win.y0, win.x1 - win.x0
    if kind == "circle":
        r = int(rng.integers(4, 11))
        cy = win.y0 + int(rng.integers(r, wh - r))
        cx = win.x0 + int(rng.integers(r, ww - r))
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        h, w = int(rng.integers(6, 19)), int(rng.integers(6, 19))
        y0 = win.y0 + int(rng.integers(0, wh - h + 1))
        x0 = win.x0 + int(rng.integers(0, ww - w + 1))
        out = np.zeros((size, size), dtype=bool)
        out[y0:y0 + h, x0:x0 + w] = True
        return out
    thick, length = int(rng.integers(3, 6)), int(rng.integers(14, 31))
    h, w = (thick, length) if rng.random() < 0.5 else (length, thick)
    y0 = win.y0 + int(rng.integers(0, wh - h + 1))
    x0 = win.x0 + int(rng.integers(0, ww - w + 1))
    out = np.zeros((size, size), dtype=bool)
    out[y0:y0 + h, x0:x0 + w] = True
    return out


def make_scene(seed: int, size: int = SIZE) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    img = _background(rng, size)
    wy, wx = (int(rng.integers(0, size - WINDOW + 1)) for _ in range(2))
    win = Box(wy, wx, wy + WINDOW, wx + WINDOW)
    count = int(rng.integers(1, 4))
    kinds = [SHAPE_TYPES[int(rng.integers(0, 3))] for _ in range(count)]
    sils = []
    for kind in kinds:
        region = _shape(rng, kind, win, size)
        fill = _fill(rng, region, size)
        img[region] = fill[region]
        sils.append(region)
    union = np.any(sils, axis=0)
    ys, xs = np.nonzero(union)
    box = Box(int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
    largest = int(np.argmax([s.sum() for s in sils]))
    class_id = min(NUM_CLASSES - 1, 3 * (count - 1) + SHAPE_TYPES.index(kinds[largest]))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticScene(image, class_id, box, sils, kinds, int(seed))


def make_scenes(n: int, seed: int, start: int = 0) -> list[SyntheticScene]:
    return [make_scene(scene_seed(seed, i)) for i in range(start, start + n)]


def training_mask(scene: SyntheticScene, rng: np.random.Generator, border_prob: float = 0.25) -> np.ndarray:
    """Background inpainting mask, or an outpainting border mask with probability ``border_prob``."""
    h, w = scene.image.shape[:2]
    if rng.random() < border_prob:
        return border_mask(h, w, float(rng.uniform(0.5, 0.8)))
    return random_background_mask(h, w, scene.box, int(rng.integers(0, 2**63 - 1)))


def eval_mask(scene: SyntheticScene, expand_px: int = 3) -> np.ndarray:
    """Benchmark-style mask: hull of the largest object's silhouette, slightly expanded."""
    sil = scene.silhouettes[int(np.argmax([s.sum() for s in scene.silhouettes]))]
    return convex_hull_expand((~sil).astype(np.uint8), expand_px)


def _scene_files(seed: int, i: int):
    s = scene_seed(seed, i)
    scene = make_scene(s)
    m = random_background_mask(SIZE, SIZE, scene.box, s)
    return s, scene, m, eval_mask(scene)


def gen_dataset(n: int, seed: int, out_dir, workers: int = 1) -> dict:
    """Write images/, masks/ (training), eval_masks/ and manifest.json under ``out_dir``.

    ``workers`` > 1 builds scenes on a thread pool; output is identical either way.
    """
    if n < 1:
        raise ValueError(f"gen_dataset: n must be >= 1, got {n}")
    out = Path(out_dir)
    for sub in ("images", "masks", "eval_masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            built = list(pool.map(lambda i: _scene_files(seed, i), range(n)))
    else:
        built = [_scene_files(seed, i) for i in range(n)]
    entries = []
    for i, (s, scene, m, em) in enumerate(built):
        stem = f"scene_{i:05d}"
        try:
            write_ppm(out / "images" / f"{stem}.ppm", scene.image)
            write_pgm_mask(out / "masks" / f"{stem}.pgm", m)
            write_pgm_mask(out / "eval_masks" / f"{stem}.pgm", em)
        except OSError as exc:
            raise OSError(f"failed writing scene {stem} under {out}: {exc}") from exc
        entries.append({"stem": stem, "seed": s, "class": scene.class_id,
                        "box": scene.box.as_list(), "shapes": scene.shape_types})
    manifest = {"n": n, "seed": seed, "size": SIZE, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())
