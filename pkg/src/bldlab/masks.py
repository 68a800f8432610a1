"""Binary masks: 1 = preserved pixel, 0 = pixel to generate.

Masks are plain ``uint8`` numpy arrays of shape [H, W] holding only 0/1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Half-open pixel box [y0, y1) x [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    @property
    def area(self) -> int:
        return max(0, self.y1 - self.y0) * max(0, self.x1 - self.x0)

    def as_list(self) -> list[int]:
        return [self.y0, self.x0, self.y1, self.x1]


@dataclass(frozen=True)
class MaskPair:
    pixel: np.ndarray
    latent: np.ndarray

    @classmethod
    def from_pixel(cls, m: np.ndarray, factor: int = 4) -> "MaskPair":
        m = check_mask(m)
        return cls(m, resize_to_latent(m, factor))


def check_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise MaskError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise MaskError("mask values must be 0 or 1")
    return m.astype(np.uint8, copy=False)


def resize_to_latent(m: np.ndarray, factor: int) -> np.ndarray:
    """A latent cell is preserved only if its whole pixel block is preserved."""
    m = check_mask(m)
    h, w = m.shape
    if factor < 1 or h % factor or w % factor:
        raise MaskError(f"mask {h}x{w} is not divisible by latent factor {factor}")
    blocks = m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return (blocks >= 0.999).astype(np.uint8)


# -- convex hull ------------------------------------------------------------

def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: np.ndarray) -> list[tuple[int, int]]:
    """Monotone-chain hull of integer points, counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.int64).tolist())))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def fill_hull(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Boolean raster of every pixel (row, col) lying inside or on the hull of ``points``."""
    hull = convex_hull(points)
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    rr = rr.astype(np.int64)
    cc = cc.astype(np.int64)
    if len(hull) == 1:
        (r0, c0), = hull
        return (rr == r0) & (cc == c0)
    if len(hull) == 2:
        (r0, c0), (r1, c1) = hull
        cross = (r1 - r0) * (cc - c0) - (c1 - c0) * (rr - r0)
        within = ((rr - r0) * (rr - r1) <= 0) & ((cc - c0) * (cc - c1) <= 0)
        return (cross == 0) & within
    inside = np.ones(shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        (r0, c0), (r1, c1) = hull[i], hull[(i + 1) % n]
        inside &= (r1 - r0) * (cc - c0) - (c1 - c0) * (rr - r0) >= 0
    return inside


def dilate(region: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return region.astype(bool)
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(region.astype(bool), structure=se)


def convex_hull_expand(m: np.ndarray, expand_px: int = 3) -> np.ndarray:
    """Replace the zero-region by its filled convex hull grown by ``expand_px``."""
    m = check_mask(m)
    zero = np.argwhere(m == 0)
    if zero.size == 0:
        raise MaskError("convex_hull_expand: mask has no region to generate")
    region = dilate(fill_hull(zero, m.shape), expand_px)
    return (~region).astype(np.uint8)


# -- synthetic training masks ------------------------------------------------

def _free_slabs(h: int, w: int, box: Box) -> list[Box]:
    slabs = [Box(0, 0, box.y0, w), Box(box.y1, 0, h, w), Box(0, 0, h, box.x0), Box(0, box.x1, h, w)]
    return [s for s in slabs if s.area > 0]


def _draw_shape(rng: np.random.Generator, slab: Box, shape: tuple[int, int], target: int) -> np.ndarray:
    h, w = shape
    sh, sw = slab.y1 - slab.y0, slab.x1 - slab.x0
    aspect = rng.uniform(0.5, 2.0)
    ph = int(np.clip(round(np.sqrt(target * aspect)), 2, sh)) if sh >= 2 else sh
    pw = int(np.clip(round(target / max(ph, 1)), 2, sw)) if sw >= 2 else sw
    y0 = slab.y0 + int(rng.integers(0, sh - ph + 1))
    x0 = slab.x0 + int(rng.integers(0, sw - pw + 1))
    out = np.zeros(shape, dtype=bool)
    if rng.random() < 0.5 or min(ph, pw) < 3:
        out[y0:y0 + ph, x0:x0 + pw] = True
    else:
        rr, cc = np.mgrid[0:h, 0:w]
        cy, cx = y0 + (ph - 1) / 2.0, x0 + (pw - 1) / 2.0
        out = ((rr - cy) / (ph / 2.0)) ** 2 + ((cc - cx) / (pw / 2.0)) ** 2 <= 1.0
    return out


def random_background_mask(
    height: int,
    width: int,
    foreground: Box,
    seed,
    area_range: tuple[float, float] = (0.10, 0.40),
    max_tries: int = 64,
) -> np.ndarray:
    """Union of 1-3 rectangles/ellipses placed entirely outside ``foreground``."""
    if not (0 <= foreground.y0 <= foreground.y1 <= height and 0 <= foreground.x0 <= foreground.x1 <= width):
        raise MaskError(f"foreground box {foreground.as_list()} outside image {height}x{width}")
    total = height * width
    if foreground.area > 0.6 * total:
        raise MaskError(f"foreground box covers {foreground.area / total:.0%} of the image (> 60%)")
    rng = np.random.default_rng(seed)
    slabs = _free_slabs(height, width, foreground)
    lo, hi = area_range
    areas = np.array([s.area for s in slabs], dtype=np.float64)
    for _ in range(max_tries):
        zero = np.zeros((height, width), dtype=bool)
        goal = rng.uniform(lo, hi) * total
        count = int(rng.integers(1, 4))
        for _k in range(count):
            slab = slabs[int(rng.choice(len(slabs), p=areas / areas.sum()))]
            target = min(goal / count * rng.uniform(0.7, 1.4), slab.area)
            zero |= _draw_shape(rng, slab, (height, width), max(int(target), 4))
        ratio = zero.sum() / total
        if lo <= ratio <= hi:
            return (~zero).astype(np.uint8)
    # the largest free slab always holds >= 10% of the image when the box covers <= 60%
    slab = slabs[int(np.argmax(areas))]
    want = int(np.ceil(rng.uniform(lo, min(hi, slab.area / total)) * total))
    sh, sw = slab.y1 - slab.y0, slab.x1 - slab.x0
    rows = min(sh, -(-want // sw), int(hi * total) // sw)
    zero = np.zeros((height, width), dtype=bool)
    zero[slab.y0:slab.y0 + rows, slab.x0:slab.x1] = True
    return (~zero).astype(np.uint8)


def border_mask(height: int, width: int, keep_ratio: float) -> np.ndarray:
    """Preserve a centred rectangle of ``keep_ratio`` per axis; the border is generated."""
    if not 0.0 < keep_ratio <= 1.0:
        raise MaskError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    kh, kw = int(round(height * keep_ratio)), int(round(width * keep_ratio))
    if kh < 1 or kw < 1:
        raise MaskError(f"keep_ratio {keep_ratio} leaves no preserved centre in {height}x{width}")
    top, left = (height - kh) // 2, (width - kw) // 2
    m = np.zeros((height, width), dtype=np.uint8)
    m[top:top + kh, left:left + kw] = 1
    return m


def boundary_pairs(m: np.ndarray) -> np.ndarray:
    """4-adjacent (preserved, generated) pixel pairs as rows (pr, pc, qr, qc).

    Each unordered pair appears once; rows are ordered by the row-major index of
    the first pixel of the pair in scan order, horizontal neighbour before vertical.
    """
    m = check_mask(m)
    if m.min() == m.max():
        raise MaskError("boundary_pairs: mask is uniform, there is no boundary")
    h, w = m.shape
    rr, cc = np.mgrid[0:h, 0:w]
    # horizontal pairs (r, c)-(r, c+1) and vertical pairs (r, c)-(r+1, c)
    hz = m[:, :-1] != m[:, 1:]
    vt = m[:-1, :] != m[1:, :]
    a_r = np.concatenate([rr[:, :-1][hz], rr[:-1, :][vt]])
    a_c = np.concatenate([cc[:, :-1][hz], cc[:-1, :][vt]])
    b_r = np.concatenate([rr[:, 1:][hz], rr[1:, :][vt]])
    b_c = np.concatenate([cc[:, 1:][hz], cc[1:, :][vt]])
    kind = np.concatenate([np.zeros(hz.sum(), np.int64), np.ones(vt.sum(), np.int64)])
    order = np.lexsort((kind, a_r * w + a_c))
    a_r, a_c, b_r, b_c = a_r[order], a_c[order], b_r[order], b_c[order]
    a_pres = m[a_r, a_c] == 1
    pr = np.where(a_pres, a_r, b_r)
    pc = np.where(a_pres, a_c, b_c)
    qr = np.where(a_pres, b_r, a_r)
    qc = np.where(a_pres, b_c, a_c)
    return np.stack([pr, pc, qr, qc], axis=1).astype(np.int64)
