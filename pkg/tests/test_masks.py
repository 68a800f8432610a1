import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bldlab.masks import (Box, MaskError, MaskPair, border_mask, boundary_pairs, convex_hull, convex_hull_expand,
                          fill_hull, random_background_mask, resize_to_latent)

from conftest import brute_boundary_pairs, brute_dilate, brute_hull_raster


# -- resize_to_latent -----------------------------------------------------------------

def test_resize_trivial_cases():
    assert resize_to_latent(np.ones((8, 8)), 4).tolist() == [[1, 1], [1, 1]]
    assert resize_to_latent(np.zeros((8, 8)), 4).tolist() == [[0, 0], [0, 0]]
    m = np.ones((8, 8))
    m[5, 2] = 0
    assert resize_to_latent(m, 4).tolist() == [[1, 1], [0, 1]]


def test_resize_exhaustive_block_patterns():
    # every one of the 2^16 binary 4x4 blocks, tiled into one large mask
    codes = np.arange(1 << 16, dtype=np.uint32)
    blocks = ((codes[:, None] >> np.arange(16)) & 1).astype(np.uint8).reshape(256, 256, 4, 4)
    m = blocks.transpose(0, 2, 1, 3).reshape(1024, 1024)
    lat = resize_to_latent(m, 4)
    np.testing.assert_array_equal(lat.reshape(-1), (codes == 0xFFFF).astype(np.uint8))


@pytest.mark.parametrize("cell", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_resize_8x8_single_defect_every_position(cell):
    for dy in range(4):
        for dx in range(4):
            m = np.ones((8, 8), dtype=np.uint8)
            m[cell[0] * 4 + dy, cell[1] * 4 + dx] = 0
            expect = np.ones((2, 2), dtype=np.uint8)
            expect[cell] = 0
            np.testing.assert_array_equal(resize_to_latent(m, 4), expect)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_resize_never_leaks_generated_pixels(seed):
    r = np.random.default_rng(seed)
    m = (r.random((16, 16)) < 0.97).astype(np.uint8)
    lat = resize_to_latent(m, 4)
    for i, j in zip(*np.nonzero(lat)):
        assert m[4 * i:4 * i + 4, 4 * j:4 * j + 4].all()


def test_resize_rejects_nondivisible():
    with pytest.raises(MaskError, match="divisible"):
        resize_to_latent(np.ones((10, 8)), 4)


def test_mask_pair_and_value_checks():
    pair = MaskPair.from_pixel(np.ones((8, 8)))
    assert pair.latent.shape == (2, 2)
    with pytest.raises(MaskError):
        resize_to_latent(np.full((4, 4), 2), 4)


# -- convex hull ----------------------------------------------------------------------

def test_hull_of_square_with_interior_and_collinear_points():
    pts = np.array([[0, 0], [0, 2], [0, 4], [4, 4], [4, 0], [2, 2], [2, 0]])
    assert sorted(convex_hull(pts)) == [(0, 0), (0, 4), (4, 0), (4, 4)]


def test_triangle_fill_matches_brute_force():
    m = np.ones((12, 12), dtype=np.uint8)
    for p in [(1, 1), (9, 3), (4, 10)]:
        m[p] = 0
    out = convex_hull_expand(m, 0)
    np.testing.assert_array_equal(out == 0, brute_hull_raster(np.argwhere(m == 0), m.shape))


@pytest.mark.parametrize("trial", range(100))
def test_hull_expand_matches_point_in_hull_brute_force(trial):
    r = np.random.default_rng(trial)
    n = int(r.integers(1, 9))
    shape = (20, 24)
    pts = np.stack([r.integers(0, shape[0], n), r.integers(0, shape[1], n)], axis=1)
    m = np.ones(shape, dtype=np.uint8)
    m[pts[:, 0], pts[:, 1]] = 0
    expand = int(r.integers(0, 4))
    out = convex_hull_expand(m, expand)
    hull = brute_hull_raster(pts, shape)
    np.testing.assert_array_equal(out == 0, brute_dilate(hull, expand))
    assert np.all(out[m == 0] == 0)


def test_convex_region_is_fixed_point():
    m = np.ones((16, 16), dtype=np.uint8)
    m[3:9, 5:12] = 0
    np.testing.assert_array_equal(convex_hull_expand(m, 0), m)
    np.testing.assert_array_equal(convex_hull_expand(convex_hull_expand(m, 0), 0), m)


def test_hull_expand_rejects_empty_zero_region():
    with pytest.raises(MaskError):
        convex_hull_expand(np.ones((8, 8)), 3)


def test_fill_hull_degenerate_inputs():
    assert fill_hull(np.array([[2, 3]]), (5, 5)).sum() == 1
    seg = fill_hull(np.array([[0, 0], [4, 4]]), (5, 5))
    np.testing.assert_array_equal(seg, np.eye(5, dtype=bool))


# -- random background masks ----------------------------------------------------------

def _random_box(r, size=64):
    while True:
        y0, y1 = np.sort(r.integers(0, size + 1, 2))
        x0, x1 = np.sort(r.integers(0, size + 1, 2))
        b = Box(int(y0), int(x0), int(y1), int(x1))
        if b.area <= 0.6 * size * size:
            return b


def test_background_mask_thousand_trials():
    r = np.random.default_rng(2024)
    for trial in range(1000):
        box = _random_box(r)
        m = random_background_mask(64, 64, box, trial)
        zero = m == 0
        assert not zero[box.y0:box.y1, box.x0:box.x1].any(), (trial, box)
        assert 0.10 <= zero.mean() <= 0.40, (trial, box, zero.mean())


def test_background_mask_is_seeded():
    box = Box(20, 20, 40, 44)
    np.testing.assert_array_equal(random_background_mask(64, 64, box, 7), random_background_mask(64, 64, box, 7))
    assert not np.array_equal(random_background_mask(64, 64, box, 7), random_background_mask(64, 64, box, 8))


def test_background_mask_rejections():
    with pytest.raises(MaskError, match="60%"):
        random_background_mask(64, 64, Box(0, 0, 64, 62), 0)
    with pytest.raises(MaskError, match="outside"):
        random_background_mask(64, 64, Box(0, 0, 70, 10), 0)


def test_background_mask_fallback_path():
    # a box covering exactly 60% leaves thin slabs where random shapes rarely fit
    box = Box(0, 0, 64, 38)
    for seed in range(20):
        m = random_background_mask(64, 64, box, seed, max_tries=0)
        assert 0.10 <= (m == 0).mean() <= 0.40
        assert not (m[:, :38] == 0).any()


# -- border masks -------------------------------------------------------------------

def test_border_mask_centre_block():
    m = border_mask(64, 64, 0.5)
    expect = np.zeros((64, 64), dtype=np.uint8)
    expect[16:48, 16:48] = 1
    np.testing.assert_array_equal(m, expect)
    assert border_mask(64, 64, 1.0).all()


@given(st.integers(4, 40), st.integers(4, 40), st.floats(0.2, 0.95))
def test_border_mask_geometry(h, w, ratio):
    m = border_mask(h, w, ratio)
    rows, cols = np.nonzero(m)
    top, bottom = rows.min(), h - 1 - rows.max()
    left, right = cols.min(), w - 1 - cols.max()
    assert m.sum() == (rows.max() - top + 1) * (cols.max() - left + 1)
    assert 0 <= bottom - top <= 1 and 0 <= right - left <= 1


@pytest.mark.parametrize("ratio", [0.0, -0.5, 1.5, 0.01])
def test_border_mask_rejections(ratio):
    with pytest.raises(MaskError):
        border_mask(16, 16, ratio)


# -- boundary pairs -------------------------------------------------------------------

def test_boundary_examples():
    m = np.ones((4, 4), dtype=np.uint8)
    m[:, 2:] = 0
    assert len(boundary_pairs(m)) == 4
    m = np.ones((5, 5), dtype=np.uint8)
    m[2, 2] = 0
    pairs = boundary_pairs(m)
    assert len(pairs) == 4 and np.all(pairs[:, 2:] == 2)
    with pytest.raises(MaskError, match="uniform"):
        boundary_pairs(np.zeros((3, 3)))


@pytest.mark.parametrize("trial", range(50))
def test_boundary_matches_double_loop(trial):
    r = np.random.default_rng(trial)
    m = (r.random((16, 16)) < r.uniform(0.2, 0.8)).astype(np.uint8)
    m[0, 0], m[0, 1] = 1, 0
    got = [tuple(row) for row in boundary_pairs(m)]
    assert got == brute_boundary_pairs(m)
    assert all(m[p[0], p[1]] == 1 and m[p[2], p[3]] == 0 for p in got)
