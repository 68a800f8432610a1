import itertools

import numpy as np
import pytest

from bldlab import nn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with nn.precision(np.float64):
        yield


@pytest.fixture(autouse=True)
def _fresh_tape():
    nn.clear_tape()
    yield
    nn.clear_tape()


def brute_boundary_pairs(m):
    """Double loop over every 4-adjacent pair; returns (preserved, generated) index pairs."""
    h, w = m.shape
    out = []
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if rr < h and cc < w and m[r, c] != m[rr, cc]:
                    p, q = ((r, c), (rr, cc)) if m[r, c] == 1 else ((rr, cc), (r, c))
                    out.append(p + q)
    return out


def brute_hull_raster(points, shape):
    """Pixel is in the hull iff it lies in a triangle, segment or point of the input set."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    pts = [tuple(p) for p in np.unique(np.asarray(points), axis=0)]
    inside = np.zeros(shape, dtype=bool)
    for p in pts:
        inside |= (rr == p[0]) & (cc == p[1])
    for a, b in itertools.combinations(pts, 2):
        cross = (b[0] - a[0]) * (cc - a[1]) - (b[1] - a[1]) * (rr - a[0])
        inside |= (cross == 0) & ((rr - a[0]) * (rr - b[0]) <= 0) & ((cc - a[1]) * (cc - b[1]) <= 0)
    for a, b, c in itertools.combinations(pts, 3):
        if (b[0] - a[0]) * (c[1] - a[1]) == (b[1] - a[1]) * (c[0] - a[0]):
            continue  # collinear: covered by the segments
        d1 = (b[0] - a[0]) * (cc - a[1]) - (b[1] - a[1]) * (rr - a[0])
        d2 = (c[0] - b[0]) * (cc - b[1]) - (c[1] - b[1]) * (rr - b[0])
        d3 = (a[0] - c[0]) * (cc - c[1]) - (a[1] - c[1]) * (rr - c[0])
        inside |= ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
    return inside


def brute_dilate(region, r):
    h, w = region.shape
    out = np.zeros_like(region)
    for y, x in zip(*np.nonzero(region)):
        out[max(0, y - r):min(h, y + r + 1), max(0, x - r):min(w, x + r + 1)] = True
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
