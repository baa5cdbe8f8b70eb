import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treepl.errors import ValidationError
from treepl.geodata import RasterCube, load_cube, save_cube
from treepl.treetops import (
    TreetopConfig,
    detect_treetops,
    find_treetops,
    preprocess_chm,
    read_candidates,
    write_candidates,
)

from oracles import brute_maxima, random_raster


def test_constant_raster_unchanged():
    out = preprocess_chm(np.full((9, 9), 10.0))
    assert np.allclose(out, 10.0)


def test_clamp_before_smoothing():
    a = np.full((7, 7), 50.0)
    assert np.allclose(preprocess_chm(a), 40.0)
    a[3, 3] = np.nan
    a[0, 0] = 1.0
    raw = preprocess_chm(a, TreetopConfig(sigma=0.01))
    assert raw[3, 3] == pytest.approx(5.0) and raw[0, 0] == pytest.approx(5.0)


def test_impulse_centre_response():
    cfg = TreetopConfig(sigma=1.3)
    a = np.full((21, 21), cfg.clip_lo)
    a[10, 10] = 25.0
    r = int(np.ceil(3 * cfg.sigma))
    g = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * cfg.sigma ** 2))
    k00 = (g[r] / g.sum()) ** 2
    assert preprocess_chm(a, cfg)[10, 10] == pytest.approx(cfg.clip_lo + (25.0 - cfg.clip_lo) * k00, rel=1e-12)


def test_multiband_rejected():
    with pytest.raises(ValidationError):
        preprocess_chm(RasterCube(np.ones((2, 4, 4))))


def test_flat_raster_single_candidate():
    c = detect_treetops(np.full((5, 5), 5.0), TreetopConfig())
    assert c.coords() == [(0, 0)]


def test_single_bump():
    yy, xx = np.mgrid[0:31, 0:31]
    chm = 5 + 15 * np.exp(-((xx - 12) ** 2 + (yy - 17) ** 2) / 8.0)
    c = find_treetops(chm)
    assert c.coords() == [(12, 17)]
    assert c.height[0] <= 20


@pytest.mark.parametrize("gap,expect", [(3, 1), (6, 2)])
def test_two_bumps(gap, expect):
    yy, xx = np.mgrid[0:32, 0:32]
    chm = np.maximum(
        5 + 15 * np.exp(-((xx - 10) ** 2 + (yy - 16) ** 2) / 6.0),
        5 + 13 * np.exp(-((xx - 10 - gap) ** 2 + (yy - 16) ** 2) / 6.0),
    )
    cfg = TreetopConfig(h_min=8)
    smoothed = preprocess_chm(chm, cfg)
    c = detect_treetops(smoothed, cfg)
    assert len(c) == expect
    assert c.coords() == brute_maxima(smoothed, cfg.window, cfg.h_min)
    assert (10, 16) in c.coords()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    chm = random_raster(rng)
    window = int(rng.choice([3, 5, 7]))
    cfg = TreetopConfig(window=window, h_min=float(rng.uniform(0, 8)))
    got = sorted(detect_treetops(chm, cfg).coords(), key=lambda p: (p[1], p[0]))
    assert got == brute_maxima(chm, window, cfg.h_min)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_raising_hmin_never_adds(seed):
    rng = np.random.default_rng(seed)
    chm = preprocess_chm(rng.uniform(0, 30, (24, 24)))
    lo = set(detect_treetops(chm, TreetopConfig(h_min=6)).coords())
    hi = set(detect_treetops(chm, TreetopConfig(h_min=12)).coords())
    assert hi <= lo


def test_no_mutual_domination():
    rng = np.random.default_rng(0)
    chm = preprocess_chm(rng.uniform(0, 30, (40, 40)))
    c = detect_treetops(chm)
    pts = c.coords()
    for i, (x, y) in enumerate(pts):
        for x2, y2 in pts[i + 1 :]:
            assert max(abs(x - x2), abs(y - y2)) > 2


@pytest.mark.parametrize("kw", [dict(clip_lo=5, clip_hi=5), dict(sigma=0), dict(window=4), dict(window=1)])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        TreetopConfig(**kw)


def test_csv_round_trip(tmp_path):
    yy, xx = np.mgrid[0:20, 0:20]
    chm = RasterCube((5 + 10 * np.exp(-((xx - 9) ** 2 + (yy - 4) ** 2) / 4.0))[None])
    save_cube(chm, tmp_path / "chm")
    c = find_treetops(load_cube(tmp_path / "chm"))
    write_candidates(c, tmp_path / "c.csv")
    back = read_candidates(tmp_path / "c.csv")
    assert back.coords() == c.coords() and np.array_equal(back.height, c.height)
