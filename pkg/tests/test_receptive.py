import numpy as np
import pytest

from ramlab.data import read_pgm
from ramlab.model import SegModelConfig, model_init
from ramlab.receptive import (RfMap, chebyshev_distance, heatmap_levels, read_radius_csv,
                              rf_average, rf_effective_radius, rf_gradient_map, write_heatmap,
                              write_radius_csv)
from ramlab.attention import AttentionConfig
from ramlab.rng import RngState


def _model(mixer, layers=2, mode="baseline"):
    return model_init(SegModelConfig(mixer=mixer, layers=layers, attention=AttentionConfig(mode=mode)),
                      1, std=0.2)


def test_radius_examples():
    delta = np.zeros((32, 32))
    delta[16, 16] = 1.0
    assert rf_effective_radius(delta) == 0
    uniform = np.ones((32, 32))
    assert rf_effective_radius(uniform, 1.0) == 16
    # 31 x 31 pixels lie within radius 15; the last ring holds the other 63
    assert rf_effective_radius(uniform, 0.95) == pytest.approx(15 + (0.95 * 1024 - 961) / 63)
    assert rf_effective_radius(uniform, 529 / 1024) == pytest.approx(11.0)
    for bad in (0.0, 1.5, -1.0):
        with pytest.raises(ValueError):
            rf_effective_radius(uniform, bad)


def test_radius_monotone_in_q(rs):
    g = rs.exponential(size=(32, 32))
    radii = [rf_effective_radius(g, q) for q in np.linspace(0.05, 1.0, 20)]
    assert radii == sorted(radii)


def test_radius_interpolates_within_ring():
    g = np.zeros((5, 5))
    g[2, 2] = 0.5
    g[1, 1] = g[3, 3] = 0.25
    assert rf_effective_radius(g, 0.5) == 0.0
    assert rf_effective_radius(g, 0.75) == pytest.approx(0.5)
    assert rf_effective_radius(g, 1.0) == pytest.approx(1.0)


def test_chebyshev_distance():
    d = chebyshev_distance(5, 5)
    assert d[2, 2] == 0 and d[0, 0] == 2 and d[4, 1] == 2 and d[2, 3] == 1


def test_pool_single_layer_support(rs):
    m = _model("pool", layers=1)
    rf = rf_gradient_map(m, rs.uniform(size=(32, 32, 3)))
    # centre pixel (16, 16) sits in token (4, 4); a 3x3 token pool covers pixels 12..23
    assert rf.values[12:24, 12:24].sum() == pytest.approx(1.0, abs=1e-15)
    assert rf.values.min() >= 0.0


def test_global_support_reaches_corners(rs):
    rf = rf_gradient_map(_model("global"), rs.uniform(size=(32, 32, 3)))
    assert rf.values[:8, :8].sum() > 0
    assert rf.values.sum() == pytest.approx(1.0)


def test_average_properties(rs):
    m = _model("window")
    imgs = [rs.uniform(size=(32, 32, 3)) for _ in range(3)]
    one = rf_average(m, imgs[:1])
    np.testing.assert_allclose(one.values, rf_gradient_map(m, imgs[0]).values, rtol=1e-12)
    a = rf_average(m, imgs)
    b = rf_average(m, imgs[::-1])
    np.testing.assert_allclose(a.values, b.values, atol=1e-15)
    assert a.count == 3
    with pytest.raises(ValueError):
        rf_average(m, [])


def test_stochastic_maps_need_and_use_rng(rs):
    m = _model("global", mode="rad")
    x = rs.uniform(size=(32, 32, 3))
    det = rf_gradient_map(m, x)
    np.testing.assert_array_equal(det.values, rf_gradient_map(m, x).values)
    s1 = rf_gradient_map(m, x, stochastic=True, rng=RngState(1))
    s2 = rf_gradient_map(m, x, stochastic=True, rng=RngState(1))
    np.testing.assert_array_equal(s1.values, s2.values)
    assert not np.allclose(s1.values, det.values)
    with pytest.raises(ValueError):
        rf_gradient_map(m, x, stochastic=True)


def test_heatmap(tmp_path):
    g = np.array([[1e-20, 1e-3], [1e-1, 1.0]])
    lv = heatmap_levels(RfMap(g / g.sum()))
    assert lv.min() == 0 and lv.max() == 255 and lv[1, 1] == 255
    assert lv[0, 1] < lv[1, 0]
    assert heatmap_levels(RfMap(np.full((2, 2), 0.25))).tolist() == [[255, 255], [255, 255]]
    write_heatmap(tmp_path / "h.pgm", RfMap(g / g.sum()))
    np.testing.assert_array_equal(read_pgm(tmp_path / "h.pgm"), lv)


def test_radius_csv(tmp_path):
    rows = [("pool", 0.95, 9.125), ("global-ram-T0.3-p0.5", 0.5, 12.0)]
    write_radius_csv(tmp_path / "r.csv", rows)
    assert read_radius_csv(tmp_path / "r.csv") == rows
    (tmp_path / "bad.csv").write_text("tag,q\n")
    with pytest.raises(ValueError):
        read_radius_csv(tmp_path / "bad.csv")
