import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssimadv.metrics import (
    ConstraintThresholds,
    DimensionError,
    SsimParams,
    constraint_gradients,
    constraints,
    image_stats,
    lp_distortion,
    nmse,
    ssim,
)

P = SsimParams()


def fd_gradient(f, y, h=1e-4):
    g = np.zeros_like(y)
    it = np.nditer(y, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        g[i] = (f(yp) - f(ym)) / (2 * h)
    return g


def test_ssim_params_constants():
    assert P.c1 == pytest.approx(1e-4)
    assert P.c2 == pytest.approx(9e-4)
    assert SsimParams(255.0).c2 == pytest.approx((0.03 * 255) ** 2)
    with pytest.raises(ValueError):
        SsimParams(0.0)


def test_thresholds_validated():
    with pytest.raises(ValueError):
        ConstraintThresholds(1.5, 0.5)
    with pytest.raises(ValueError):
        ConstraintThresholds(0.5, -0.1)


def test_image_stats_examples():
    s = image_stats([0.0, 1.0])
    assert s.mean == 0.5 and s.variance == 0.25 and s.covariance is None
    assert image_stats([0.0, 1.0], [1.0, 0.0]).covariance == -0.25
    x = np.random.default_rng(1).random(50)
    s = image_stats(x, x)
    assert s.covariance == pytest.approx(s.variance, abs=1e-15)
    with pytest.raises(DimensionError):
        image_stats([0.0, 1.0], [1.0, 0.0, 0.5])


def test_ssim_examples():
    z, o = np.zeros((4, 4)), np.ones((4, 4))
    assert ssim(z, o) == pytest.approx(1e-4 / 1.0001, rel=1e-12)
    assert ssim([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-0.4991 / 0.5009, rel=1e-12)
    assert round(ssim([0.0, 1.0], [1.0, 0.0]), 4) == -0.9964


def test_ssim_errors():
    with pytest.raises(DimensionError):
        ssim(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        ssim(np.zeros((0, 3)), np.zeros((0, 3)))


def test_ssim_rgb_is_channel_average():
    rng = np.random.default_rng(2)
    x, y = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    per = [ssim(x[..., k], y[..., k]) for k in range(3)]
    assert ssim(x, y) == pytest.approx(np.mean(per), rel=1e-13)


image_pairs = st.integers(1, 8).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, (n, n), elements=st.floats(0, 1)),
        arrays(np.float64, (n, n), elements=st.floats(0, 1)),
    )
)


@settings(max_examples=200, deadline=None)
@given(image_pairs)
def test_ssim_properties(pair):
    x, y = pair
    s = ssim(x, y)
    assert s == ssim(y, x)
    assert ssim(x, x) == 1.0
    assert -1.0 < s <= 1.0


def test_nmse_examples():
    u = np.array([0.2, -0.7, 3.0])
    assert nmse(u, u, 0.5) == 0.0
    assert nmse([1.0], [-1.0], 0.0) == 2.0
    assert nmse([0.0], [1.0], 1.0) == 0.5
    with pytest.raises(DimensionError):
        nmse([1.0, 2.0], [1.0], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 2.0))
def test_nmse_quasiconvex_on_halfspace(seed, C):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(6)
    us = []
    while len(us) < 2:
        u = rng.standard_normal(6) * 2
        if u @ v >= -C / 2:
            us.append(u)
    mid = nmse((us[0] + us[1]) / 2, v, C)
    assert mid <= max(nmse(us[0], v, C), nmse(us[1], v, C)) + 1e-9
    assert nmse(us[0], v, C) >= 0


def test_constraints_examples():
    rng = np.random.default_rng(3)
    x = rng.random((6, 6))
    t = ConstraintThresholds(0.7, 0.8)
    g = constraints(x, x, P, t)
    assert g[0] == pytest.approx(0.7 - 1) and g[1] == pytest.approx(0.8 - 1)
    y = rng.random((6, 6))
    assert constraints(y, x, P, t)[2] <= 0
    half = np.full((2, 2), 0.5)
    assert constraints(half, half, P, t)[2] == pytest.approx(-0.5001, abs=1e-15)


def test_constraints_imply_ssim_bound():
    rng = np.random.default_rng(4)
    t = ConstraintThresholds(0.9, 0.6)
    hits = 0
    for _ in range(500):
        x = rng.random((5, 5))
        y = np.clip(x + rng.normal(0, 0.15, x.shape), 0, 1)
        g = constraints(y, x, P, t)
        if g[0] <= 0 and g[1] <= 0:
            hits += 1
            assert ssim(x, y) >= t.zeta1 * t.zeta2 - 1e-12
    assert hits > 50


@pytest.mark.parametrize("shape", [(5, 5), (4, 3, 3)])
def test_constraint_gradients_match_finite_differences(shape):
    rng = np.random.default_rng(5)
    t = ConstraintThresholds(0.8, 0.8)
    for _ in range(5):
        x, y = rng.random(shape), rng.random(shape)
        grads = constraint_gradients(y, x, P, t)
        for i in range(4):
            fd = fd_gradient(lambda yy: constraints(yy, x, P, t)[i], y)
            err = np.linalg.norm(grads[i] - fd) / max(np.linalg.norm(fd), 1e-12)
            assert err <= 1e-4, (i, err)


def test_constraint_gradient_closed_forms():
    rng = np.random.default_rng(6)
    x, y = rng.random((4, 4)), rng.random((4, 4))
    g = constraint_gradients(y, x)
    np.testing.assert_allclose(g[2], -2 * x.mean() / x.size)
    np.testing.assert_array_equal(constraint_gradients(x, x)[0], 0.0)


def test_lp_distortion():
    d = [0.3, -0.4]
    assert lp_distortion(d, 1) == pytest.approx(0.7)
    assert lp_distortion(d, 2) == pytest.approx(0.5)
    assert lp_distortion(d, np.inf) == pytest.approx(0.4)
    for p in (1, 2, np.inf):
        assert lp_distortion(np.zeros(4), p) == 0.0
    with pytest.raises(ValueError):
        lp_distortion(d, 3)
