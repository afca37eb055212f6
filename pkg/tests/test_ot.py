import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otpel.errors import ConfigError, ContractError, ShapeError
from otpel.ot import (
    BandwidthFallbackWarning,
    DistanceMetric,
    median_heuristic_bandwidth,
    mmd,
    mmd_squared,
    ot_loss,
    swd,
)
from otpel.tensor import Tensor, finite_diff_grad
from conftest import rel_err


def w2_squared_1d(u, v):
    """Exact 1-D squared Wasserstein-2 between equal-size empirical measures."""
    return float(np.mean((np.sort(u) - np.sort(v)) ** 2))


def swd_quadrature_2d(u, v, n_angles=20000):
    """Sliced W2^2 in 2-D by midpoint quadrature over projection angle."""
    theta = (np.arange(n_angles) + 0.5) * np.pi / n_angles
    dirs = np.stack([np.cos(theta), np.sin(theta)])
    pu, pv = np.sort(u @ dirs, axis=0), np.sort(v @ dirs, axis=0)
    return float(np.mean((pu - pv) ** 2))


def mmd2_pairwise_oracle(u, v, sigma):
    k = lambda a, b: np.exp(-np.sum((a - b) ** 2) / (2 * sigma**2))
    kuu = np.mean([k(a, b) for a in u for b in u])
    kvv = np.mean([k(a, b) for a in v for b in v])
    kuv = np.mean([k(a, b) for a in u for b in v])
    return kuu + kvv - 2 * kuv


# -- SWD ---------------------------------------------------------------


def test_swd_identical_clouds_is_zero(rng):
    u = rng.normal(size=(30, 4))
    assert swd(u, u, rng=np.random.default_rng(0)).item() == 0.0


def test_swd_one_dimensional_example():
    u = np.array([[0.0], [1.0]])
    v = np.array([[2.0], [3.0]])
    assert swd(u, v, n_projections=5).item() == pytest.approx(4.0, abs=1e-12)


def test_swd_one_dimensional_exact_on_random_pairs():
    for seed in range(50):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 40))
        u, v = r.normal(size=(n, 1)), r.normal(loc=1.0, size=(n, 1)) * 2
        got = swd(u, v, n_projections=7, rng=r).item()
        assert abs(got - w2_squared_1d(u.ravel(), v.ravel())) < 1e-10


def test_swd_matches_independent_quadrature():
    r = np.random.default_rng(42)
    u = r.normal(size=(60, 2))
    v = r.normal(size=(60, 2)) @ np.array([[2.0, 0.3], [0.0, 0.5]]) + np.array([1.0, -0.5])
    est = swd(u, v, n_projections=2000, rng=np.random.default_rng(7)).item()
    assert abs(est - swd_quadrature_2d(u, v)) / swd_quadrature_2d(u, v) < 0.02


def test_swd_shape_and_empty_errors(rng):
    with pytest.raises(ShapeError):
        swd(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))
    with pytest.raises(ContractError):
        swd(np.zeros((0, 2)), rng.normal(size=(4, 2)))


def test_swd_unequal_sizes_are_subsampled(rng):
    u, v = rng.normal(size=(10, 3)), rng.normal(size=(25, 3))
    value = swd(u, v, rng=np.random.default_rng(1)).item()
    assert np.isfinite(value) and value > 0


def test_swd_variance_shrinks_with_more_projections(rng):
    u, v = rng.normal(size=(40, 5)), rng.normal(loc=0.5, size=(40, 5))
    spread = lambda L: np.std([swd(u, v, n_projections=L, rng=np.random.default_rng(s)).item() for s in range(30)])
    assert spread(200) < spread(20)


def test_swd_gradient_matches_finite_differences():
    for seed in range(20):
        r = np.random.default_rng(seed)
        u0, v = r.normal(size=(12, 3)), r.normal(loc=0.7, size=(12, 3))
        f = lambda t: swd(t, v, n_projections=30, rng=np.random.default_rng(seed))
        u = Tensor(u0, requires_grad=True)
        f(u).backward()
        assert rel_err(u.grad, finite_diff_grad(f, u0)) < 1e-3


def test_swd_gradient_with_exact_ties_is_finite():
    u = Tensor(np.zeros((6, 2)), requires_grad=True)
    swd(u, np.ones((6, 2)), rng=np.random.default_rng(0)).backward()
    assert np.all(np.isfinite(u.grad))


# -- MMD ---------------------------------------------------------------


def test_mmd_identical_clouds_is_zero(rng):
    u = rng.normal(size=(25, 3))
    assert mmd(u, u).item() == 0.0


def test_mmd_single_point_closed_form():
    expected = 2.0 - 2.0 * np.exp(-0.5)
    got = mmd_squared(np.array([[0.0]]), np.array([[1.0]]), bandwidth=1.0).item()
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.786939) < 1e-6
    assert mmd(np.array([[0.0]]), np.array([[1.0]]), bandwidth=1.0).item() == pytest.approx(0.887096, abs=1e-6)


def test_mmd_far_apart_tends_to_sqrt_two(rng):
    u = rng.normal(scale=1e-4, size=(5, 2))
    v = u + np.array([100.0, 0.0])
    assert abs(mmd(u, v, bandwidth=1.0).item() - np.sqrt(2.0)) < 1e-6


def test_mmd_matches_pairwise_enumeration(rng):
    u, v = rng.normal(size=(7, 3)), rng.normal(loc=0.4, size=(9, 3))
    assert abs(mmd_squared(u, v, bandwidth=1.3).item() - mmd2_pairwise_oracle(u, v, 1.3)) < 1e-12


def test_mmd_rejects_bad_bandwidth(rng):
    with pytest.raises(ConfigError):
        mmd(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), bandwidth=0.0)
    with pytest.raises(ConfigError):
        DistanceMetric(kind="MMD", bandwidth=-1.0)


def test_mmd_non_decreasing_under_translation(rng):
    u = rng.normal(size=(20, 3))
    sigma = 1.0
    values = [mmd(u, u + np.array([t, 0.0, 0.0]), bandwidth=sigma).item() for t in np.linspace(0, 3 * sigma, 31)]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_mmd_gradient_matches_finite_differences():
    for seed in range(20):
        r = np.random.default_rng(seed)
        u0, v = r.normal(size=(8, 3)), r.normal(loc=0.8, size=(10, 3))
        f = lambda t: mmd(t, v, bandwidth=1.5)
        u = Tensor(u0, requires_grad=True)
        f(u).backward()
        assert rel_err(u.grad, finite_diff_grad(f, u0)) < 1e-4


# -- median heuristic ----------------------------------------------------


def test_median_heuristic_single_pair():
    assert median_heuristic_bandwidth(np.array([[0.0]]), np.array([[2.0]])) == 2.0


def test_median_heuristic_degenerate_falls_back():
    with pytest.warns(BandwidthFallbackWarning):
        assert median_heuristic_bandwidth(np.ones((3, 2)), np.ones((2, 2))) == 1.0


def test_median_heuristic_matches_enumeration(rng):
    pts = rng.normal(size=(20, 3))
    dists = sorted(np.linalg.norm(pts[i] - pts[j]) for i in range(20) for j in range(i + 1, 20))
    lower_median = dists[(len(dists) - 1) // 2]
    assert median_heuristic_bandwidth(pts[:8], pts[8:]) == lower_median


def test_median_heuristic_needs_two_points():
    with pytest.raises(ContractError):
        median_heuristic_bandwidth(np.zeros((1, 2)), np.zeros((0, 2)))


# -- metric object and OT loss -------------------------------------------------


def test_metric_kind_is_validated():
    with pytest.raises(ConfigError):
        DistanceMetric(kind="sinkhorn")
    assert DistanceMetric(kind="mmd").kind == "MMD"


@pytest.mark.parametrize("kind", ["SWD", "MMD"])
def test_metric_axioms_on_random_pairs(kind):
    metric = DistanceMetric(kind=kind, n_projections=20)
    for seed in range(100):
        r = np.random.default_rng(seed)
        u, v = r.normal(size=(10, 3)), r.normal(loc=r.normal(), size=(10, 3))
        duv = metric(u, v, np.random.default_rng(seed)).item()
        dvu = metric(v, u, np.random.default_rng(seed)).item()
        assert duv >= 0
        assert abs(duv - dvu) <= 1e-12
        assert metric(u, u, np.random.default_rng(seed)).item() == 0.0


def test_fixed_projections_repeat(rng):
    metric = DistanceMetric(kind="SWD", fixed_projections=True, seed=3)
    u, v = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    a = metric(u, v, np.random.default_rng(1)).item()
    b = metric(u, v, np.random.default_rng(2)).item()
    assert a == b


def test_ot_loss_coincident_clouds(rng):
    u = rng.normal(size=(10, 3))
    assert ot_loss(Tensor(u), u, DistanceMetric()).item() == 0.0


@pytest.mark.parametrize("kind", ["SWD", "MMD"])
def test_ot_loss_is_negative_for_distinct_clouds(rng, kind):
    u, v = rng.normal(size=(10, 3)), rng.normal(loc=1.0, size=(10, 3))
    assert ot_loss(Tensor(u), v, DistanceMetric(kind=kind)).item() < 0


def test_ot_loss_rejects_differentiable_source(rng):
    src = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ot_loss(Tensor(rng.normal(size=(4, 2))), src, DistanceMetric())


@pytest.mark.parametrize("kind", ["SWD", "MMD"])
def test_ot_loss_gradient_wrt_parameters(kind):
    metric = DistanceMetric(kind=kind, n_projections=25, bandwidth=2.0 if kind == "MMD" else None)
    for seed in range(20):
        r = np.random.default_rng(seed)
        h_t, h_s = r.normal(size=(10, 3)), r.normal(loc=0.5, size=(10, 3))
        theta0 = np.eye(3) + 0.1 * r.normal(size=(3, 3))
        f = lambda th: ot_loss(Tensor(h_t) @ th, h_s, metric, np.random.default_rng(seed))
        theta = Tensor(theta0, requires_grad=True)
        f(theta).backward()
        assert rel_err(theta.grad, finite_diff_grad(f, theta0)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(u=arrays(np.float64, (6, 2), elements=st.floats(-10, 10)), shift=st.floats(0.1, 5.0))
def test_property_distances_non_negative(u, shift):
    v = u + shift
    for kind in ("SWD", "MMD"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BandwidthFallbackWarning)
            d = DistanceMetric(kind=kind)(u, v, np.random.default_rng(0)).item()
        assert d >= 0 and np.isfinite(d)
