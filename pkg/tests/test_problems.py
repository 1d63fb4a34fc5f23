import math

import numpy as np
import pytest

from qehvi.pareto import ParetoFront, hypervolume, pareto_filter
from qehvi.problems import (
    PROBLEMS,
    branin_currin,
    branin_currin_constraint,
    c2_constraint,
    dtlz2,
    get_problem,
    load_front,
    vehicle_safety,
    with_noise,
)
from qehvi.sampling import sobol


def sobol_points(problem, n=10_000, seed=7):
    return problem.from_unit(sobol(n, problem.d, seed=seed))


def test_branin_global_minima():
    # Branin's three global minimisers in the original coordinates
    for u, v in [(-np.pi, 12.275), (np.pi, 2.275), (9.42478, 2.475)]:
        f = branin_currin([[(u + 5) / 15, v / 15]])
        assert f[0, 0] == pytest.approx(0.397887, abs=1e-5)


def test_currin_example_and_limit():
    assert branin_currin([[0.0, 0.5]])[0, 1] == pytest.approx((1 - math.exp(-1)) * 3, abs=1e-12)
    assert branin_currin([[0.0, 0.5]])[0, 1] == pytest.approx(1.896362, abs=1e-6)
    edge = branin_currin([[0.3, 0.0], [0.3, 1e-300]])
    assert np.all(np.isfinite(edge))
    assert edge[0, 1] == pytest.approx(edge[1, 1], rel=1e-12)


def test_disk_constraint_centre():
    assert branin_currin_constraint([[0.5, 0.5]])[0, 0] == 50.0


def test_reference_points_negated():
    np.testing.assert_array_equal(get_problem("branin_currin").ref_point, [-18.0, -6.0])
    np.testing.assert_array_equal(get_problem("constrained_branin_currin").ref_point, [-90.0, -10.0])
    np.testing.assert_array_equal(get_problem("dtlz2", d=6, M=3).ref_point, [-1.1] * 3)
    np.testing.assert_array_equal(get_problem("c2_dtlz2").ref_point, [-1.1, -1.1])
    np.testing.assert_array_equal(get_problem("vehicle_safety").ref_point,
                                  [-1864.72022, -11.81993945, -0.2903999384])


def test_dtlz2_on_front():
    rng = np.random.default_rng(0)
    for M in (2, 3, 4):
        x = rng.uniform(size=(20, 7))
        x[:, M - 1:] = 0.5
        np.testing.assert_allclose(np.linalg.norm(dtlz2(x, M), axis=1), 1.0, atol=1e-12)


def test_dtlz2_validation():
    with pytest.raises(ValueError):
        dtlz2(np.zeros((1, 3)), 4)
    with pytest.raises(ValueError):
        dtlz2(np.zeros((1, 3)), 1)


def test_dtlz2_true_hv_analytic_and_mc():
    p = get_problem("dtlz2", d=6, M=2)
    assert p.true_front_hv == pytest.approx(1.21 - math.pi / 4, abs=1e-12)
    assert p.true_front_hv == pytest.approx(0.424602, abs=1e-6)
    # MC: points of [0, 1.1]^2 outside the unit quarter disc are dominated by the front
    u = np.random.default_rng(1).uniform(0, 1.1, size=(10**6, 2))
    inside = np.linalg.norm(u, axis=1) >= 1
    est, se = 1.21 * inside.mean(), 1.21 * inside.std() / 1e3
    assert abs(est - p.true_front_hv) < 4 * se


def test_dtlz2_m3_true_hv():
    assert get_problem("dtlz2", d=6, M=3).true_front_hv == pytest.approx(1.331 - math.pi / 6, abs=1e-12)


def test_c2_constraint_regions():
    # the arcs near the axes and around the diagonal are feasible, the gaps are not
    angles = np.array([0.0, 0.15, 0.5, np.pi / 4, 1.1, np.pi / 2])
    f = np.c_[np.cos(angles), np.sin(angles)]
    feasible = c2_constraint(f)[:, 0] >= 0
    assert feasible.tolist() == [True, True, False, True, False, True]


def test_c2_true_hv_matches_dense_arcs():
    theta = np.linspace(0, np.pi / 2, 400_001)
    f = np.c_[np.cos(theta), np.sin(theta)]
    pts = -f[c2_constraint(f)[:, 0] >= 0]
    dense = hypervolume(ParetoFront(pts, np.array([-1.1, -1.1])))
    hv = get_problem("c2_dtlz2").true_front_hv
    assert dense <= hv + 1e-12
    assert hv - dense < 1e-4


def test_vehicle_examples():
    assert vehicle_safety(np.ones((1, 5)))[0, 0] == pytest.approx(1661.707823, abs=1e-6)
    rng = np.random.default_rng(2)
    x, y = rng.uniform(1, 3, size=(2, 10, 5))
    f = lambda z: vehicle_safety(z)[:, 0]  # noqa: E731
    np.testing.assert_allclose(f(x) + f(y) - 2 * f((x + y) / 2), 0, atol=1e-9)


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_outputs_finite_and_negated(name):
    p = get_problem(name)
    X = sobol_points(p)
    Y, C = p.evaluate(X)
    f, c = p.raw(X)
    assert Y.shape == (len(X), p.M) and C.shape == (len(X), p.V)
    assert np.all(np.isfinite(Y)) and np.all(np.isfinite(C))
    np.testing.assert_array_equal(Y, -f)
    np.testing.assert_array_equal(p.evaluate_stacked(X), np.hstack([Y, C]))


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_reference_point_dominated_by_some_sample(name):
    p = get_problem(name)
    Y, C = p.evaluate(sobol_points(p))
    ok = np.all(C >= 0, axis=1)
    assert np.any(np.all(Y[ok] > p.ref_point, axis=1))


@pytest.mark.parametrize("name", ["branin_currin", "constrained_branin_currin", "vehicle_safety"])
def test_front_fixture(name):
    points, hv, header = load_front(name)
    p = get_problem(name)
    assert header["problem"] == name
    assert hv == p.true_front_hv
    assert len(pareto_filter(points)) == len(points) == int(header["points"])
    assert hypervolume(ParetoFront(points, p.ref_point)) == pytest.approx(hv, rel=1e-12)
    # a fresh feasible sample never beats the stored front
    Y, C = p.evaluate(sobol_points(p, 4096, seed=11))
    sample = hypervolume(ParetoFront(Y[np.all(C >= 0, axis=1)], p.ref_point))
    assert sample < hv


def test_unit_mapping_roundtrip():
    p = get_problem("vehicle_safety")
    U = np.random.default_rng(3).uniform(size=(5, 5))
    X = p.from_unit(U)
    assert np.all((X >= 1) & (X <= 3))
    np.testing.assert_allclose(p.to_unit(X), U, atol=1e-15)


def test_noise_zero_is_identity():
    p = get_problem("branin_currin")
    X = sobol_points(p, 16)
    np.testing.assert_array_equal(with_noise(p, 0.0, seed=1).evaluate(X)[0], p.evaluate(X)[0])


def test_noise_scale():
    p = get_problem("branin_currin")
    noisy = with_noise(p, 0.01, seed=4)
    x = np.full((10_000, 2), 0.3)
    draws = noisy.evaluate(x)[0]
    f, _ = p.raw(p.from_unit(sobol(2**14, 2, seed=0)))
    target = 0.01 * (f.max(axis=0) - f.min(axis=0))
    np.testing.assert_allclose(draws.std(axis=0), target, rtol=0.1)
    assert np.all(np.abs(draws.mean(axis=0) - p.evaluate(x[:1])[0][0]) < 4 * target / 100)


def test_noise_reproducible():
    p = get_problem("dtlz2")
    X = sobol_points(p, 8)
    a = with_noise(p, 0.05, seed=9).evaluate(X)[0]
    b = with_noise(p, 0.05, seed=9).evaluate(X)[0]
    c = with_noise(p, 0.05, seed=10).evaluate(X)[0]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_rejects_negative():
    with pytest.raises(ValueError):
        with_noise(get_problem("dtlz2"), -0.1)


def test_unknown_problem():
    with pytest.raises(KeyError):
        get_problem("zdt1")


def test_input_width_checked():
    with pytest.raises(ValueError):
        get_problem("branin_currin").evaluate(np.zeros((2, 3)))
