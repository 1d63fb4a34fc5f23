import numpy as np
import pytest
from scipy import stats

from qehvi.acquisition import (
    QEHVI,
    AcqConfig,
    HviWorkspace,
    QParEGO,
    ScalarizationConfig,
    chebyshev_scalarize,
    hvi_workspace,
    parego_incumbent,
    qehvi,
    qehvi_constrained,
    qparego,
)
from qehvi.autodiff import check_gradient
from qehvi.gp import GpModel, posterior, sample
from qehvi.pareto import ParetoFront, box_decompose, hvi_inclusion_exclusion, hypervolume
from qehvi.sampling import normal_base_samples


def toy_data(seed=0, n=8, d=2, constraint=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    cols = [-np.sum((X - 0.3) ** 2, axis=1), -np.sum((X - 0.7) ** 2, axis=1)]
    if constraint is not None:
        cols.append(constraint(X))
    return X, np.column_stack(cols)


@pytest.fixture(scope="module")
def problem():
    X, Y = toy_data()
    model = GpModel().fit(X, Y)
    front = ParetoFront(Y, Y.min(axis=0) - 0.1)
    return model, front, box_decompose(front)


@pytest.fixture(scope="module")
def cproblem():
    X, Y = toy_data(seed=1, constraint=lambda X: 0.6 - X[:, 0])
    model = GpModel().fit(X, Y)
    feas = Y[:, 2] >= 0
    ref = Y[:, :2].min(axis=0) - 0.1
    front = ParetoFront(Y[feas, :2], ref)
    return model, front, box_decompose(front)


def interpolating_model(X, Y, lengthscale=0.3):
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    mean, std = Y.mean(axis=0), Y.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    hyp = {"lengthscales": [lengthscale] * X.shape[1], "output_scale": 1.0, "noise_variance": 1e-6}
    return GpModel.from_dict({"params": GpModel().get_params(), "X": X.tolist(), "Y": Y.tolist(),
                              "y_mean": mean.tolist(), "y_std": std.tolist(), "hypers": [hyp] * Y.shape[1]})


def test_matches_direct_mc_average(problem):
    model, front, decomp = problem
    xc = np.random.default_rng(2).uniform(size=(2, 2))
    base = normal_base_samples(64, 2, 2, seed=3)
    got = qehvi(model, xc, front, decomp, AcqConfig(base, front.ref)).value
    draws = sample(posterior(model, xc), base)
    assert got == pytest.approx(np.mean([hvi_inclusion_exclusion(s, decomp) for s in draws]), rel=1e-12)


def test_pending_is_marginal_value(problem):
    model, front, decomp = problem
    rng = np.random.default_rng(4)
    pend, xc = rng.uniform(size=(2, 2)), rng.uniform(size=(1, 2))
    base = normal_base_samples(64, 3, 2, seed=5)
    got = qehvi(model, xc, front, decomp, AcqConfig(base, front.ref, pending=pend)).value
    draws = sample(posterior(model, np.r_[pend, xc]), base)
    expected = np.mean([hvi_inclusion_exclusion(s, decomp) - hvi_inclusion_exclusion(s[:2], decomp) for s in draws])
    assert got == pytest.approx(expected, rel=1e-10, abs=1e-14)


def test_degenerate_posterior_equals_deterministic_hvi():
    X, Y = toy_data(seed=6, n=10)
    model = interpolating_model(X, Y)
    front = ParetoFront(Y[:6], Y.min(axis=0) - 0.1)
    decomp = box_decompose(front)
    base = normal_base_samples(32, 2, 2, seed=0)
    got = qehvi(model, X[6:8], front, decomp, AcqConfig(base, front.ref)).value
    assert got == pytest.approx(hvi_inclusion_exclusion(Y[6:8], decomp), abs=1e-3)


def test_dominated_candidate_near_zero():
    X, Y = toy_data(seed=7, n=10)
    Y[3] = Y.min(axis=0) - 0.05  # a clearly dominated observation
    model = interpolating_model(X, Y)
    front = ParetoFront(np.delete(Y, 3, axis=0), Y.min(axis=0) - 0.1)
    base = normal_base_samples(32, 1, 2, seed=0)
    assert qehvi(model, X[3:4], front, box_decompose(front), AcqConfig(base, front.ref)).value < 1e-6


def test_base_shape_mismatch(problem):
    model, front, decomp = problem
    base = normal_base_samples(8, 2, 2)
    with pytest.raises(ValueError):
        QEHVI(model, decomp, AcqConfig(base, front.ref), q=1)
    with pytest.raises(ValueError):
        AcqConfig(base, front.ref, sigmoid_temperature=0.0)


def test_nonnegative_and_deterministic(problem):
    model, front, decomp = problem
    rng = np.random.default_rng(8)
    acq = QEHVI(model, decomp, AcqConfig(normal_base_samples(32, 3, 2, seed=1), front.ref, pending=rng.uniform(size=(1, 2))), q=2)
    X = rng.uniform(size=(50, 2, 2))
    v1 = acq.value(X)
    assert np.all(v1 >= -1e-12)
    v2, g2 = acq.value_and_grad(X)
    assert v1.tobytes() == acq.value(X).tobytes()
    np.testing.assert_allclose(v2, v1, rtol=1e-14)
    assert g2.shape == X.shape


@pytest.mark.parametrize("constrained", [False, True])
def test_gradient_matches_fd(problem, cproblem, constrained):
    model, front, decomp = cproblem if constrained else problem
    O = model.n_outputs
    acq = QEHVI(model, decomp, AcqConfig(normal_base_samples(16, 2, O, seed=2), front.ref, sigmoid_temperature=0.5),
                q=2, constrained=constrained)
    rng = np.random.default_rng(9)
    for _ in range(5):
        x = rng.uniform(0.05, 0.95, size=(1, 2, 2))
        assert check_gradient(acq._graph(1), x, 1e-6) <= 1e-4


def constraint_model(value):
    X, Y = toy_data(seed=10, n=10)
    Y = np.c_[Y, np.full(len(Y), value)]
    return GpModel().fit(X, Y), X, Y


@pytest.mark.parametrize("value", [10.0, -10.0])
def test_saturated_constraint(value):
    model, X, Y = constraint_model(value)
    front = ParetoFront(Y[:, :2], Y[:, :2].min(axis=0) - 0.1)
    decomp = box_decompose(front)
    xc = np.random.default_rng(11).uniform(size=(2, 2))
    base = normal_base_samples(64, 2, 3, seed=4)
    cfg = AcqConfig(base, front.ref)
    con = qehvi_constrained(model, xc, front, decomp, cfg).value
    unc = qehvi(model, xc, front, decomp, cfg).value
    if value > 0:
        assert con == pytest.approx(unc, rel=1e-6)
    else:
        assert con <= 1e-6


def test_constrained_between_zero_and_unconstrained(cproblem):
    model, front, decomp = cproblem
    rng = np.random.default_rng(12)
    cfg = AcqConfig(normal_base_samples(32, 2, 3, seed=5), front.ref, sigmoid_temperature=0.1)
    X = rng.uniform(size=(20, 2, 2))
    unc = QEHVI(model, decomp, cfg, q=2).value(X)
    con = QEHVI(model, decomp, cfg, q=2, constrained=True).value(X)
    assert np.all(con >= -1e-12) and np.all(con <= unc + 1e-12)


def test_indicator_weighted_matches_augmented_space():
    rng = np.random.default_rng(13)
    for _ in range(20):
        P = rng.uniform(0.2, 1.0, size=(5, 2))
        ref = np.zeros(2)
        Y = rng.uniform(0.0, 1.2, size=(3, 2))
        c = rng.normal(size=(3, 1))
        feas = (c >= 0).all(axis=1).astype(float)
        lhs = hvi_inclusion_exclusion(Y, box_decompose(ParetoFront(P, ref)), weights=feas)
        lifted = ParetoFront(np.c_[P, np.ones(5)], np.r_[ref, 0.0])
        after = ParetoFront(np.vstack([lifted.points, np.c_[Y, feas]]), lifted.ref)
        rhs = hypervolume(after) - hypervolume(lifted)
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_scalarization_examples():
    s = ScalarizationConfig([1.0, 0.0], rho=0.0)
    assert chebyshev_scalarize([3.0, -7.0], s) == 3.0
    s = ScalarizationConfig([0.5, 0.5], rho=0.05)
    assert chebyshev_scalarize([2.0, 4.0], s) == pytest.approx(1.15, abs=1e-12)
    rng = np.random.default_rng(14)
    for _ in range(100):
        s = ScalarizationConfig.random(rng, 3)
        y2 = rng.normal(size=3)
        y1 = y2 + np.abs(rng.normal(size=3))
        assert chebyshev_scalarize(y1, s) >= chebyshev_scalarize(y2, s)


def test_scalarization_validation_and_normalisation():
    with pytest.raises(ValueError):
        ScalarizationConfig([0.7, 0.7])
    with pytest.raises(ValueError):
        ScalarizationConfig([1.0, 0.0], rho=-1.0)
    s = ScalarizationConfig([0.5, 0.5], rho=0.0, lower=[0.0, 10.0], upper=[2.0, 20.0])
    assert chebyshev_scalarize([2.0, 20.0], s) == pytest.approx(0.5)
    weights = np.array([ScalarizationConfig.random(np.random.default_rng(i), 3).weights for i in range(2000)])
    np.testing.assert_allclose(weights.sum(axis=1), 1.0)
    assert np.all(np.abs(weights.mean(axis=0) - 1 / 3) < 0.02)


def test_incumbent_rules():
    s = ScalarizationConfig([1.0], rho=0.0)
    Y = np.array([[1.0], [3.0], [2.0]])
    assert parego_incumbent(Y, s) == 3.0
    assert parego_incumbent(Y, s, feasible=[True, False, True]) == 2.0
    assert parego_incumbent(Y, s, feasible=[False, False, False]) == 1.0


@pytest.mark.parametrize("offset, expected", [(-1.0, 1.0), (0.5, 0.0)])
def test_parego_degenerate_posterior(offset, expected):
    X, Y = toy_data(seed=15, n=10)
    model = interpolating_model(X, Y)
    s = ScalarizationConfig([0.3, 0.7])
    incumbent = float(chebyshev_scalarize(Y[4], s)) + offset
    cfg = AcqConfig(normal_base_samples(32, 1, 2, seed=0), np.zeros(2))
    assert qparego(model, X[4:5], s, cfg, incumbent).value == pytest.approx(expected, abs=1e-3)


def test_parego_matches_closed_form_ei():
    rng = np.random.default_rng(16)
    X = rng.uniform(size=(6, 1))
    y = np.sin(6 * X[:, 0])
    model = GpModel().fit(X, y)
    x = np.array([[0.37]])
    mu, sd = model.predict(x, return_std=True)
    mu, sd = float(mu[0, 0]), float(sd[0, 0])
    inc = mu + 0.3 * sd
    z = (mu - inc) / sd
    exact = sd * (z * stats.norm.cdf(z) + stats.norm.pdf(z))
    base = normal_base_samples(8192, 1, 1, seed=17, kind="iid-normal")
    s = ScalarizationConfig([1.0], rho=0.0)
    got = qparego(model, x, s, AcqConfig(base, np.zeros(1)), inc).value
    draws = np.maximum(mu + sd * base.data.ravel() - inc, 0.0)
    se = draws.std() / np.sqrt(8192)
    assert abs(got - exact) <= 3 * se


def test_parego_pending_marginal_and_gradient(cproblem):
    model, front, _ = cproblem
    rng = np.random.default_rng(18)
    s = ScalarizationConfig.random(rng, 2, Y=model.Y_train_[:, :2])
    inc = parego_incumbent(model.Y_train_[:, :2], s, model.Y_train_[:, 2] >= 0)
    cfg = AcqConfig(normal_base_samples(32, 2, 3, seed=6), front.ref, sigmoid_temperature=0.5,
                    pending=rng.uniform(size=(1, 2)))
    acq = QParEGO(model, s, cfg, 1, inc, 2)
    X = rng.uniform(size=(30, 1, 2))
    assert np.all(acq.value(X) >= -1e-12)
    x = rng.uniform(0.1, 0.9, size=(1, 1, 2))
    assert check_gradient(acq._graph(1), x, 1e-6) <= 1e-4


def test_workspace_covers_every_subset(problem):
    _, front, decomp = problem
    draws = np.random.default_rng(19).normal(size=(4, 3, 2))
    ws = hvi_workspace(draws, decomp)
    assert isinstance(ws, HviWorkspace)
    assert ws.n_subsets == 7
    assert ws.z.shape == (4, decomp.K, 7, 2)
    seen = sorted(tuple(row) for _, idx in ws.subsets for row in idx)
    assert len(seen) == len(set(seen)) == 7


def test_pending_points_reduce_marginal_value(problem):
    model, front, decomp = problem
    rng = np.random.default_rng(20)
    for _ in range(3):
        x = rng.uniform(size=(1, 2))
        a, b = rng.uniform(size=(2, 1, 2))
        vals = []
        for pend in (None, a, np.r_[a, b]):
            p = 0 if pend is None else len(pend)
            cfg = AcqConfig(normal_base_samples(2048, p + 1, 2, seed=21), front.ref, pending=pend)
            vals.append(qehvi(model, x, front, decomp, cfg).value)
        assert vals[1] <= vals[0] * 1.02 + 1e-9
        assert vals[2] <= vals[1] * 1.02 + 1e-9


def test_unbiased_gradient(problem):
    model, front, decomp = problem
    x = np.array([[0.45, 0.55]])
    ref_cfg = AcqConfig(normal_base_samples(2**17, 1, 2, seed=0), front.ref)
    ref_grad = qehvi(model, x, front, decomp, ref_cfg).gradient
    grads = np.array([
        qehvi(model, x, front, decomp, AcqConfig(normal_base_samples(128, 1, 2, seed=s, kind="iid-normal"),
                                                 front.ref)).gradient
        for s in range(200)
    ])
    se = grads.std(axis=0, ddof=1) / np.sqrt(len(grads))
    assert np.all(np.abs(grads.mean(axis=0) - ref_grad) <= 3 * se)


def test_mc_error_rate_is_root_n(problem):
    model, front, decomp = problem
    x = np.array([[0.45, 0.55]])
    truth = qehvi(model, x, front, decomp, AcqConfig(normal_base_samples(2**17, 1, 2, seed=1), front.ref)).value
    sizes = [64, 256, 1024, 4096]
    rmse = []
    for n in sizes:
        errs = [qehvi(model, x, front, decomp,
                      AcqConfig(normal_base_samples(n, 1, 2, seed=s, kind="iid-normal"), front.ref)).value - truth
                for s in range(40)]
        rmse.append(np.sqrt(np.mean(np.square(errs))))
    slope = np.polyfit(np.log(sizes), np.log(rmse), 1)[0]
    assert -0.7 <= slope <= -0.3
