import numpy as np
import pytest

from nonlocal_crf.chain import ChainModel, MarginalVector, layout_size, random_model, sufficient_statistics
from nonlocal_crf.energies import (
    EnergySpec, LinearMeasurement, MeanFieldEnergy, MeasurementEnergy, PoissonEnergy, PrototypeEnergy,
    QuadraticEnergy, ZeroEnergy, check_gradient, smoothed_hinge,
)
from nonlocal_crf.oracle import marginal_arrays, marginals


def _interior(rng, n, k, scale=0.7):
    return marginals(random_model(rng, n, k, scale)).marginals.values


def _measurements(rng, n, k, m=3, psi=None):
    ms = [LinearMeasurement(rng.normal(size=layout_size(n, k)), float(rng.normal())) for _ in range(m)]
    return MeasurementEnergy(ms, rng.uniform(0.5, 2.0, size=m) if psi is None else psi)


@pytest.mark.parametrize("z,value,deriv", [(1.5, 0.0, 0.0), (0.0, 0.5, -1.0), (0.5, 0.125, -0.5), (-1.0, 1.5, -1.0)])
def test_smoothed_hinge(z, value, deriv):
    assert smoothed_hinge(z) == pytest.approx((value, deriv))


def test_smoothed_hinge_is_c1():
    z = np.linspace(-2, 2, 4001)
    v, d = smoothed_hinge(z)
    assert np.all(v >= 0) and np.all((d >= -1) & (d <= 0))
    assert np.max(np.abs(np.diff(d))) < 2e-3


def test_measurement_zero_psi(rng):
    e = _measurements(rng, 3, 2, psi=np.zeros(3))
    v, g = e.value_and_grad(_interior(rng, 3, 2))
    assert v == 0.0 and not np.any(g)


def test_measurement_scalar_example():
    n, k = 2, 2
    mu = MarginalVector.uniform(n, k).values
    a = np.zeros(layout_size(n, k))
    a[0] = 1.0  # a . mu = 0.5
    e = MeasurementEnergy([LinearMeasurement(a, 0.0)], [2.0])
    v, g = e.value_and_grad(mu)
    assert v == pytest.approx(0.25)
    np.testing.assert_allclose(g, -a)


def test_measurement_psi_grad_zero_cases(rng):
    n, k = 3, 2
    s = sufficient_statistics((n, k), [0, 1, 0]).values
    a = np.zeros(layout_size(n, k))
    a[0] = 1.0
    # a . s == a . mu
    mu = s * 0.5 + 0.5 * MarginalVector.uniform(n, k).values
    mu[0], mu[1] = 1.0, 0.0
    e = MeasurementEnergy([LinearMeasurement(a, -0.5)], [1.0])
    assert e.psi_grad(mu, s)[0] == pytest.approx(0.0)
    # flat hinge region
    e = MeasurementEnergy([LinearMeasurement(a, 5.0)], [1.0])
    assert e.psi_grad(_interior(rng, n, k), s)[0] == 0.0


def _log_q(theta, energy, mu, y):
    rho = ChainModel(theta.n, theta.k, theta.values - energy.grad_mu(mu))
    s = sufficient_statistics(rho, y).values
    _, log_z = marginal_arrays(rho)
    return float(rho.values @ s - log_z)


def test_measurement_psi_grad_matches_surrogate(rng):
    for _ in range(10):
        n, k = 3, 3
        theta = random_model(rng, n, k)
        e = _measurements(rng, n, k)
        mu = _interior(rng, n, k)
        y = rng.integers(k, size=n)
        s = sufficient_statistics((n, k), y).values
        rho = ChainModel(n, k, theta.values - e.grad_mu(mu))
        m = marginal_arrays(rho)[0]
        g = e.psi_grad(mu, s, m)
        h = 1e-6
        for j in range(e.num_psi()):
            dp = np.zeros(e.num_psi())
            dp[j] = h
            fd = (_log_q(theta, e.with_psi(e.psi + dp), mu, y) - _log_q(theta, e.with_psi(e.psi - dp), mu, y)) / (2 * h)
            assert g[j] == pytest.approx(fd, abs=1e-6)


def test_mean_field_examples(rng):
    n, k = 3, 2
    e = MeanFieldEnergy(n, k, [((0, 2), np.zeros((2, 2)))])
    v, g = e.value_and_grad(_interior(rng, n, k))
    assert v == 0.0 and not np.any(g)
    e = MeanFieldEnergy(n, k, [((0, 2), np.eye(2))])
    assert e.value(MarginalVector.uniform(n, k).values) == pytest.approx(-0.5)


def test_mean_field_gradient(rng):
    e = MeanFieldEnergy(4, 2, [((0, 1, 3), rng.normal(size=(2, 2, 2)))])
    rep = check_gradient(e, _interior(rng, 4, 2))
    assert rep.max_rel_error < 1e-5


def test_mean_field_validation():
    with pytest.raises(ValueError):
        MeanFieldEnergy(3, 2, [((0, 0), np.zeros((2, 2)))])
    with pytest.raises(ValueError):
        MeanFieldEnergy(3, 2, [((0, 5), np.zeros((2, 2)))])
    with pytest.raises(ValueError):
        MeanFieldEnergy(3, 2, [((0, 1), np.zeros((2, 3)))])


def test_prototype_examples():
    n, k = 2, 2
    mu = MarginalVector.uniform(n, k).values
    e = PrototypeEnergy("unigram", [[2.0, 0.0]], 1.5, k)
    assert e.value(mu) == pytest.approx(3.0)
    exact = PrototypeEnergy("unigram", [[1.0, 1.0], [2.0, 0.0]], 1.5, k)
    v, g = exact.value_and_grad(mu)
    assert v == 0.0 and not np.any(g)
    assert exact.nearest(mu) == (0.0, 0)


def test_prototype_full_mode_buckets(rng):
    k = 2
    protos = [np.eye(k)[[0, 1]].ravel(), np.eye(k)[[1, 1, 0]].ravel()]
    e = PrototypeEnergy("full", protos, 1.0, k)
    assert e.nearest(_interior(rng, 3, k))[1] == 1
    with pytest.raises(ValueError):
        e.value(_interior(rng, 4, k))


def test_prototype_gradient_away_from_ties(rng):
    k = 3
    protos = [rng.uniform(0, 3, size=k) for _ in range(3)]
    e = PrototypeEnergy("unigram", protos, 2.0, k)
    for _ in range(10):
        rep = check_gradient(e, _interior(rng, 3, k))
        assert rep.max_rel_error < 1e-4


def test_prototype_rejects_empty():
    with pytest.raises(ValueError):
        PrototypeEnergy("unigram", [], 1.0, 2)


def test_poisson_examples():
    e = PoissonEnergy(np.array([[3.0, 0.0]]), 10.0)
    g = e.grad_mu(np.array([0.5, 0.5]))
    assert g[0] == pytest.approx(4.0)
    assert g[1] == pytest.approx(10.0)
    e = PoissonEnergy(np.array([[2.0, 8.0]]), 10.0)
    np.testing.assert_allclose(e.grad_mu(np.array([0.2, 0.8])), 0.0, atol=1e-12)


def test_poisson_validation():
    with pytest.raises(ValueError):
        PoissonEnergy(np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        PoissonEnergy(-np.ones((2, 2)), 1.0)


def test_poisson_zero_counts_tiny_scale(rng):
    e = PoissonEnergy(np.zeros((3, 2)), 1e-6)
    v, g = e.value_and_grad(np.zeros(layout_size(3, 2)))
    assert np.isfinite(v) and np.all(np.isfinite(g))


@pytest.mark.parametrize("make", [
    lambda rng: ZeroEnergy(),
    lambda rng: QuadraticEnergy(rng.uniform(size=layout_size(3, 2)), 2.0),
    lambda rng: _measurements(rng, 3, 2),
    lambda rng: PoissonEnergy(rng.poisson(5, size=(3, 2)).astype(float), 10.0),
])
def test_gradients_and_convexity(rng, make):
    e = make(rng)
    for _ in range(20):
        assert check_gradient(e, _interior(rng, 3, 2)).max_rel_error < 1e-4
    assert e.is_convex()
    for _ in range(100):
        m1, m2 = _interior(rng, 3, 2), _interior(rng, 3, 2)
        for lam in (0.25, 0.5, 0.75):
            lhs = e.value(lam * m1 + (1 - lam) * m2)
            assert lhs <= lam * e.value(m1) + (1 - lam) * e.value(m2) + 1e-10


def test_smoothness_bound_dominates_curvature(rng):
    e = _measurements(rng, 3, 2)
    bound = e.smoothness_bound()
    dim = layout_size(3, 2)
    for _ in range(20):
        mu = _interior(rng, 3, 2)
        h = 1e-5
        hess = np.empty((dim, dim))
        for i in range(dim):
            d = np.zeros(dim)
            d[i] = h
            hess[:, i] = (e.grad_mu(mu + d) - e.grad_mu(mu - d)) / (2 * h)
        assert np.linalg.eigvalsh(0.5 * (hess + hess.T)).max() <= bound + 1e-6


def test_energy_spec_round_trip(tmp_path):
    spec = EnergySpec("measurement", {"measurements": [
        {"label_weights": [1.0, -1.0], "offset": 1.0},
        {"entries": [[0, 1, 2.0], [3, 1, -1.0]], "offset": 0.0},
    ], "psi": [0.5, 1.0]})
    path = tmp_path / "energy.json"
    spec.save(path)
    back = EnergySpec.load(path)
    assert back.to_dict() == spec.to_dict()
    e = back.build(3, 2)
    np.testing.assert_array_equal(e.psi, [0.5, 1.0])
    a = e.measurements[1].a
    assert a[1] == 2.0 and a[3 * 2 + 1] == -1.0


def test_energy_spec_rejects_bad_entries():
    spec = EnergySpec("measurement", {"measurements": [{"entries": [[9, 0, 1.0]]}]})
    with pytest.raises(ValueError):
        spec.build(3, 2)
    with pytest.raises(ValueError):
        EnergySpec.from_dict({"schema": "other/9", "family": "zero"})
