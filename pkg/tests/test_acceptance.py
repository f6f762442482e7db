"""End-to-end acceptance checks, one test per criterion.

Each test prints and records a single ``criterion N: PASS|FAIL ...`` line;
the lines are repeated in the pytest terminal summary.  Criterion 11
aggregates the feasibility counts collected by criteria 3-9, so the tests
run in file order.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from nonlocal_crf.benchmarks import constraint_energy, convex_suite, run_experiment
from nonlocal_crf.chain import all_labelings, dot, layout_size, random_model, score
from nonlocal_crf.energies import (
    LinearMeasurement, MeanFieldEnergy, MeasurementEnergy, PoissonEnergy, PrototypeEnergy, QuadraticEnergy,
    check_gradient,
)
from nonlocal_crf.exact import (
    enumerate_distribution, enumerate_log_partition, exact_entropy, exact_marginals, solve_augmented_exact,
)
from nonlocal_crf.inference import SolverConfig, fixed_point_residual, objective_value, solve
from nonlocal_crf.learning import (
    Example, MeanMapFeatures, Model, PsiParametrization, ThetaParametrization, surrogate_terms, theta_gradient,
    theta_of,
)
from nonlocal_crf.oracle import bethe_entropy, log_partition, map_decode, marginals

FEASIBILITY = {"checked": 0, "infeasible": 0}
SOLVERS = ("rda", "md", "acc-rda")


def _record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def _count(trace):
    checked, bad = trace.feasibility_counts()
    FEASIBILITY["checked"] += checked
    FEASIBILITY["infeasible"] += bad


def _random_chains(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n, k = int(rng.integers(1, 7)), int(rng.integers(2, 4))
        yield random_model(rng, n, k, scale=float(rng.choice([0.5, 1.0, 3.0])))


# --- oracle ----------------------------------------------------------------------

def test_criterion_01_oracle_exactness():
    t0 = time.perf_counter()
    worst = {"marginals": 0.0, "logz": 0.0, "entropy": 0.0}
    map_mismatch = 0
    for theta in _random_chains(200, seed=101):
        table = enumerate_distribution(theta)
        res = marginals(theta)
        worst["marginals"] = max(worst["marginals"], np.abs(res.marginals.values - exact_marginals(table).values).max())
        worst["logz"] = max(worst["logz"], abs(res.log_partition - enumerate_log_partition(theta)))
        worst["entropy"] = max(worst["entropy"], abs(bethe_entropy(res.marginals) - exact_entropy(table)))
        best = max(score(theta, y) for y in all_labelings(theta.n, theta.k))
        map_mismatch += score(theta, map_decode(theta)) != best
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-8 and map_mismatch == 0 and elapsed < 10
    detail = ", ".join(f"{k} err {v:.1e}" for k, v in worst.items())
    assert _record(1, ok, f"({detail}, MAP mismatches {map_mismatch}, {elapsed:.1f}s)")


def test_criterion_02_duality_identity():
    worst = 0.0
    for theta in _random_chains(200, seed=202):
        mu = marginals(theta).marginals
        worst = max(worst, abs(dot(theta, mu) + bethe_entropy(mu) - log_partition(theta)))
    assert _record(2, worst < 1e-8, f"(max |<theta,mu> + H - log Z| = {worst:.1e})")


# --- convex solver suite -----------------------------------------------------------

@pytest.fixture(scope="module")
def suite():
    problems = convex_suite(50)
    t0 = time.perf_counter()
    refs = [solve_augmented_exact(p) for p in problems]
    return problems, refs, time.perf_counter() - t0


def test_criterion_03_convex_solvers_match_exact(suite):
    problems, refs, ref_time = suite
    t0 = time.perf_counter()
    obj_err = {a: 0.0 for a in SOLVERS}
    pair_err = 0.0
    for p, ref in zip(problems, refs):
        mus = []
        for alg in SOLVERS:
            res = solve(p, SolverConfig(algorithm=alg, max_iters=3000, tolerance=1e-9))
            _count(res.trace)
            obj_err[alg] = max(obj_err[alg], abs(objective_value(p, res.mu) - ref.objective))
            mus.append(res.mu.values)
        pair_err = max(pair_err, max(np.abs(a - b).max() for i, a in enumerate(mus) for b in mus[i + 1:]))
    elapsed = time.perf_counter() - t0 + ref_time
    ok = max(obj_err.values()) < 1e-4 and pair_err < 1e-3 and elapsed < 60
    detail = ", ".join(f"{a} {v:.1e}" for a, v in obj_err.items())
    assert _record(3, ok, f"(objective gap {detail}; pairwise mu {pair_err:.1e}; {elapsed:.1f}s incl. exact oracle)")


FLOOR = 1e-11  # below this the gap is dominated by the reference optimum's own error


def _loglog_r2(t, gap):
    x, y = np.log(t), np.log(gap)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    return slope, 1.0 - (resid ** 2).sum() / ((y - y.mean()) ** 2).sum()


def test_criterion_04_convergence_rate_shape(suite):
    """Envelope constants are fitted on t in [10, 50] and must hold out to t = 500."""
    problems, refs, _ = suite
    t = np.arange(1, 501)
    window = (t >= 10) & (t <= 500)
    early = (t >= 10) & (t <= 50)
    shapes = {"rda": np.log(t) / t, "acc-rda": 1.0 / t ** 2}
    failures, min_r2, exempt = [], {a: 1.0 for a in shapes}, 0
    for i, (p, ref) in enumerate(zip(problems, refs)):
        for alg, shape in shapes.items():
            res = solve(p, SolverConfig(algorithm=alg, max_iters=500, stop_on_convergence=False))
            _count(res.trace)
            seq = res.trace.primal_averages() if alg == "rda" else res.trace.mu[1:]
            gap = np.maximum(np.array([objective_value(p, m) for m in seq]) - ref.objective, 0.0)
            c = (gap[early] / shape[early]).max()
            if np.any(gap[window] > c * shape[window] + FLOOR):
                failures.append((i, alg, "envelope"))
            above = window & (gap > FLOOR)
            if above.sum() < 10:
                exempt += 1  # converged to the floor; envelope holds trivially, no fit possible
                continue
            _, r2 = _loglog_r2(t[above], gap[above])
            min_r2[alg] = min(min_r2[alg], r2)
            if r2 < 0.8:
                failures.append((i, alg, f"r2={r2:.2f}"))
    detail = f"min R2 rda {min_r2['rda']:.3f}, acc-rda {min_r2['acc-rda']:.3f}; {exempt} runs at floor"
    assert _record(4, not failures, f"({detail}; failures {failures[:5]})")


def test_criterion_05_fixed_point(suite):
    # the stopping rule bounds the step, and the residual sits 40-400x above it
    problems, _, _ = suite
    worst = 0.0
    for p in problems:
        res = solve(p, SolverConfig(algorithm="rda", max_iters=20000, tolerance=1e-8))
        _count(res.trace)
        worst = max(worst, fixed_point_residual(p, res.mu))
    assert _record(5, worst < 1e-4, f"(max ||marginals(theta - grad L(mu)) - mu||_inf = {worst:.1e})")


# --- benchmarks -------------------------------------------------------------------

@pytest.fixture(scope="module")
def softcon():
    t0 = time.perf_counter()
    report = run_experiment({"task": {"name": "softcon"}})
    FEASIBILITY["checked"] += report.feasibility["checked"]
    FEASIBILITY["infeasible"] += report.feasibility["infeasible"]
    return report, time.perf_counter() - t0


def test_criterion_06_anytime(softcon):
    report, _ = softcon
    full = report.metrics["augmented"]["token_accuracy"]
    capped = report.metrics["augmented_capped"]["token_accuracy"]
    assert _record(6, abs(full - capped) <= 0.01, f"(accuracy converged {full:.4f}, 10-iteration cap {capped:.4f})")


def test_criterion_07_learning_beats_baseline(softcon):
    report, elapsed = softcon
    base, aug = report.metrics["baseline"], report.metrics["augmented"]
    reduction = 1.0 - aug["total_violations"] / base["total_violations"]
    ok = (aug["token_accuracy"] > base["token_accuracy"] and aug["satisfaction_rate"] > base["satisfaction_rate"]
          and reduction >= 0.5 and elapsed < 300)
    detail = (f"accuracy {base['token_accuracy']:.4f} -> {aug['token_accuracy']:.4f}, satisfaction "
              f"{base['satisfaction_rate']:.2f} -> {aug['satisfaction_rate']:.2f}, violations "
              f"{base['total_violations']} -> {aug['total_violations']} ({reduction:.0%} fewer), {elapsed:.0f}s")
    assert _record(7, ok, f"({detail})")


def test_criterion_08_nonconvex_energies_help():
    report = run_experiment({"task": {"name": "prototype"}})
    FEASIBILITY["checked"] += report.feasibility["checked"]
    FEASIBILITY["infeasible"] += report.feasibility["infeasible"]
    acc = {name: m["token_accuracy"] for name, m in report.metrics.items()}
    ok = (acc["unigram"] - acc["baseline"] >= 0.02 and acc["full"] - acc["unigram"] >= 0.02
          and acc["unigram_featurized"] >= acc["unigram"] and acc["full_featurized"] >= acc["full"])
    detail = ", ".join(f"{k} {v:.4f}" for k, v in acc.items())
    assert _record(8, ok, f"({detail})")


def test_criterion_09_cgm_solver():
    report = run_experiment({"task": {"name": "cgm"}})
    FEASIBILITY["checked"] += report.feasibility["checked"]
    FEASIBILITY["infeasible"] += report.feasibility["infeasible"]
    m, t = report.metrics, report.timings
    ok = m["objective_gap"] < 1e-4 and t["rda"] < t["euclidean"] and m["instance"]["k"] >= 25
    detail = (f"k={m['instance']['k']}, objective gap {m['objective_gap']:.1e}, wall rda {t['rda']:.2f}s vs "
              f"euclidean {t['euclidean']:.1f}s, speedup {m['speedup']:.0f}x")
    assert _record(9, ok, f"({detail})")


# --- gradients ----------------------------------------------------------------------

def _energy_families(rng):
    n, k = 4, 3
    dim = layout_size(n, k)
    yield "quadratic", n, k, QuadraticEnergy(rng.uniform(size=dim), 2.0)
    ms = [LinearMeasurement(rng.normal(size=dim), float(rng.normal())) for _ in range(3)]
    yield "measurement", n, k, MeasurementEnergy(ms, rng.uniform(0.5, 2.0, size=3))
    yield "mean_field", n, k, MeanFieldEnergy(n, k, [((0, 2), rng.normal(size=(k, k))),
                                                     ((1, 2, 3), rng.normal(size=(k, k, k)))])
    yield "prototype_unigram", n, k, PrototypeEnergy("unigram", rng.uniform(0, n, size=(4, k)), 1.5, k)
    yield "prototype_full", n, k, PrototypeEnergy("full", [np.eye(k)[rng.integers(k, size=n)].ravel()
                                                           for _ in range(4)], 1.5, k)
    yield "poisson", n, k, PoissonEnergy(rng.poisson(20, size=(n, k)).astype(float) + 1.0, 30.0)


def _fd_rel_error(f, arr, grad, h=1e-6):
    err = 0.0
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        err = max(err, abs((fp - fm) / (2 * h) - grad[idx]))
    return err / max(1.0, float(np.abs(grad).max()))


def test_criterion_10_gradient_suite():
    rng = np.random.default_rng(10)
    worst, skipped = {}, 0
    for name, n, k, energy in _energy_families(rng):
        errs = []
        for _ in range(50):
            mu = marginals(random_model(rng, n, k, 0.7)).marginals.values
            rep = check_gradient(energy, mu)
            errs.append(rep.max_rel_error)
            skipped += rep.skipped
        worst[name] = max(errs)

    spec = constraint_energy([
        {"name": "at_least_one_B", "label_weights": [0.0, 1.0, 0.0], "offset": 0.0},
        {"name": "at_most_one_C", "label_weights": [0.0, 0.0, -1.0], "offset": 2.0},
    ])
    worst["theta_learning"] = worst["psi_learning"] = 0.0
    for i in range(50):
        theta = ThetaParametrization(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
        model = Model(theta, PsiParametrization("featurized", rng.normal(size=2), rng.normal(size=(5, 2))), spec)
        model.features = MeanMapFeatures(3, num_features=5, seed=i)
        ex = Example(rng.normal(size=(4, 3)), rng.integers(3, size=4))
        mu = marginals(theta_of(ex, model.theta)).marginals.values
        _, residual, g_psi = surrogate_terms(model, ex, mu)

        def f():
            return surrogate_terms(model, ex, mu)[0]

        gn, ge = theta_gradient(ex, model.theta, residual)
        worst["theta_learning"] = max(worst["theta_learning"], _fd_rel_error(f, model.theta.node_weights, gn),
                                      _fd_rel_error(f, model.theta.edge_weights, ge))
        gv, gw = model.psi.gradient(g_psi, model.phi(ex))
        worst["psi_learning"] = max(worst["psi_learning"], _fd_rel_error(f, model.psi.values, gv),
                                    _fd_rel_error(f, model.psi.weights, gw))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert _record(10, max(worst.values()) < 1e-4, f"(max relative error: {detail}; {skipped} kink coords skipped)")


# --- feasibility ----------------------------------------------------------------------

def test_criterion_11_feasibility():
    checked, bad = FEASIBILITY["checked"], FEASIBILITY["infeasible"]
    ok = checked > 0 and bad == 0
    assert _record(11, ok, f"({checked - bad}/{checked} recorded iterates valid across criteria 3-9)")
