"""Projected inference with non-local energies.

All three solvers minimize ``-H_B(mu) - <theta, mu> + L(mu)`` over the chain
marginal polytope, and each step is one call to the forward-backward oracle
with modified parameters, so every iterate is a valid marginal vector.

* ``solve_bethe_rda``: regularized dual averaging with the negative Bethe
  entropy as distance-generating function.
* ``solve_bethe_md``: composite mirror descent in the Bethe geometry, the
  variant with a stationarity guarantee for non-convex energies.
* ``solve_accelerated_rda``: accelerated dual averaging for energies with a
  Lipschitz gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .chain import ChainModel, MarginalVector, as_array, feasible_rows, validate_marginals
from .energies import EnergyFunction, ZeroEnergy
from .oracle import (
    bethe_entropy_gradient,
    bethe_entropy_values,
    map_decode,
    marginal_arrays,
)

ALGORITHMS = ("rda", "md", "accelerated-rda")
_ALIASES = {"acc-rda": "accelerated-rda", "accelerated": "accelerated-rda", "bethe-rda": "rda", "bethe-md": "md"}
MD_CLAMP = 1e-12


class SolverError(RuntimeError):
    pass


@dataclass
class AugmentedProblem:
    base: ChainModel
    energy: EnergyFunction = field(default_factory=ZeroEnergy)

    @property
    def n(self):
        return self.base.n

    @property
    def k(self):
        return self.base.k


@dataclass
class SolverConfig:
    algorithm: str = "rda"
    beta: float = 0.0
    md_schedule: str = "inv_t"  # eta_t = 1 / (md_lambda * t), or "constant" eta_t = md_eta
    md_lambda: float | None = None  # defaults to the strong-convexity constant 1/2 (2n-1)^-2
    md_eta: float = 1.0
    max_iters: int = 500
    tolerance: float = 1e-6
    smoothness: float | None = None
    primal_average: bool = False
    record_iterates: bool = True
    validate_iterates: bool = False  # with record_iterates off, still check each iterate
    stop_on_convergence: bool = True  # False runs all max_iters (rate measurements)

    def __post_init__(self):
        self.algorithm = _ALIASES.get(self.algorithm, self.algorithm)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.md_schedule not in ("inv_t", "constant"):
            raise ValueError(f"unknown MD schedule {self.md_schedule!r}")


@dataclass
class SolverTrace:
    n: int
    k: int
    theta: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    gbar: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    converged: bool = False
    oracle_calls: int = 0
    validate: bool = False  # check unstored iterates for feasibility as they arrive
    checked: int = 0
    infeasible: int = 0

    @property
    def iterations(self) -> int:
        return len(self.objective) - 1

    def record(self, theta, mu, gbar, objective, step, t0, keep):
        if keep:
            self.theta.append(None if theta is None else np.array(theta))
            self.mu.append(np.array(mu))
            self.gbar.append(None if gbar is None else np.array(gbar))
        elif self.validate:
            self.checked += 1
            self.infeasible += not validate_marginals(MarginalVector(self.n, self.k, mu)).ok
        self.objective.append(float(objective))
        self.step_norm.append(float(step))
        self.wall_time.append(time.perf_counter() - t0)

    def primal_averages(self) -> list:
        """Running averages of mu_1..mu_t (mu_0 excluded)."""
        out, acc = [], None
        for t, mu in enumerate(self.mu[1:], start=1):
            acc = mu.copy() if acc is None else acc + (mu - acc) / t
            out.append(acc.copy())
        return out

    def all_feasible(self, tol: float = 1e-8) -> bool:
        """Every iterate seen (stored or validated on the fly) is feasible."""
        return self.feasibility_counts(tol)[1] == 0

    def feasibility_counts(self, tol: float = 1e-8) -> tuple[int, int]:
        """(iterates checked, iterates infeasible), stored and on-the-fly alike."""
        bad = int((~feasible_rows(self.mu, self.n, self.k, tol, tol)).sum()) if self.mu else 0
        return self.checked + len(self.mu), self.infeasible + bad

    def to_tsv(self, path):
        with open(path, "w") as fh:
            fh.write("# nonlocal-crf/trace/1\n")
            fh.write("iteration\tobjective\tstep_norm\twall_time\n")
            for t, (f, s, w) in enumerate(zip(self.objective, self.step_norm, self.wall_time)):
                fh.write(f"{t}\t{f!r}\t{s!r}\t{w:.6f}\n")


class SolveResult(NamedTuple):
    mu: MarginalVector
    theta_tilde: ChainModel
    trace: SolverTrace


def objective_value(p: AugmentedProblem, mu) -> float:
    """-H_B(mu) - <theta, mu> + L(mu)."""
    values = as_array(mu)
    return _objective(p, values, p.energy.value(values))


def _objective(p, values, energy_value):
    return -bethe_entropy_values(values, p.n, p.k) - float(p.base.values @ values) + energy_value


def _energy(p, mu, t):
    val, grad = p.energy.value_and_grad(mu)
    if not np.isfinite(val) or not np.all(np.isfinite(grad)):
        raise SolverError(f"non-finite energy or gradient at iteration {t} ({p.energy.family})")
    return val, grad


def _oracle(p, params, trace):
    trace.oracle_calls += 1
    if not np.isfinite(params).all():
        raise SolverError("oracle failure: non-finite parameters")
    n, k = p.n, p.k
    params = np.ascontiguousarray(params)
    nm, em, _ = kernels.forward_backward(
        params[: n * k].reshape(n, k), params[n * k:].reshape(n - 1, k, k)
    )
    values = np.concatenate([np.asarray(nm).ravel(), np.asarray(em).ravel()])
    if not np.isfinite(values).all():
        raise SolverError("oracle returned non-finite marginals")
    return values


def _step(a, b, n):
    return float(np.abs(a - b).sum()) / (2 * n - 1)


def _finish(p, cfg, mu, theta_last, trace):
    if cfg.primal_average and len(trace.mu) > 1:
        mu = trace.primal_averages()[-1]
    return SolveResult(MarginalVector(p.n, p.k, mu), ChainModel(p.n, p.k, theta_last), trace)


def solve_bethe_rda(p: AugmentedProblem, cfg: SolverConfig | None = None) -> SolveResult:
    """Bethe-RDA: theta_t = theta - t/(t + beta) * gbar_t, mu_t = oracle(theta_t).

    ``gbar_t`` averages the energy gradients at mu_0 .. mu_{t-1}.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    theta = p.base.values
    trace = SolverTrace(p.n, p.k, validate=cfg.validate_iterates)
    keep = cfg.record_iterates or cfg.primal_average
    mu = _oracle(p, theta, trace)
    val, grad = _energy(p, mu, 0)
    gbar = np.zeros_like(theta)
    trace.record(theta, mu, gbar, _objective(p, mu, val), 0.0, t0, keep)
    theta_t = theta
    for t in range(1, cfg.max_iters + 1):
        gbar += (grad - gbar) / t
        theta_t = theta - (t / (t + cfg.beta)) * gbar
        new = _oracle(p, theta_t, trace)
        val, grad = _energy(p, new, t)
        step = _step(new, mu, p.n)
        mu = new
        trace.record(theta_t, mu, gbar, _objective(p, mu, val), step, t0, keep)
        if step < cfg.tolerance:
            trace.converged = True
            if cfg.stop_on_convergence:
                break
    return _finish(p, cfg, mu, theta_t, trace)


def _clamp_blocks(values, n, k):
    v = np.clip(values, MD_CLAMP, 1.0)
    node = v[: n * k].reshape(n, k)
    node /= node.sum(axis=1, keepdims=True)
    edge = v[n * k:].reshape(-1, k * k)
    edge /= edge.sum(axis=1, keepdims=True)
    return np.maximum(v, MD_CLAMP, out=v)


def strong_convexity(n: int) -> float:
    """Strong-convexity modulus of -H_B on a chain of n nodes (2-norm)."""
    return 0.5 / (2 * n - 1) ** 2


def solve_bethe_md(p: AugmentedProblem, cfg: SolverConfig | None = None) -> SolveResult:
    """Bethe-MD: mu_t = oracle((eta_t theta - g_t) / (1 + eta_t)) with
    g_t = grad H_B(mu_{t-1}) + eta_t grad L(mu_{t-1})."""
    cfg = cfg or SolverConfig(algorithm="md")
    t0 = time.perf_counter()
    n, k = p.n, p.k
    theta = p.base.values
    lam = cfg.md_lambda if cfg.md_lambda is not None else strong_convexity(n)
    trace = SolverTrace(n, k, validate=cfg.validate_iterates)
    keep = cfg.record_iterates or cfg.primal_average
    mu = _oracle(p, theta, trace)
    val, _ = _energy(p, mu, 0)
    trace.record(theta, mu, None, _objective(p, mu, val), 0.0, t0, keep)
    params = theta
    for t in range(1, cfg.max_iters + 1):
        eta = cfg.md_eta if cfg.md_schedule == "constant" else 1.0 / (lam * t)
        inner = _clamp_blocks(mu, n, k)
        _, grad_l = _energy(p, inner, t)
        g = bethe_entropy_gradient(MarginalVector(n, k, inner)) + eta * grad_l
        params = (eta * theta - g) / (1.0 + eta)
        new = _oracle(p, params, trace)
        val, _ = _energy(p, new, t)
        step = _step(new, mu, n)
        mu = new
        trace.record(params, mu, None, _objective(p, mu, val), step, t0, keep)
        if step < cfg.tolerance:
            trace.converged = True
            if cfg.stop_on_convergence:
                break
    return _finish(p, cfg, mu, params, trace)


def solve_accelerated_rda(p: AugmentedProblem, cfg: SolverConfig | None = None) -> SolveResult:
    """Accelerated Bethe-RDA for energies with an L-Lipschitz gradient.

    nu_t = oracle(t(t+1) / (4L + t(t+1)) * (theta - gbar_t)) and mu_t is the
    running combination (1 - c_t) mu_{t-1} + c_t nu_t with c_t = 2 / (t + 1).
    """
    cfg = cfg or SolverConfig(algorithm="accelerated-rda")
    lip = cfg.smoothness if cfg.smoothness is not None else p.energy.smoothness_bound()
    if lip is None:
        raise SolverError(f"accelerated RDA needs a smoothness bound for {p.energy.family} energy")
    t0 = time.perf_counter()
    theta = p.base.values
    trace = SolverTrace(p.n, p.k, validate=cfg.validate_iterates)
    keep = cfg.record_iterates or cfg.primal_average
    mu = _oracle(p, theta, trace)
    nu = mu
    val, _ = _energy(p, mu, 0)
    gbar = np.zeros_like(theta)
    trace.record(theta, mu, gbar, _objective(p, mu, val), 0.0, t0, keep)
    params = theta
    for t in range(1, cfg.max_iters + 1):
        c = 2.0 / (t + 1)
        u = (1 - c) * mu + c * nu
        _, grad = _energy(p, u, t)
        gbar = (1 - c) * gbar + c * grad
        w = t * (t + 1)
        params = (w / (4 * lip + w)) * (theta - gbar)
        nu = _oracle(p, params, trace)
        new = (1 - c) * mu + c * nu
        val, _ = _energy(p, new, t)
        step = _step(new, mu, p.n)
        mu = new
        trace.record(params, mu, gbar, _objective(p, mu, val), step, t0, keep)
        if step < cfg.tolerance:
            trace.converged = True
            if cfg.stop_on_convergence:
                break
    return _finish(p, cfg, mu, params, trace)


SOLVERS = {
    "rda": solve_bethe_rda,
    "md": solve_bethe_md,
    "accelerated-rda": solve_accelerated_rda,
}


def solve(p: AugmentedProblem, cfg: SolverConfig | None = None) -> SolveResult:
    cfg = cfg or SolverConfig()
    return SOLVERS[cfg.algorithm](p, cfg)


def map_predict(p: AugmentedProblem, cfg: SolverConfig | None = None) -> np.ndarray:
    """Solve the augmented problem, then MAP-decode the modified-parameter MRF."""
    return map_decode(solve(p, cfg).theta_tilde)


def fixed_point_residual(p: AugmentedProblem, mu) -> float:
    """||marginals(theta - grad L(mu)) - mu||_inf."""
    values = as_array(mu)
    rho = ChainModel(p.n, p.k, p.base.values - p.energy.grad_mu(values))
    return float(np.abs(marginal_arrays(rho)[0] - values).max())
