"""Brute-force ground truth for tiny chains.

Everything here works on the full joint table over all k**n labelings and
never calls the forward-backward oracle, so it can serve as an independent
check of the message-passing and projected-gradient code paths.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .chain import ChainModel, MarginalVector, all_labelings, layout_size

MAX_TABLE = 10**6


class JointTable(NamedTuple):
    n: int
    k: int
    probabilities: np.ndarray  # indexed like all_labelings(n, k)


class ExactSolution(NamedTuple):
    mu: MarginalVector
    objective: float
    table: JointTable


def _guard(n, k):
    if k**n > MAX_TABLE:
        raise ValueError(f"k**n = {k**n} exceeds the enumeration guard {MAX_TABLE}")


def statistic_index_table(n: int, k: int) -> np.ndarray:
    """(k**n, 2n-1) flat positions of the ones in S(y) for every labeling."""
    _guard(n, k)
    ys = all_labelings(n, k)
    node = np.arange(n) * k + ys
    edge = n * k + np.arange(n - 1) * k * k + ys[:, :-1] * k + ys[:, 1:]
    return np.hstack([node, edge])


def enumerate_scores(theta: ChainModel) -> np.ndarray:
    idx = statistic_index_table(theta.n, theta.k)
    return theta.values[idx].sum(axis=1)


def enumerate_distribution(theta: ChainModel) -> JointTable:
    scores = enumerate_scores(theta)
    return JointTable(theta.n, theta.k, np.exp(scores - logsumexp(scores)))


def enumerate_log_partition(theta: ChainModel) -> float:
    return float(logsumexp(enumerate_scores(theta)))


def exact_marginals(table: JointTable) -> MarginalVector:
    idx = statistic_index_table(table.n, table.k)
    return MarginalVector(table.n, table.k, _marginals(idx, table.probabilities, table.n, table.k))


def _marginals(idx, q, n, k):
    return np.bincount(idx.ravel(), weights=np.repeat(q, idx.shape[1]), minlength=layout_size(n, k))


def exact_entropy(table: JointTable) -> float:
    q = table.probabilities
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


def exact_map(theta: ChainModel):
    """Best labeling and its score by enumeration (first in lexicographic order on ties)."""
    scores = enumerate_scores(theta)
    j = int(np.argmax(scores))
    return all_labelings(theta.n, theta.k)[j], float(scores[j])


def solve_augmented_exact(
    p,
    restarts: int | None = None,
    eg_iters: int = 1000,
    seed: int = 0,
    gtol: float = 1e-13,
) -> ExactSolution:
    """Minimize -H(q) - <theta, mu(q)> + L(mu(q)) over the full simplex of joint tables.

    Each start runs exponentiated-gradient descent (step 0.1/sqrt(t)) and is
    then polished by L-BFGS on the softmax logits.  Convex energies use one
    start from the uniform table; non-convex ones use ``restarts`` random
    starts (default 20) plus the uniform one and keep the best.
    """
    n, k = p.n, p.k
    idx = statistic_index_table(n, k)
    theta = p.base.values
    base_scores = theta[idx].sum(axis=1)
    energy = p.energy

    def mu_of(q):
        return _marginals(idx, q, n, k)

    def objective(logq):
        q = np.exp(logq)
        mu = mu_of(q)
        val, grad = energy.value_and_grad(mu)
        if not np.isfinite(val):
            raise ValueError("non-finite energy in exact solver")
        f = float(q @ logq - q @ base_scores + val)
        g = logq + 1.0 - base_scores + grad[idx].sum(axis=1)
        return f, g, mu

    def run(logq):
        for t in range(1, eg_iters + 1):
            _, g, _ = objective(logq)
            logq = logq - (0.1 / np.sqrt(t)) * g
            logq -= logsumexp(logq)

        def fz(z):
            logq = z - logsumexp(z)
            f, g, _ = objective(logq)
            q = np.exp(logq)
            return f, q * (g - q @ g)

        res = minimize(fz, logq, jac=True, method="L-BFGS-B",
                       options={"maxiter": 20000, "gtol": gtol, "ftol": 0.0, "maxcor": 30})
        z = res.x - logsumexp(res.x)
        f_pol = objective(z)[0]
        f_eg = objective(logq)[0]
        return (z, f_pol) if f_pol <= f_eg else (logq, f_eg)

    size = k**n
    starts = [np.full(size, -np.log(size))]
    if not energy.is_convex():
        rng = np.random.default_rng(seed)
        for _ in range(20 if restarts is None else restarts):
            q = rng.dirichlet(np.full(size, 0.5))
            starts.append(np.log(np.maximum(q, 1e-300)))
    best = None
    for logq in starts:
        z, f = run(logq)
        if best is None or f < best[1]:
            best = (z, f)
    q = np.exp(best[0])
    return ExactSolution(MarginalVector(n, k, mu_of(q)), best[1], JointTable(n, k, q))


def rho_consistency(p, solution: ExactSolution) -> float:
    """Max relative gap between the table and exp(<theta - grad L(mu), S(y)>) / Z."""
    mu = solution.mu.values
    rho = ChainModel(p.n, p.k, p.base.values - p.energy.grad_mu(mu))
    target = enumerate_distribution(rho).probabilities
    return float(np.max(np.abs(solution.table.probabilities - target) / target))


def expected_energy(energy, table: JointTable) -> float:
    """E_q[L(S(y))] by enumeration."""
    idx = statistic_index_table(table.n, table.k)
    size = layout_size(table.n, table.k)
    total = 0.0
    for q, row in zip(table.probabilities, idx):
        s = np.zeros(size)
        s[row] = 1.0
        total += q * energy.value(s)
    return float(total)
