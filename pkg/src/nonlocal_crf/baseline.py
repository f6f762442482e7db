"""Euclidean projected-gradient baseline for the augmented objective.

Solves the same problem as the Bethe solvers but in Euclidean geometry:
spectral projected gradient steps followed by an exact Euclidean projection
onto the chain's local polytope.  It exists to measure what the oracle-based
Bethe geometry buys on large state spaces.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .chain import layout_size
from .inference import AugmentedProblem, SolverTrace, _objective
from .oracle import _degree_weights

GRAD_FLOOR = 1e-12


class ProjectionError(RuntimeError):
    pass


def polytope_constraints(n: int, k: int):
    """(A, b) with the local polytope = {v >= 0 : A v = b}.

    Rows: one sum-to-one per node, k row sums per edge (tied to the left node)
    and k - 1 column sums per edge (the last one is implied).
    """
    rows, cols, vals, b = [], [], [], []
    r = 0
    for i in range(n):
        rows += [r] * k
        cols += list(range(i * k, (i + 1) * k))
        vals += [1.0] * k
        b.append(1.0)
        r += 1
    for e in range(n - 1):
        base = n * k + e * k * k
        for a in range(k):
            rows += [r] * (k + 1)
            cols += [base + a * k + c for c in range(k)] + [e * k + a]
            vals += [1.0] * k + [-1.0]
            b.append(0.0)
            r += 1
        for c in range(k - 1):
            rows += [r] * (k + 1)
            cols += [base + a * k + c for a in range(k)] + [(e + 1) * k + c]
            vals += [1.0] * k + [-1.0]
            b.append(0.0)
            r += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, layout_size(n, k)))
    return A, np.array(b)


def _max_step(a, da):
    neg = da < 0
    return min(1.0, float((-a[neg] / da[neg]).min())) if neg.any() else 1.0


class LocalPolytopeProjector:
    """Euclidean projection onto the local polytope.

    Fast path: semismooth Newton on the dual
    ``min_lam 1/2 ||(x + A^T lam)_+||^2 - b . lam``, warm-started from the
    previous call.  It can stall on heavily degenerate active sets, so when
    it does not reach ``tol`` a primal-dual interior-point method (Mehrotra
    predictor-corrector; its normal matrix is always positive definite since
    the rows of A are independent) takes over.
    """

    def __init__(self, n: int, k: int, tol: float = 1e-11, newton_iters: int = 20):
        self.n, self.k = n, k
        self.A, self.b = polytope_constraints(n, k)
        self.At = self.A.T.tocsr()
        self.tol = tol
        self.newton_iters = newton_iters
        self._eye = sp.identity(self.A.shape[0], format="csc")
        self._lam = np.zeros(self.A.shape[0])
        self.fallbacks = 0

    def _dual(self, x, lam):
        v = np.maximum(x + self.At @ lam, 0.0)
        return 0.5 * float(v @ v) - float(lam @ self.b), v

    def residual(self, v) -> float:
        return float(np.abs(self.b - self.A @ v).max())

    def _newton(self, x, lam):
        f, v = self._dual(x, lam)
        for _ in range(self.newton_iters):
            resid = self.b - self.A @ v
            if np.abs(resid).max() < self.tol:
                return lam, v, True
            active = (x + self.At @ lam) > 0
            J = (self.A[:, active] @ self.At[active, :]).tocsc()
            # rows are ordered along the chain, so the natural ordering keeps fill low
            step = splu((J + 1e-10 * self._eye).tocsc(), permc_spec="NATURAL").solve(resid)
            slope = -float(resid @ step)  # the dual's gradient is -resid
            s = 1.0
            while True:
                f_new, v_new = self._dual(x, lam + s * step)
                if f_new <= f + 1e-4 * s * slope:
                    break
                s *= 0.5
                if s < 1e-10:
                    return lam, v, False
            lam, f, v = lam + s * step, f_new, v_new
        return lam, v, self.residual(v) < self.tol

    def _interior_point(self, x, max_iters=100):
        A, At, b = self.A, self.At, self.b
        m = A.shape[1]
        v = np.maximum(x, 0.0) + 1.0
        z = np.ones(m)
        lam = np.zeros(A.shape[0])
        for _ in range(max_iters):
            r1 = v - x - At @ lam - z
            r2 = A @ v - b
            gap = float(v @ z) / m
            if max(np.abs(r1).max(), np.abs(r2).max(), gap) < 1e-13:
                break
            D = v / (v + z)
            lu = splu((A.multiply(D) @ At).tocsc(), permc_spec="NATURAL")

            def direction(r3):
                dl = lu.solve(-r2 + A @ (D * (r1 + r3 / v)))
                dv = D * (At @ dl - r1 - r3 / v)
                return dv, dl, (-r3 - z * dv) / v

            dv, dl, dz = direction(v * z)
            a = min(_max_step(v, dv), _max_step(z, dz))
            sigma = (float((v + a * dv) @ (z + a * dz)) / m / gap) ** 3
            dv, dl, dz = direction(v * z + dv * dz - sigma * gap)
            a = min(1.0, 0.99 * min(_max_step(v, dv), _max_step(z, dz)))
            v, z, lam = v + a * dv, z + a * dz, lam + a * dl
        # recover the dual multipliers of the equality rows for warm starts
        return lam, np.maximum(v, 0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        lam, v, ok = self._newton(x, self._lam)
        if not ok:
            self.fallbacks += 1
            lam, v = self._interior_point(x)
        r = self.residual(v)
        if r > 1e-9:
            raise ProjectionError(f"projection residual {r:.3g} exceeds 1e-9")
        self._lam = lam
        return v


def neg_bethe_entropy_gradient(values: np.ndarray, n: int, k: int) -> np.ndarray:
    """Gradient of -H_B with entries floored at 1e-12."""
    g = np.log(np.maximum(values, GRAD_FLOOR)) + 1.0
    g[: n * k] *= np.repeat(_degree_weights(n), k)
    return g


@dataclass
class BaselineConfig:
    max_iters: int = 20000
    tolerance: float = 1e-8  # on ||P(mu - grad) - mu||_inf, checked every `check_every` steps
    window: int = 10  # nonmonotone line-search memory
    check_every: int = 10
    record_iterates: bool = True
    validate_iterates: bool = False


def euclidean_baseline_solve(p: AugmentedProblem, cfg: BaselineConfig | None = None):
    """Spectral (Barzilai-Borwein) projected gradient with a nonmonotone
    Armijo search.  Returns ``(mu, trace)``."""
    cfg = cfg or BaselineConfig()
    t0 = time.perf_counter()
    n, k = p.n, p.k
    theta = p.base.values
    project = LocalPolytopeProjector(n, k)
    trace = SolverTrace(n, k, validate=cfg.validate_iterates)

    def f_and_g(mu):
        val, grad = p.energy.value_and_grad(mu)
        return _objective(p, mu, val), neg_bethe_entropy_gradient(mu, n, k) - theta + grad

    mu = np.full(layout_size(n, k), 0.0)
    mu[: n * k] = 1.0 / k
    mu[n * k:] = 1.0 / (k * k)
    f, g = f_and_g(mu)
    trace.record(None, mu, None, f, 0.0, t0, cfg.record_iterates)
    alpha = 1.0
    recent = [f]
    for t in range(1, cfg.max_iters + 1):
        d = project(mu - alpha * g) - mu
        slope = float(g @ d)
        ref = max(recent[-cfg.window:])
        s = 1.0
        while True:
            cand = mu + s * d
            f_new, g_new = f_and_g(cand)
            if np.isfinite(f_new) and f_new <= ref + 1e-4 * s * slope:
                break
            s *= 0.5
            if s < 1e-14:
                break
        step_vec = cand - mu
        y = g_new - g
        sy = float(step_vec @ y)
        alpha = float(step_vec @ step_vec) / sy if sy > 0 else 1.0
        alpha = min(max(alpha, 1e-10), 1e10)
        step = float(np.abs(step_vec).sum()) / (2 * n - 1)
        mu, f, g = cand, f_new, g_new
        recent.append(f)
        trace.record(None, mu, None, f, step, t0, cfg.record_iterates)
        if t % cfg.check_every == 0 and np.abs(project(mu - g) - mu).max() < cfg.tolerance:
            trace.converged = True
            break
    return mu, trace
