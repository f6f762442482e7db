"""Exact inference in the base chain: marginals, MAP, Bethe entropy."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import xlogy

from . import kernels
from .chain import ChainModel, MarginalVector, validate_marginals

INTERIOR_THRESHOLD = 1e-12


class OracleResult(NamedTuple):
    marginals: MarginalVector
    log_partition: float


class BoundaryError(ValueError):
    """The Bethe entropy gradient was requested at a boundary point."""


def _tables(theta: ChainModel):
    node = np.ascontiguousarray(theta.node)
    edge = np.ascontiguousarray(theta.edge)
    return node, edge


def marginal_arrays(theta: ChainModel):
    """Flat marginals and log-partition without building a MarginalVector."""
    node, edge = _tables(theta)
    nm, em, log_z = kernels.forward_backward(node, edge)
    return np.concatenate([np.asarray(nm).ravel(), np.asarray(em).ravel()]), float(log_z)


def marginals(theta: ChainModel) -> OracleResult:
    """Node/edge marginals and log Z of P(y) proportional to exp(<theta, S(y)>)."""
    if not np.all(np.isfinite(theta.values)):
        raise ValueError("non-finite potentials")
    values, log_z = marginal_arrays(theta)
    if not np.isfinite(log_z) or not np.all(np.isfinite(values)):
        raise FloatingPointError("forward-backward produced non-finite output")
    return OracleResult(MarginalVector(theta.n, theta.k, values), log_z)


def log_partition(theta: ChainModel) -> float:
    return marginal_arrays(theta)[1]


def map_decode(theta: ChainModel) -> np.ndarray:
    node, edge = _tables(theta)
    y, _ = kernels.viterbi(node, edge)
    return np.asarray(y, dtype=np.intp)


def _degree_weights(n: int) -> np.ndarray:
    """Coefficient of each node entropy in the chain Bethe formula, ``1 - deg``."""
    deg = np.full(n, 2.0)
    if n == 1:
        deg[0] = 0.0
    else:
        deg[0] = deg[-1] = 1.0
    return 1.0 - deg


def _xlogx(p):
    p = np.maximum(p, 0.0)
    return xlogy(p, p)


def bethe_entropy(mu: MarginalVector, check: bool = True) -> float:
    """H_B = sum_e H(mu_e) - sum_i (deg(i) - 1) H(mu_i), with 0 log 0 = 0."""
    if check:
        report = validate_marginals(mu, simplex_tol=1e-6, consistency_tol=1e-6)
        if not report.ok:
            raise ValueError(f"invalid marginals: {report}")
    node_h = -_xlogx(mu.node).sum(axis=1)
    edge_h = -_xlogx(mu.edge).sum()
    return float(edge_h + _degree_weights(mu.n) @ node_h)


def bethe_entropy_values(values: np.ndarray, n: int, k: int) -> float:
    """Unchecked Bethe entropy on a flat array (solver hot path)."""
    node = values[: n * k].reshape(n, k)
    node_h = -_xlogx(node).sum(axis=1)
    edge_h = -_xlogx(values[n * k:]).sum()
    return float(edge_h + _degree_weights(n) @ node_h)


def bethe_entropy_gradient(mu) -> np.ndarray:
    """Gradient of H_B in the flat layout; requires a strictly interior point."""
    values = mu.values
    if np.any(values < INTERIOR_THRESHOLD):
        raise BoundaryError(
            f"entry {values.min():.3g} below interior threshold {INTERIOR_THRESHOLD}"
        )
    n, k = mu.n, mu.k
    grad = -np.log(values) - 1.0
    weights = np.repeat(_degree_weights(n), k)
    grad[: n * k] *= weights
    return grad
