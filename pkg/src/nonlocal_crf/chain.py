"""Chain-structured CRF parameters, marginal vectors and sufficient statistics.

Every vector living on a chain of ``n`` nodes with ``k`` states uses one flat
layout: the ``n`` node blocks (``k`` entries each) followed by the ``n - 1``
edge blocks (``k * k`` entries each, row index = left state).  Potentials,
marginals, indicator vectors and all gradients share this layout.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

SIMPLEX_TOL = 1e-9
CONSISTENCY_TOL = 1e-8
MODEL_SCHEMA = "nonlocal-crf/chain-model/1"


class DimensionError(ValueError):
    """Raised when arrays or labelings do not fit the chain dimensions."""


def layout_size(n: int, k: int) -> int:
    return n * k + (n - 1) * k * k


def _split(values: np.ndarray, n: int, k: int):
    node = values[: n * k].reshape(n, k)
    edge = values[n * k:].reshape(max(n - 1, 0), k, k)
    return node, edge


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class _ChainVector:
    n: int
    k: int
    values: np.ndarray

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise DimensionError(f"invalid chain shape n={self.n}, k={self.k}")
        values = _frozen(self.values).ravel()
        if values.size != layout_size(self.n, self.k):
            raise DimensionError(
                f"expected {layout_size(self.n, self.k)} entries for n={self.n}, "
                f"k={self.k}, got {values.size}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def from_tables(cls, node, edge=None):
        node = np.asarray(node, dtype=float)
        if node.ndim != 2:
            raise DimensionError("node table must be 2-d (n, k)")
        n, k = node.shape
        if edge is None:
            edge = np.zeros((n - 1, k, k))
        edge = np.asarray(edge, dtype=float).reshape(-1, k, k) if n > 1 else np.zeros((0, k, k))
        if edge.shape != (n - 1, k, k):
            raise DimensionError(f"edge table shape {edge.shape} != {(n - 1, k, k)}")
        return cls(n, k, np.concatenate([node.ravel(), edge.ravel()]))

    @property
    def node(self) -> np.ndarray:
        return _split(self.values, self.n, self.k)[0]

    @property
    def edge(self) -> np.ndarray:
        return _split(self.values, self.n, self.k)[1]

    @property
    def shape(self):
        return self.n, self.k

    def __len__(self):
        return self.values.size


class ChainModel(_ChainVector):
    """Log-potentials of a linear-chain MRF in the shared flat layout."""

    def __post_init__(self):
        super().__post_init__()
        if self.k < 2:
            raise DimensionError("a chain model needs at least 2 states per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("chain potentials must be finite")

    @classmethod
    def zeros(cls, n: int, k: int) -> "ChainModel":
        return cls(n, k, np.zeros(layout_size(n, k)))

    @classmethod
    def homogeneous(cls, node, transition) -> "ChainModel":
        """Expand a position-tied transition table to every edge."""
        node = np.asarray(node, dtype=float)
        n, k = node.shape
        edge = np.broadcast_to(np.asarray(transition, dtype=float), (max(n - 1, 0), k, k))
        return cls.from_tables(node, edge)

    def with_values(self, values) -> "ChainModel":
        return ChainModel(self.n, self.k, values)

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "n": self.n,
            "k": self.k,
            "node_potentials": self.node.ravel().tolist(),
            "edge_potentials": self.edge.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainModel":
        if d.get("schema", MODEL_SCHEMA) != MODEL_SCHEMA:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        n, k = int(d["n"]), int(d["k"])
        node = np.asarray(d["node_potentials"], dtype=float).reshape(n, k)
        edge = np.asarray(d["edge_potentials"], dtype=float).reshape(max(n - 1, 0), k, k)
        return cls.from_tables(node, edge)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ChainModel":
        return cls.from_dict(json.loads(text))


class MarginalVector(_ChainVector):
    """Concatenated node and edge marginals of a chain."""

    @classmethod
    def uniform(cls, n: int, k: int) -> "MarginalVector":
        node = np.full((n, k), 1.0 / k)
        edge = np.full((n - 1, k, k), 1.0 / (k * k))
        return cls.from_tables(node, edge)


def as_array(x) -> np.ndarray:
    """Flat values of a chain vector, or the array itself."""
    return x.values if isinstance(x, _ChainVector) else np.asarray(x, dtype=float)


def check_labeling(n: int, k: int, y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.size != n:
        raise DimensionError(f"labeling has length {y.size}, expected {n}")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= k):
        raise DimensionError(f"labels must be integers in [0, {k})")
    return y.astype(np.intp)


def sufficient_statistics(model, y) -> MarginalVector:
    """0-1 indicator vector S(y) for a labeling; ``model`` only supplies (n, k)."""
    n, k = model.shape if hasattr(model, "shape") else model
    y = check_labeling(n, k, y)
    node = np.zeros((n, k))
    node[np.arange(n), y] = 1.0
    edge = np.zeros((n - 1, k, k))
    if n > 1:
        edge[np.arange(n - 1), y[:-1], y[1:]] = 1.0
    return MarginalVector.from_tables(node, edge)


def statistic_indices(n: int, k: int, y) -> np.ndarray:
    """Flat positions of the nonzero entries of S(y)."""
    y = check_labeling(n, k, y)
    node_idx = np.arange(n) * k + y
    edge_idx = n * k + np.arange(n - 1) * k * k + y[:-1] * k + y[1:]
    return np.concatenate([node_idx, edge_idx])


def dot(theta, mu) -> float:
    a, b = as_array(theta), as_array(mu)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(a @ b)


def score(theta: ChainModel, y) -> float:
    """<theta, S(y)> by direct lookup."""
    return float(theta.values[statistic_indices(theta.n, theta.k, y)].sum())


@dataclass(frozen=True)
class MarginalCheck:
    simplex_violation: float
    consistency_violation: float
    negative_violation: float
    simplex_tol: float = SIMPLEX_TOL
    consistency_tol: float = CONSISTENCY_TOL

    @property
    def ok(self) -> bool:
        return (
            self.simplex_violation <= self.simplex_tol
            and self.negative_violation <= self.simplex_tol
            and self.consistency_violation <= self.consistency_tol
        )

    def __bool__(self):
        return self.ok


def validate_marginals(mu, simplex_tol=SIMPLEX_TOL, consistency_tol=CONSISTENCY_TOL) -> MarginalCheck:
    """Report how far ``mu`` is from the local polytope (no exception)."""
    node, edge = mu.node, mu.edge
    sums = np.concatenate([node.sum(axis=1), edge.sum(axis=(1, 2))])
    simplex = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    negative = float(max(0.0, -mu.values.min()))
    if mu.n > 1:
        rows = np.abs(edge.sum(axis=2) - node[:-1]).max()
        cols = np.abs(edge.sum(axis=1) - node[1:]).max()
        consistency = float(max(rows, cols))
    else:
        consistency = 0.0
    if not np.all(np.isfinite(mu.values)):
        simplex = consistency = float("inf")
    return MarginalCheck(simplex, consistency, negative, simplex_tol, consistency_tol)


def feasible_rows(values, n: int, k: int, simplex_tol=SIMPLEX_TOL, consistency_tol=CONSISTENCY_TOL) -> np.ndarray:
    """Vectorized ``validate_marginals(...).ok`` over rows of flat marginal vectors."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != layout_size(n, k):
        raise DimensionError(f"rows have length {values.shape[1]}, expected {layout_size(n, k)}")
    node = values[:, : n * k].reshape(-1, n, k)
    edge = values[:, n * k:].reshape(len(values), n - 1, k, k)
    simplex = np.abs(node.sum(axis=2) - 1.0).max(axis=1)
    negative = np.maximum(0.0, -values.min(axis=1))
    consistency = np.zeros(len(values))
    if n > 1:
        simplex = np.maximum(simplex, np.abs(edge.sum(axis=(2, 3)) - 1.0).max(axis=1))
        rows = np.abs(edge.sum(axis=3) - node[:, :-1]).max(axis=(1, 2))
        cols = np.abs(edge.sum(axis=2) - node[:, 1:]).max(axis=(1, 2))
        consistency = np.maximum(rows, cols)
    finite = np.isfinite(values).all(axis=1)
    return finite & (simplex <= simplex_tol) & (negative <= simplex_tol) & (consistency <= consistency_tol)


def all_labelings(n: int, k: int) -> np.ndarray:
    """Every labeling as rows of a (k**n, n) array in lexicographic order."""
    return np.array(list(itertools.product(range(k), repeat=n)), dtype=np.intp).reshape(-1, n)


def random_model(rng: np.random.Generator, n: int, k: int, scale: float = 1.0) -> ChainModel:
    return ChainModel(n, k, rng.normal(scale=scale, size=layout_size(n, k)))
