"""Non-local energies L_psi(mu) added to the variational inference objective.

Every energy is a penalty that the solvers minimize.  Energies evaluate on
flat arrays in the shared chain layout (``MarginalVector`` is accepted too)
and expose three things beyond the value: the gradient with respect to the
marginals, the derivative of that gradient with respect to the energy
parameters psi (``psi_jacobian``), and ``psi_grad``, the ascent direction of
the surrogate log-likelihood ``log Q(y; mu)`` in psi.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .chain import as_array, layout_size

ENERGY_SCHEMA = "nonlocal-crf/energy/1"
POISSON_FLOOR = 1e-8


def smoothed_hinge(z):
    """Quadratically smoothed hinge: 1/2 - z, (1 - z)^2 / 2, 0 on the three pieces.

    Returns ``(value, derivative)``; works elementwise on arrays.
    """
    z = np.asarray(z, dtype=float)
    slack = np.clip(1.0 - z, 0.0, 1.0)
    deriv = -slack
    value = np.where(z <= 0, 0.5 - z, 0.5 * slack * slack)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


SCALAR_LOSSES = {"smoothed_hinge": smoothed_hinge}


class EnergyFunction:
    """Base class. Subclasses implement ``value_and_grad``."""

    convex = True
    family = "abstract"

    @property
    def psi(self) -> np.ndarray:
        return np.zeros(0)

    def num_psi(self) -> int:
        return self.psi.size

    def is_convex(self) -> bool:
        return self.convex

    def smoothness_bound(self):
        return None

    def value_and_grad(self, mu):
        raise NotImplementedError

    def value(self, mu) -> float:
        return self.value_and_grad(mu)[0]

    def grad_mu(self, mu) -> np.ndarray:
        return self.value_and_grad(mu)[1]

    def psi_jacobian(self, mu) -> np.ndarray:
        """d(grad_mu)/d(psi) as a (num_psi, dim) matrix."""
        return np.zeros((0, as_array(mu).size))

    def psi_grad(self, mu, s, m=None) -> np.ndarray:
        """Ascent direction of log Q(y; mu) in psi.

        With rho = theta - grad_mu(mu), d log Q / d rho = S(y) - m where m
        are the marginals of rho; at a solver fixed point m equals mu.
        """
        mu = as_array(mu)
        m = mu if m is None else as_array(m)
        return -self.psi_jacobian(mu) @ (as_array(s) - m)

    def with_psi(self, psi) -> "EnergyFunction":
        if np.size(psi):
            raise ValueError(f"{self.family} energy has no psi parameters")
        return self

    def nonsmooth_mask(self, mu, step: float) -> np.ndarray:
        """Coordinates where a finite difference of size ``step`` crosses a kink."""
        return np.zeros(as_array(mu).size, dtype=bool)


class ZeroEnergy(EnergyFunction):
    family = "zero"

    def value_and_grad(self, mu):
        return 0.0, np.zeros(as_array(mu).size)

    def smoothness_bound(self):
        return 0.0


class QuadraticEnergy(EnergyFunction):
    """weight/2 * ||mu - target||^2; a smooth convex test energy."""

    family = "quadratic"

    def __init__(self, target, weight: float = 1.0):
        self.target = np.asarray(as_array(target), dtype=float)
        self.weight = float(weight)
        if self.weight < 0:
            raise ValueError("quadratic weight must be nonnegative")

    def value_and_grad(self, mu):
        diff = as_array(mu) - self.target
        return 0.5 * self.weight * float(diff @ diff), self.weight * diff

    def smoothness_bound(self):
        return self.weight


@dataclass(frozen=True)
class LinearMeasurement:
    """Linear functional a . mu + offset of the marginals."""

    a: np.ndarray
    offset: float = 0.0
    loss: str = "smoothed_hinge"

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        if not np.all(np.isfinite(a)) or not np.isfinite(self.offset):
            raise ValueError("measurement weights must be finite")
        if self.loss not in SCALAR_LOSSES:
            raise ValueError(f"unknown scalar loss {self.loss!r}")
        object.__setattr__(self, "a", a)

    def __call__(self, mu) -> float:
        return float(self.a @ as_array(mu) + self.offset)


class MeasurementEnergy(EnergyFunction):
    """sum_j psi_j * loss_j(a_j . mu + b_j)."""

    family = "measurement"

    def __init__(self, measurements: Sequence[LinearMeasurement], psi):
        self.measurements = list(measurements)
        if not self.measurements:
            raise ValueError("need at least one measurement")
        self.A = np.vstack([m.a for m in self.measurements])
        self.b = np.array([m.offset for m in self.measurements])
        self._losses = [SCALAR_LOSSES[m.loss] for m in self.measurements]
        self._psi = np.asarray(psi, dtype=float).reshape(-1)
        if self._psi.size != len(self.measurements):
            raise ValueError(f"{len(self.measurements)} measurements but {self._psi.size} psi values")
        if not np.all(np.isfinite(self._psi)):
            raise ValueError("psi must be finite")
        self._uniform_loss = len({m.loss for m in self.measurements}) == 1

    @property
    def psi(self):
        return self._psi

    @property
    def convex(self):
        return bool(np.all(self._psi >= 0))

    def _scalar(self, z):
        if self._uniform_loss:
            return self._losses[0](z)
        pairs = [f(zj) for f, zj in zip(self._losses, z)]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def measure(self, mu) -> np.ndarray:
        mu = as_array(mu)
        if mu.size != self.A.shape[1]:
            raise ValueError(f"dimension mismatch: mu has {mu.size}, measurements {self.A.shape[1]}")
        return self.A @ mu + self.b

    def value_and_grad(self, mu):
        val, der = self._scalar(self.measure(mu))
        return float(self._psi @ val), self.A.T @ (self._psi * der)

    def psi_jacobian(self, mu):
        _, der = self._scalar(self.measure(mu))
        return der[:, None] * self.A

    def with_psi(self, psi):
        return MeasurementEnergy(self.measurements, psi)

    def without_negative_terms(self) -> "MeasurementEnergy":
        return self.with_psi(np.maximum(self._psi, 0.0))

    def smoothness_bound(self):
        # every scalar loss has curvature <= 1
        w = np.sqrt(np.abs(self._psi))
        gram = (w[:, None] * self.A) @ (w[:, None] * self.A).T
        return float(np.linalg.eigvalsh(gram)[-1])

    def nonsmooth_mask(self, mu, step):
        z = self.measure(mu)
        reach = 2 * step * np.abs(self.A).max(axis=1)
        near = (np.abs(z) <= reach) | (np.abs(z - 1) <= reach)
        return np.any(self.A[near] != 0, axis=0) if near.any() else super().nonsmooth_mask(mu, step)


class MeanFieldEnergy(EnergyFunction):
    """-sum_c <theta_c, outer product of the clique's node marginals>.

    Only node blocks receive gradient.  Non-convex in general.
    """

    family = "mean_field"
    convex = False

    def __init__(self, n: int, k: int, cliques):
        self.n, self.k = n, k
        self.cliques = []
        for nodes, potential in cliques:
            nodes = tuple(int(i) for i in nodes)
            potential = np.asarray(potential, dtype=float)
            if len(set(nodes)) != len(nodes) or min(nodes) < 0 or max(nodes) >= n:
                raise ValueError(f"invalid clique nodes {nodes}")
            if potential.shape != (k,) * len(nodes):
                raise ValueError(f"clique potential shape {potential.shape} != {(k,) * len(nodes)}")
            self.cliques.append((nodes, potential))

    def value_and_grad(self, mu):
        mu = as_array(mu)
        if mu.size != layout_size(self.n, self.k):
            raise ValueError("dimension mismatch")
        node = mu[: self.n * self.k].reshape(self.n, self.k)
        grad = np.zeros_like(mu)
        gnode = grad[: self.n * self.k].reshape(self.n, self.k)
        total = 0.0
        for nodes, pot in self.cliques:
            vecs = [node[i] for i in nodes]
            total -= float(_contract(pot, vecs))
            for j, i in enumerate(nodes):
                others = vecs[:j] + [None] + vecs[j + 1:]
                gnode[i] -= _contract(pot, others)
        return total, grad


def _contract(tensor, vecs):
    """Contract ``tensor`` with each vector in ``vecs``; a None slot stays open."""
    out = tensor
    axis = 0
    for v in vecs:
        if v is None:
            axis += 1
        else:
            out = np.tensordot(out, v, axes=([axis], [0]))
    return out


class PrototypeEnergy(EnergyFunction):
    """psi * min_i ||prototype_i - stat(mu)||_1 over admissible prototypes.

    ``unigram`` mode compares the summed node marginals U(mu) (length k) with
    unigram count vectors.  ``full`` mode compares the concatenated node
    marginals with one-hot word encodings, restricted to prototypes whose
    length matches the chain.
    """

    family = "prototype"
    convex = False

    def __init__(self, mode: str, prototypes, psi: float, k: int):
        if mode not in ("unigram", "full"):
            raise ValueError(f"unknown prototype mode {mode!r}")
        self.mode, self.k = mode, k
        self.prototypes = [np.asarray(p, dtype=float).ravel() for p in prototypes]
        if not self.prototypes:
            raise ValueError("empty prototype set")
        for p in self.prototypes:
            if not np.all(np.isfinite(p)) or p.size % k:
                raise ValueError("prototype must be finite with length a multiple of k")
            if mode == "unigram" and p.size != k:
                raise ValueError("unigram prototypes have length k")
        self._psi = np.atleast_1d(np.asarray(psi, dtype=float)).reshape(1)
        self._buckets = {}
        for i, p in enumerate(self.prototypes):
            self._buckets.setdefault(p.size // k, []).append(i)

    @property
    def psi(self):
        return self._psi

    def with_psi(self, psi):
        return PrototypeEnergy(self.mode, self.prototypes, float(np.ravel(psi)[0]), self.k)

    def _stat(self, mu):
        n = _chain_length(mu.size, self.k)
        node = mu[: n * self.k]
        if self.mode == "unigram":
            return n, node.reshape(n, self.k).sum(axis=0), list(range(len(self.prototypes)))
        admissible = self._buckets.get(n, [])
        if not admissible:
            raise ValueError(f"no prototype of length {n}")
        return n, node, admissible

    def _distances(self, mu):
        n, stat, admissible = self._stat(mu)
        dist = np.array([np.abs(self.prototypes[i] - stat).sum() for i in admissible])
        return n, stat, admissible, dist

    def nearest(self, mu):
        """(distance, prototype index) of the closest admissible prototype."""
        _, _, admissible, dist = self._distances(as_array(mu))
        j = int(np.argmin(dist))
        return float(dist[j]), admissible[j]

    def _unit(self, mu):
        n, stat, admissible, dist = self._distances(mu)
        j = int(np.argmin(dist))
        sign = np.sign(stat - self.prototypes[admissible[j]])
        sub = np.zeros_like(mu)
        if self.mode == "unigram":
            sub[: n * self.k] = np.tile(sign, n)
        else:
            sub[: n * self.k] = sign
        return float(dist[j]), sub

    def value_and_grad(self, mu):
        d, sub = self._unit(as_array(mu))
        psi = float(self._psi[0])
        return psi * d, psi * sub

    def psi_jacobian(self, mu):
        return self._unit(as_array(mu))[1][None, :]

    def nonsmooth_mask(self, mu, step):
        mu = as_array(mu)
        n, stat, admissible, dist = self._distances(mu)
        mask = np.zeros(mu.size, dtype=bool)
        order = np.sort(dist)
        if order.size > 1 and order[1] - order[0] <= 2 * step * max(n, 1):
            mask[: n * self.k] = True
            return mask
        best = self.prototypes[admissible[int(np.argmin(dist))]]
        close = np.abs(stat - best) <= 2 * step * (n if self.mode == "unigram" else 1)
        mask[: n * self.k] = np.tile(close, n) if self.mode == "unigram" else close
        return mask


class PoissonEnergy(EnergyFunction):
    """Negative Poisson log-likelihood of node counts with rate scale * mu.

    value = sum over observed entries of scale*mu - y*log(scale*mu); the
    log(y!) constant is dropped.  Node entries are floored at 1e-8.
    """

    family = "poisson"

    def __init__(self, counts, scale: float, mask=None):
        counts = np.asarray(counts, dtype=float)
        if counts.ndim != 2:
            raise ValueError("counts must be an (n, k) table")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("counts must be nonnegative integers")
        if not scale > 0:
            raise ValueError("Poisson scale must be positive")
        self.counts = counts
        self.scale = float(scale)
        self.n, self.k = counts.shape
        self.mask = np.ones_like(counts, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != counts.shape:
            raise ValueError("mask shape must match counts")
        self._y = np.where(self.mask, counts, 0.0).ravel()
        self._m = self.mask.ravel().astype(float)

    def value_and_grad(self, mu):
        mu = as_array(mu)
        nk = self.n * self.k
        if mu.size != layout_size(self.n, self.k):
            raise ValueError("dimension mismatch")
        p = np.maximum(mu[:nk], POISSON_FLOOR)
        rate = self.scale * p
        val = float(self._m @ rate - self._y @ np.log(rate))
        grad = np.zeros_like(mu)
        grad[:nk] = self._m * self.scale - self._y / p
        return val, grad


def _chain_length(size: int, k: int) -> int:
    # size = n k + (n - 1) k^2
    n = (size + k * k) // (k + k * k)
    if layout_size(n, k) != size:
        raise ValueError(f"vector of size {size} is not a chain layout for k={k}")
    return n


class GradientReport(NamedTuple):
    max_rel_error: float
    checked: int
    skipped: int


def check_gradient(energy: EnergyFunction, mu, step: float = 1e-5) -> GradientReport:
    """Central finite differences of ``energy.value`` against ``grad_mu``.

    The error is normalized by the largest gradient magnitude (floored at 1)
    so that near-zero coordinates do not blow up the ratio.
    """
    mu = np.array(as_array(mu), dtype=float)
    grad = energy.grad_mu(mu)
    skip = energy.nonsmooth_mask(mu, step)
    errs = []
    for i in np.flatnonzero(~skip):
        old = mu[i]
        mu[i] = old + step
        fp = energy.value(mu)
        mu[i] = old - step
        fm = energy.value(mu)
        mu[i] = old
        errs.append(abs((fp - fm) / (2 * step) - grad[i]))
    scale = max(1.0, float(np.abs(grad).max())) if grad.size else 1.0
    err = max(errs) / scale if errs else 0.0
    return GradientReport(err, len(errs), int(skip.sum()))


# energy spec documents -------------------------------------------------

@dataclass
class EnergySpec:
    """A family plus parameters; ``build`` makes the energy for one chain.

    Measurement vectors are either sparse ``(block, index, weight)`` triples
    for a fixed chain length or per-label weights applied at every node
    (``label_weights``), which work for any length.
    """

    family: str
    params: dict

    def num_psi(self) -> int:
        if self.family == "measurement":
            return len(self.params["measurements"])
        if self.family == "prototype":
            return 1
        return 0

    def initial_psi(self) -> np.ndarray:
        psi = self.params.get("psi")
        if psi is None:
            return np.zeros(self.num_psi())
        return np.atleast_1d(np.asarray(psi, dtype=float))

    def build(self, n: int, k: int, psi=None) -> EnergyFunction:
        psi = self.initial_psi() if psi is None else np.atleast_1d(np.asarray(psi, dtype=float))
        p = self.params
        if self.family == "zero":
            return ZeroEnergy()
        if self.family == "measurement":
            return MeasurementEnergy([_measurement(m, n, k) for m in p["measurements"]], psi)
        if self.family == "prototype":
            return PrototypeEnergy(p["mode"], p["prototypes"], float(psi[0]), k)
        if self.family == "poisson":
            counts = np.asarray(p["counts"], dtype=float)
            if counts.shape != (n, k):
                raise ValueError(f"counts shape {counts.shape} does not match chain ({n}, {k})")
            return PoissonEnergy(counts, p["scale"], p.get("mask"))
        if self.family == "mean_field":
            return MeanFieldEnergy(n, k, [(c["nodes"], c["potential"]) for c in p["cliques"]])
        if self.family == "quadratic":
            return QuadraticEnergy(p["target"], p.get("weight", 1.0))
        raise ValueError(f"unknown energy family {self.family!r}")

    def to_dict(self) -> dict:
        return {"schema": ENERGY_SCHEMA, "family": self.family, **_jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergySpec":
        d = dict(d)
        schema = d.pop("schema", ENERGY_SCHEMA)
        if schema != ENERGY_SCHEMA:
            raise ValueError(f"unsupported energy schema {schema!r}")
        family = d.pop("family")
        return cls(family, d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "EnergySpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _measurement(m: dict, n: int, k: int) -> LinearMeasurement:
    a = np.zeros(layout_size(n, k))
    if "label_weights" in m:
        w = np.asarray(m["label_weights"], dtype=float)
        if w.size != k:
            raise ValueError("label_weights needs one weight per state")
        a[: n * k] = np.tile(w, n)
    for block, index, weight in m.get("entries", []):
        block, index = int(block), int(index)
        if block < n:
            if index >= k:
                raise ValueError(f"index {index} out of range for node block")
            pos = block * k + index
        elif block < 2 * n - 1:
            if index >= k * k:
                raise ValueError(f"index {index} out of range for edge block")
            pos = n * k + (block - n) * k * k + index
        else:
            raise ValueError(f"block {block} out of range for n={n}")
        a[pos] += float(weight)
    return LinearMeasurement(a, float(m.get("offset", 0.0)), m.get("loss", "smoothed_hinge"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
