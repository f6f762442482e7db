"""Learning CRF parameters theta and energy parameters psi.

Both learners ascend the surrogate likelihood sum_i log Q(y_i; mu_i), where
Q is the chain MRF with parameters rho_i = theta(x_i) - grad_mu L_psi(mu_i)
and mu_i solves the augmented inference problem for example i.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainModel, statistic_indices, sufficient_statistics
from .energies import EnergySpec, MeasurementEnergy
from .inference import AugmentedProblem, SolverConfig, solve
from .oracle import map_decode, marginal_arrays

log = logging.getLogger(__name__)

DATASET_SCHEMA = "nonlocal-crf/dataset/1"


class LearningDiverged(RuntimeError):
    pass


@dataclass
class Example:
    features: np.ndarray  # (n, d) per-node features
    labels: np.ndarray  # (n,)
    global_features: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.shape[0] != self.labels.size:
            raise ValueError("one feature row per label is required")

    @property
    def n(self):
        return self.labels.size


@dataclass
class Dataset:
    examples: list
    k: int

    def __post_init__(self):
        dims = {ex.features.shape[1] for ex in self.examples}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature dimensions {dims}")
        for ex in self.examples:
            if ex.labels.size and (ex.labels.min() < 0 or ex.labels.max() >= self.k):
                raise ValueError("label out of range")

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def feature_dim(self) -> int:
        return self.examples[0].features.shape[1] if self.examples else 0

    def dumps(self) -> str:
        lines = [json.dumps({"schema": DATASET_SCHEMA, "k": self.k, "feature_dim": self.feature_dim})]
        for ex in self.examples:
            rec = {"features": ex.features.tolist(), "labels": ex.labels.tolist()}
            if ex.global_features is not None:
                rec["global_features"] = np.asarray(ex.global_features).tolist()
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Dataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty dataset file")
        head = json.loads(lines[0])
        if head.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"unsupported dataset schema {head.get('schema')!r}")
        examples = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            examples.append(Example(np.asarray(rec["features"], dtype=float).reshape(-1, head["feature_dim"]),
                                    rec["labels"], rec.get("global_features")))
        return cls(examples, int(head["k"]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            return cls.loads(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


# parametrizations ---------------------------------------------------------------

@dataclass
class ThetaParametrization:
    """Node potentials = features @ node_weights; one tied transition table."""

    node_weights: np.ndarray  # (d, k)
    edge_weights: np.ndarray  # (k, k)

    @classmethod
    def zeros(cls, d: int, k: int) -> "ThetaParametrization":
        return cls(np.zeros((d, k)), np.zeros((k, k)))

    @property
    def k(self):
        return self.edge_weights.shape[0]

    def copy(self):
        return ThetaParametrization(self.node_weights.copy(), self.edge_weights.copy())

    def to_dict(self):
        return {"node_weights": self.node_weights.tolist(), "edge_weights": self.edge_weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["node_weights"], dtype=float), np.asarray(d["edge_weights"], dtype=float))


def theta_of(x, p: ThetaParametrization) -> ChainModel:
    features = x.features if isinstance(x, Example) else np.atleast_2d(x)
    if features.shape[1] != p.node_weights.shape[0]:
        raise ValueError(f"feature dim {features.shape[1]} != weight rows {p.node_weights.shape[0]}")
    return ChainModel.homogeneous(features @ p.node_weights, p.edge_weights)


def theta_gradient(x, p: ThetaParametrization, residual: np.ndarray):
    """Chain rule from a flat-layout residual (d/d theta) to the weights."""
    features = x.features if isinstance(x, Example) else np.atleast_2d(x)
    n, k = features.shape[0], p.k
    node = residual[: n * k].reshape(n, k)
    edge = residual[n * k:].reshape(n - 1, k, k)
    return features.T @ node, edge.sum(axis=0)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MeanMapFeatures:
    """Random Fourier features averaged over positions (RBF kernel mean map)."""

    input_dim: int
    num_features: int = 1000
    bandwidth: float = 1.0
    seed: int = 0
    projection: np.ndarray = field(init=False, repr=False)
    phase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.projection = rng.normal(size=(self.num_features, self.input_dim))
        self.phase = rng.uniform(0, 2 * np.pi, size=self.num_features)

    def feature_map(self, features) -> np.ndarray:
        features = np.atleast_2d(features)
        z = features @ self.projection.T / self.bandwidth + self.phase
        return np.sqrt(2.0 / self.num_features) * np.cos(z)

    def __call__(self, x) -> np.ndarray:
        features = x.features if isinstance(x, Example) else x
        if features is None or np.size(features) == 0:
            raise ValueError("mean map needs per-node features")
        return self.feature_map(features).mean(axis=0)


def mean_map(x, f: MeanMapFeatures) -> np.ndarray:
    return f(x)


@dataclass
class PsiParametrization:
    """psi either constant or link(bias + phi(x) @ weights)."""

    mode: str = "constant"
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray | None = None  # (g, num_psi)
    link: str = "softplus"  # or "identity" (projected to >= 0 for convex energies)

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if self.mode not in ("constant", "featurized"):
            raise ValueError(f"unknown psi mode {self.mode!r}")
        if self.mode == "featurized" and self.weights is None:
            raise ValueError("featurized psi needs a weight matrix")
        if self.link not in ("softplus", "identity"):
            raise ValueError(f"unknown link {self.link!r}")

    @property
    def num_psi(self):
        return self.values.size

    def copy(self):
        return PsiParametrization(self.mode, self.values.copy(),
                                  None if self.weights is None else self.weights.copy(), self.link)

    def _pre(self, phi):
        return self.values + (phi @ self.weights if self.weights is not None else 0.0)

    def psi_of(self, phi=None) -> np.ndarray:
        if self.mode == "constant":
            return self.values.copy()
        z = self._pre(phi)
        return _softplus(z) if self.link == "softplus" else np.maximum(z, 0.0)

    def gradient(self, g_psi, phi=None):
        """(d values, d weights) from the ascent direction in psi."""
        if self.mode == "constant":
            return g_psi, None
        z = self._pre(phi)
        slope = _sigmoid(z) if self.link == "softplus" else (z > 0).astype(float)
        gv = g_psi * slope
        return gv, np.outer(phi, gv)

    def to_dict(self):
        return {"mode": self.mode, "values": self.values.tolist(), "link": self.link,
                "weights": None if self.weights is None else self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        w = d.get("weights")
        return cls(d["mode"], d["values"], None if w is None else np.asarray(w, dtype=float), d.get("link", "softplus"))

    @classmethod
    def featurized_from(cls, constant: "PsiParametrization", dim: int, link="softplus"):
        """Featurized psi that starts out equal to a constant one."""
        vals = constant.values
        bias = np.log(np.expm1(np.maximum(vals, 1e-6))) if link == "softplus" else vals.copy()
        return cls("featurized", bias, np.zeros((dim, vals.size)), link)


# learner --------------------------------------------------------------------------

@dataclass
class LearnerConfig:
    algorithm: str = "doubly-stochastic"
    theta_step: float = 0.1
    psi_step: float = 0.01
    schedule: str = "constant"  # or "inv_sqrt"
    max_iters: int = 1000  # sampled steps (doubly-stochastic) or outer iterations (double-loop)
    m_steps: int = 1
    learn_theta: bool = True
    learn_psi: bool = True
    project_psi: bool = True
    theta_l2: float = 0.0
    plateau_tol: float = 1e-6
    inner: SolverConfig = field(default_factory=lambda: SolverConfig(max_iters=30))
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("doubly-stochastic", "double-loop"):
            raise ValueError(f"unknown learner {self.algorithm!r}")
        if self.theta_step < 0 or self.psi_step < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.schedule not in ("constant", "inv_sqrt"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def rate(self, base, t):
        return base / np.sqrt(t) if self.schedule == "inv_sqrt" else base


@dataclass
class Model:
    """Everything needed to predict: theta map, psi map, energy family."""

    theta: ThetaParametrization
    psi: PsiParametrization
    energy: EnergySpec | None = None
    features: MeanMapFeatures | None = None

    def phi(self, ex: Example):
        if self.psi.mode != "featurized":
            return None
        if ex.global_features is not None:
            return np.asarray(ex.global_features, dtype=float)
        if self.features is None:
            raise ValueError("featurized psi needs mean-map features or global features")
        return self.features(ex)

    def problem(self, ex: Example, drop_negative: bool = True) -> AugmentedProblem:
        base = theta_of(ex, self.theta)
        if self.energy is None or self.psi.num_psi == 0 and self.energy.num_psi() > 0:
            return AugmentedProblem(base)
        energy = self.energy.build(ex.n, self.theta.k, self.psi.psi_of(self.phi(ex)))
        if drop_negative and isinstance(energy, MeasurementEnergy):
            energy = energy.without_negative_terms()
        return AugmentedProblem(base, energy)

    def to_dict(self):
        d = {"theta": self.theta.to_dict(), "psi": self.psi.to_dict(),
             "energy": None if self.energy is None else self.energy.to_dict()}
        if self.features is not None:
            f = self.features
            d["mean_map"] = {"input_dim": f.input_dim, "num_features": f.num_features,
                             "bandwidth": f.bandwidth, "seed": f.seed}
        return d

    @classmethod
    def from_dict(cls, d):
        energy = None if d.get("energy") is None else EnergySpec.from_dict(d["energy"])
        mm = d.get("mean_map")
        return cls(ThetaParametrization.from_dict(d["theta"]), PsiParametrization.from_dict(d["psi"]),
                   energy, None if mm is None else MeanMapFeatures(**mm))


def surrogate_terms(model: Model, ex: Example, mu):
    """log Q(y; mu), its theta-residual and its psi ascent direction at fixed mu.

    Uses the exact marginals m of rho = theta(x) - grad L(mu), so these are
    the true partial derivatives of log Q at fixed mu.
    """
    p = model.problem(ex, drop_negative=False)
    mu = np.asarray(mu)
    grad_l = p.energy.grad_mu(mu)
    rho = ChainModel(p.n, p.k, p.base.values - grad_l)
    m, log_z = marginal_arrays(rho)
    idx = statistic_indices(p.n, p.k, ex.labels)
    log_q = float(rho.values[idx].sum() - log_z)
    s = sufficient_statistics((p.n, p.k), ex.labels).values
    residual = s - m
    g_psi = p.energy.psi_grad(mu, s, m) if p.energy.num_psi() else np.zeros(0)
    return log_q, residual, g_psi


def surrogate_likelihood(model: Model, data, mus) -> float:
    return float(sum(surrogate_terms(model, ex, mu)[0] for ex, mu in zip(data, mus)))


def _apply(model: Model, cfg: LearnerConfig, t, residual_grads, psi_grads, ex_list, n_avg=1):
    """One gradient-ascent step on theta and psi (gradients already summed)."""
    lr_t = cfg.rate(cfg.theta_step, t) / n_avg
    lr_p = cfg.rate(cfg.psi_step, t) / n_avg
    if cfg.learn_theta:
        gn, ge = residual_grads
        model.theta.node_weights += lr_t * (gn - cfg.theta_l2 * model.theta.node_weights)
        model.theta.edge_weights += lr_t * (ge - cfg.theta_l2 * model.theta.edge_weights)
    if cfg.learn_psi and model.psi.num_psi and lr_p > 0:
        gv, gw = psi_grads
        model.psi.values += lr_p * gv
        if gw is not None:
            model.psi.weights += lr_p * gw
        convex = model.energy is not None and model.energy.family in ("measurement", "poisson", "quadratic")
        if cfg.project_psi and convex and model.psi.mode == "constant":
            np.maximum(model.psi.values, 0.0, out=model.psi.values)


def _example_grads(model, ex, residual, g_psi):
    gn, ge = theta_gradient(ex, model.theta, residual)
    phi = model.phi(ex)
    gv, gw = model.psi.gradient(g_psi, phi) if model.psi.num_psi else (np.zeros(0), None)
    return (gn, ge), (gv, gw)


def train_doubly_stochastic(data: Dataset, model: Model, cfg: LearnerConfig | None = None):
    """Sample an example, solve for mu_i, take one step on theta and psi.

    The theta direction is S(y_i) - mu_i and the psi direction is the energy's
    ``psi_grad`` at mu_i (chained through the psi parametrization).  Stops
    after ``cfg.max_iters`` steps.  Returns ``(model, history)``.
    """
    cfg = cfg or LearnerConfig()
    if not len(data):
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    history = []
    version = 0
    for t in range(1, cfg.max_iters + 1):
        i = int(rng.integers(len(data)))
        ex = data[i]
        p = model.problem(ex, drop_negative=False)
        solved_at = version
        try:
            res = solve(p, cfg.inner)
        except Exception as exc:
            raise RuntimeError(f"inner solve failed on example {i}: {exc}") from exc
        mu = res.mu.values
        s = sufficient_statistics((ex.n, data.k), ex.labels).values
        residual = s - mu
        g_psi = p.energy.psi_grad(mu, s) if p.energy.num_psi() else np.zeros(0)
        th, ps = _example_grads(model, ex, residual, g_psi)
        _apply(model, cfg, t, th, ps, [ex])
        checked, infeasible = res.trace.feasibility_counts()
        history.append({
            "iteration": t, "example": i, "solved_at_version": solved_at, "updated_version": version,
            "inner_iterations": res.trace.iterations, "psi": model.psi.values.tolist(),
            "residual_l1": float(np.abs(residual).sum()),
            "inner_checked": checked, "inner_infeasible": infeasible,
        })
        version += 1
    return model, history


def train_double_loop(data: Dataset, model: Model, cfg: LearnerConfig | None = None):
    """Variational EM: solve every example (E), then gradient steps on the
    surrogate likelihood with mu fixed (M), using m_i = marginals(rho_i)."""
    cfg = cfg or LearnerConfig(algorithm="double-loop")
    if not len(data):
        raise ValueError("empty dataset")
    history = []
    initial = None
    for it in range(1, cfg.max_iters + 1):
        mus, checked, infeasible = [], 0, 0
        for i, ex in enumerate(data):
            try:
                res = solve(model.problem(ex, drop_negative=False), cfg.inner)
            except Exception as exc:
                raise RuntimeError(f"inner solve failed on example {i}: {exc}") from exc
            mus.append(res.mu.values)
            c, b = res.trace.feasibility_counts()
            checked, infeasible = checked + c, infeasible + b
        surrogate = None
        for _ in range(cfg.m_steps):
            acc_t, acc_p, total = None, None, 0.0
            for ex, mu in zip(data, mus):
                log_q, residual, g_psi = surrogate_terms(model, ex, mu)
                total += log_q
                th, ps = _example_grads(model, ex, residual, g_psi)
                acc_t = th if acc_t is None else (acc_t[0] + th[0], acc_t[1] + th[1])
                if acc_p is None:
                    acc_p = ps
                else:
                    acc_p = (acc_p[0] + ps[0], None if ps[1] is None else acc_p[1] + ps[1])
            surrogate = total if surrogate is None else surrogate
            _apply(model, cfg, it, acc_t, acc_p, data, n_avg=len(data))
        history.append({"iteration": it, "surrogate": surrogate, "psi": model.psi.values.tolist(),
                        "inner_checked": checked, "inner_infeasible": infeasible})
        if initial is None:
            initial = surrogate
        elif surrogate < initial - 10 * abs(initial):
            raise LearningDiverged(f"surrogate likelihood fell from {initial} to {surrogate}")
        if len(history) > 1:
            prev = history[-2]["surrogate"]
            if abs(surrogate - prev) <= cfg.plateau_tol * max(1.0, abs(prev)):
                break
    return model, history


def train(data: Dataset, model: Model, cfg: LearnerConfig):
    if cfg.algorithm == "double-loop":
        return train_double_loop(data, model, cfg)
    return train_doubly_stochastic(data, model, cfg)


# evaluation -----------------------------------------------------------------------

def segments(labels):
    """Maximal runs of equal labels as (start, end, label) triples."""
    out, start = [], 0
    labels = list(labels)
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((start, i, labels[start]))
            start = i
    return out


def constraint_violations(spec: EnergySpec | None, y, k) -> int:
    """Number of measurement constraints a . S(y) + b >= 1 that y breaks."""
    if spec is None or spec.family != "measurement":
        return 0
    y = np.asarray(y)
    energy = spec.build(y.size, k, np.ones(spec.num_psi()))
    z = energy.measure(sufficient_statistics((y.size, k), y).values)
    return int(np.sum(z < 1 - 1e-9))


def predict(model: Model, ex: Example, solver: SolverConfig | None = None, return_trace: bool = False):
    """MAP labels under the augmented model; with ``return_trace`` also the
    solver trace (None when no solve was needed)."""
    p = model.problem(ex)
    trivial = p.energy.family == "zero" or (isinstance(p.energy, MeasurementEnergy) and not np.any(p.energy.psi))
    if trivial:
        y, trace = map_decode(p.base), None
    else:
        res = solve(p, solver)
        y, trace = map_decode(res.theta_tilde), res.trace
    return (y, trace) if return_trace else y


def evaluate(data: Dataset, model: Model, solver: SolverConfig | None = None,
             constraints: EnergySpec | None = None) -> dict:
    """Token accuracy, exact-boundary segment F1 and constraint violations."""
    correct = total = 0
    tp = n_pred = n_gold = 0
    violations = []
    checked = infeasible = 0
    for ex in data:
        y_hat, trace = predict(model, ex, solver, return_trace=True)
        if trace is not None:
            c, b = trace.feasibility_counts()
            checked, infeasible = checked + c, infeasible + b
        correct += int(np.sum(y_hat == ex.labels))
        total += ex.n
        gold, pred = set(segments(ex.labels)), set(segments(y_hat))
        tp += len(gold & pred)
        n_pred += len(pred)
        n_gold += len(gold)
        violations.append(constraint_violations(constraints, y_hat, data.k))
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    v = np.asarray(violations)
    return {
        "token_accuracy": correct / total if total else 0.0,
        "segment_f1": f1,
        "mean_violations": float(v.mean()) if v.size else 0.0,
        "total_violations": int(v.sum()),
        "satisfaction_rate": float(np.mean(v == 0)) if v.size else 1.0,
        "examples": len(data),
        "iterates_checked": checked,
        "iterates_infeasible": infeasible,
    }
