"""Synthetic benchmark generators and the experiment runner.

Three desk-scale tasks:

* ``softcon``: label sequences from a chain CRF, filtered to satisfy global
  count constraints, observed through noisy label indicators.
* ``prototype``: noisy spellings of words from a small vocabulary.
* ``cgm``: a migration-style chain over grid cells observed through Poisson
  counts of its node marginals.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainModel
from .energies import EnergySpec
from .inference import SolverConfig
from .learning import Dataset, Example
from .oracle import marginals

log = logging.getLogger(__name__)

REPORT_SCHEMA = "nonlocal-crf/report/1"


class InfeasibleSpec(ValueError):
    pass


@dataclass
class BenchmarkSpec:
    task: str
    n: int
    k: int
    n_train: int = 0
    n_dev: int = 0
    n_test: int = 0
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.task not in GENERATORS:
            raise ValueError(f"unknown task {self.task!r}; choose from {sorted(GENERATORS)}")
        if self.n < 1 or self.k < 2 or min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("sizes must be positive")


# softcon --------------------------------------------------------------------------

# label 0 = A, 1 = B, 2 = C, 3 = D
SOFTCON_DEFAULTS = {
    "noise": 0.5,
    "confusion": 0.1,  # chance a node's features mostly show another label
    "confusion_strength": 0.8,  # weight left on the true label at a confused node
    "signal": [1.0, 1.0, 1.0, 0.5],  # per-label indicator strength; D is hard to see
    "transition_scale": 1.0,
    "label_bias": [0.5, 0.5, -1.0, -1.0],
    "constraints": [
        # #D >= 1
        {"name": "at_least_one_D", "label_weights": [0.0, 0.0, 0.0, 1.0], "offset": 0.0},
        # 2 - #D >= 1, i.e. at most one D
        {"name": "at_most_one_D", "label_weights": [0.0, 0.0, 0.0, -1.0], "offset": 2.0},
        # 2 - #C >= 1, i.e. at most one C
        {"name": "at_most_one_C", "label_weights": [0.0, 0.0, -1.0, 0.0], "offset": 2.0},
    ],
}


def _params(spec, defaults):
    p = dict(defaults)
    p.update(spec.params)
    return p


def constraint_energy(constraints, psi=None) -> EnergySpec:
    """Measurement energy spec for count constraints ``w . counts + offset >= 1``."""
    ms = [{"name": c.get("name", f"c{j}"), "label_weights": list(c["label_weights"]),
           "offset": float(c["offset"]), "loss": "smoothed_hinge"} for j, c in enumerate(constraints)]
    params = {"measurements": ms}
    if psi is not None:
        params["psi"] = list(np.broadcast_to(np.asarray(psi, dtype=float), (len(ms),)))
    return EnergySpec("measurement", params)


def satisfies(constraints, y, k) -> bool:
    counts = np.bincount(np.asarray(y), minlength=k)
    return all(float(np.dot(c["label_weights"], counts)) + c["offset"] >= 1 - 1e-9 for c in constraints)


def _sample_chain(rng, theta: ChainModel, size: int) -> np.ndarray:
    """Forward-filter backward-sample ``size`` labelings (exact)."""
    n, k = theta.n, theta.k
    node, edge = theta.node, theta.edge
    # backward messages: beta[i][a] = log sum over y_{i+1:} given y_i = a
    beta = np.zeros((n, k))
    for i in range(n - 2, -1, -1):
        m = edge[i] + node[i + 1] + beta[i + 1]
        beta[i] = np.logaddexp.reduce(m, axis=1)
    out = np.empty((size, n), dtype=np.intp)
    logits = node[0] + beta[0]
    out[:, 0] = _categorical(rng, np.broadcast_to(logits, (size, k)))
    for i in range(1, n):
        logits = edge[i - 1][out[:, i - 1]] + node[i] + beta[i]
        out[:, i] = _categorical(rng, logits)
    return out


def _categorical(rng, logits):
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random((p.shape[0], 1))
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)


def _noisy_indicators(rng, y, k, noise, confusion=0.0, strength=1.0, signal=None):
    scale = np.ones(k) if signal is None else np.resize(np.asarray(signal, dtype=float), k)
    x = np.eye(k)[y] * scale[y][:, None] + noise * rng.normal(size=(len(y), k))
    if confusion > 0:
        hit = rng.random(len(y)) < confusion
        other = (y + rng.integers(1, k, size=len(y))) % k
        x[hit] += np.eye(k)[other[hit]] - (1 - strength) * np.eye(k)[y[hit]]
    return np.hstack([x, np.ones((len(y), 1))])  # bias column


def generate_softcon(spec: BenchmarkSpec):
    """Returns ``(train, dev, test, energy_spec, truth)``; ``truth`` is the generating chain."""
    p = _params(spec, SOFTCON_DEFAULTS)
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n, spec.k
    bias = np.resize(np.asarray(p["label_bias"], dtype=float), k)
    transition = p["transition_scale"] * rng.normal(size=(k, k))
    truth = ChainModel.homogeneous(np.tile(bias, (n, 1)), transition)
    total = spec.n_train + spec.n_dev + spec.n_test
    constraints = p["constraints"]
    kept, drawn = [], 0
    while len(kept) < total:
        batch = _sample_chain(rng, truth, max(256, 2 * (total - len(kept))))
        drawn += len(batch)
        kept.extend(y for y in batch if satisfies(constraints, y, k))
        if drawn >= 1000 and len(kept) < 0.01 * drawn:
            raise InfeasibleSpec(f"rejection rate above 99% ({len(kept)} of {drawn} kept)")
    kept = kept[:total]
    examples = [Example(_noisy_indicators(rng, y, k, p["noise"], p["confusion"], p["confusion_strength"],
                                             p["signal"]), y)
                for y in kept]
    a, b = spec.n_train, spec.n_train + spec.n_dev
    split = Dataset(examples[:a], k), Dataset(examples[a:b], k), Dataset(examples[b:], k)
    return (*split, constraint_energy(constraints), truth)


# prototype ------------------------------------------------------------------------

PROTOTYPE_DEFAULTS = {
    "vocabulary": 20,
    "min_length": 3,
    "max_length": 6,
    "noise": 1.0,
    "noise_levels": [0.5, 0.9],  # per-example noise level, drawn uniformly from this list
}


def unigram_prototype(word, k) -> np.ndarray:
    return np.bincount(np.asarray(word), minlength=k).astype(float)


def full_prototype(word, k) -> np.ndarray:
    return np.eye(k)[np.asarray(word)].ravel()


def generate_prototype(spec: BenchmarkSpec):
    """Returns ``(train, dev, test, vocabulary, unigram_spec, full_spec)``.

    Prototype sets are the distinct training words, as unigram count vectors
    and as one-hot concatenations.
    """
    p = _params(spec, PROTOTYPE_DEFAULTS)
    rng = np.random.default_rng(spec.seed)
    k = spec.k
    vocab, seen = [], set()
    while len(vocab) < p["vocabulary"]:
        length = int(rng.integers(p["min_length"], p["max_length"] + 1))
        w = tuple(int(c) for c in rng.integers(k, size=length))
        if w not in seen:
            seen.add(w)
            vocab.append(w)
    levels = p["noise_levels"]
    total = spec.n_train + spec.n_dev + spec.n_test
    examples = []
    for _ in range(total):
        w = vocab[int(rng.integers(len(vocab)))]
        noise = p["noise"] if not levels else float(levels[int(rng.integers(len(levels)))])
        x = np.eye(k)[list(w)] + noise * rng.normal(size=(len(w), k))
        examples.append(Example(np.hstack([x, np.ones((len(w), 1))]), w))
    a, b = spec.n_train, spec.n_train + spec.n_dev
    train = Dataset(examples[:a], k)
    words = sorted({tuple(ex.labels.tolist()) for ex in train.examples})
    unigram = EnergySpec("prototype", {"mode": "unigram", "prototypes": [unigram_prototype(w, k).tolist() for w in words]})
    full = EnergySpec("prototype", {"mode": "full", "prototypes": [full_prototype(w, k).tolist() for w in words]})
    return train, Dataset(examples[a:b], k), Dataset(examples[b:], k), vocab, unigram, full


# cgm ------------------------------------------------------------------------------

CGM_DEFAULTS = {
    "grid": 5,
    "scale": 100.0,
    "move_width": 2.0,
    "drift_width": 3.0,
}


@dataclass
class CGMInstance:
    base: ChainModel  # movement model only; observations enter through the energy
    energy: EnergySpec
    truth: ChainModel
    true_marginals: np.ndarray  # (n, k) node marginals of the generating chain
    counts: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.base.values, self.truth.values, self.counts):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()


def generate_cgm(spec: BenchmarkSpec) -> CGMInstance:
    """Population moving across a grid, observed as Poisson counts per cell."""
    p = _params(spec, CGM_DEFAULTS)
    g = int(p["grid"])
    if g * g != spec.k:
        raise ValueError(f"k={spec.k} is not a {g}x{g} grid")
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n, spec.k
    cells = np.array([(r, c) for r in range(g) for c in range(g)], dtype=float)
    dist2 = ((cells[:, None, :] - cells[None, :, :]) ** 2).sum(axis=2)
    transition = -dist2 / (2 * p["move_width"] ** 2)
    # the population drifts from one corner toward the opposite one
    start, end = np.zeros(2), np.full(2, g - 1.0)
    centers = start + np.linspace(0, 1, n)[:, None] * (end - start)
    node = -((cells[None, :, :] - centers[:, None, :]) ** 2).sum(axis=2) / (2 * p["drift_width"] ** 2)
    node += 0.3 * rng.normal(size=node.shape)
    truth = ChainModel.homogeneous(node, transition)
    true_marg = marginals(truth).marginals.node.copy()
    counts = rng.poisson(p["scale"] * true_marg).astype(float)
    base = ChainModel.homogeneous(np.zeros((n, k)), transition)
    energy = EnergySpec("poisson", {"counts": counts.tolist(), "scale": float(p["scale"])})
    return CGMInstance(base, energy, truth, true_marg, counts)


# convex suite ---------------------------------------------------------------------

def convex_suite(size: int = 50, seed: int = 0, max_n: int = 4, max_k: int = 3):
    """Random augmented problems with active smoothed-hinge measurement energies.

    Each has three measurements ``a_j = tile(w_j)`` whose offsets put the base
    marginals near the hinge knee, so the energy moves the optimum.  Instances
    where it barely moves (||mu* - mu_base||_inf <= 0.01 at one solver pass)
    are redrawn, as they make convergence-rate fits degenerate.
    """
    from .energies import LinearMeasurement, MeasurementEnergy
    from .inference import AugmentedProblem, SolverConfig, solve

    rng = np.random.default_rng(seed)
    out = []
    while len(out) < size:
        n = int(rng.integers(2, max_n + 1))
        k = int(rng.integers(2, max_k + 1))
        theta = ChainModel(n, k, rng.normal(size=n * k + (n - 1) * k * k))
        base_mu = marginals(theta).marginals.values
        ms = []
        for _ in range(3):
            a = np.zeros_like(base_mu)
            a[: n * k] = np.tile(rng.normal(size=k), n)
            ms.append(LinearMeasurement(a, float(rng.uniform(-0.5, 0.5) - a @ base_mu)))
        energy = MeasurementEnergy(ms, rng.uniform(0.2, 2.0, size=3))
        p = AugmentedProblem(theta, energy)
        mu = solve(p, SolverConfig(max_iters=200, record_iterates=False)).mu.values
        if np.abs(mu - base_mu).max() > 0.01:
            out.append(p)
    return out


GENERATORS = {"softcon": generate_softcon, "prototype": generate_prototype, "cgm": generate_cgm}


def default_spec(task: str, seed: int | None = None) -> BenchmarkSpec:
    if task == "softcon":
        spec = BenchmarkSpec("softcon", 10, 4, 300, 100, 100, {}, 7)
    elif task == "prototype":
        spec = BenchmarkSpec("prototype", 6, 8, 300, 100, 200, {}, 3)  # n = longest word
    elif task == "cgm":
        spec = BenchmarkSpec("cgm", 20, 25, 0, 0, 0, {}, 11)
    else:
        raise ValueError(f"unknown task {task!r}")
    if seed is not None:
        spec.seed = seed
    return spec


# experiment runner ----------------------------------------------------------------

class ConfigError(ValueError):
    """A malformed experiment config; the message names the offending key."""


CONFIG_KEYS = {
    "task": {"name", "seed", "n", "k", "n_train", "n_dev", "n_test", "params"},
    "solver": {"algorithm", "max_iters", "tolerance", "beta", "md_schedule", "md_lambda", "md_eta",
               "smoothness", "anytime_iters", "compare", "baseline_max_iters", "baseline_tolerance"},
    "learner": {"algorithm", "crf_iters", "crf_step", "theta_step", "psi_step", "schedule", "max_iters",
                "m_steps", "learn_psi", "psi_mode", "psi_init", "mean_map_features", "bandwidth",
                "inner_max_iters", "seed"},
    "energy": {"family", "variants"},
}

# per-task defaults; a config only has to name the task
TASK_DEFAULTS = {
    "softcon": {
        "solver": {"algorithm": "rda", "max_iters": 200, "tolerance": 1e-6, "anytime_iters": 10},
        "learner": {"crf_iters": 3000, "crf_step": 0.05, "psi_step": 0.5, "schedule": "constant",
                    "max_iters": 3000, "learn_psi": True, "psi_mode": "constant", "psi_init": 0.0},
        "energy": {"family": "measurement"},
    },
    "prototype": {
        "solver": {"algorithm": "rda", "max_iters": 100, "tolerance": 1e-6},
        "learner": {"crf_iters": 3000, "crf_step": 0.05, "psi_step": 0.5, "schedule": "inv_sqrt",
                    "max_iters": 1000, "learn_psi": True, "psi_mode": "featurized", "psi_init": 0.1,
                    "mean_map_features": 100, "bandwidth": 2.0},
        "energy": {"family": "prototype", "variants": ["unigram", "full"]},
    },
    "cgm": {
        "solver": {"algorithm": "rda", "beta": 1000.0, "max_iters": 20000, "tolerance": 1e-9,
                   "compare": ["euclidean"], "baseline_max_iters": 3000, "baseline_tolerance": 1e-8},
        "learner": {"learn_psi": False},
        "energy": {"family": "poisson"},
    },
}


def load_config(path) -> dict:
    """Parse a TOML experiment config, rejecting unknown sections and keys."""
    import sys
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return normalize_config(raw)


def normalize_config(raw: dict) -> dict:
    """Validate section/key names and merge in the task defaults."""
    for section, body in raw.items():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in body:
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    task = raw.get("task", {}).get("name")
    if task not in TASK_DEFAULTS:
        raise ConfigError(f"task.name must be one of {sorted(TASK_DEFAULTS)}, got {task!r}")
    cfg = {section: dict(TASK_DEFAULTS[task].get(section, {})) for section in CONFIG_KEYS}
    for section, body in raw.items():
        cfg[section].update(body)
    return cfg


def spec_from_config(cfg: dict) -> BenchmarkSpec:
    t = cfg["task"]
    spec = default_spec(t["name"], t.get("seed"))
    for key in ("n", "k", "n_train", "n_dev", "n_test"):
        if key in t:
            setattr(spec, key, int(t[key]))
    spec.params = dict(t.get("params", {}))
    spec.__post_init__()
    return spec


def solver_config(cfg: dict, **overrides) -> SolverConfig:
    s = cfg["solver"]
    if overrides.get("algorithm", s.get("algorithm")) == "euclidean":
        raise ConfigError("solver.algorithm: the euclidean baseline only runs on the cgm task")
    keys = ("algorithm", "max_iters", "tolerance", "beta", "md_schedule", "md_lambda", "md_eta", "smoothness")
    kw = {key: s[key] for key in keys if key in s}
    kw.update(overrides)
    try:
        return SolverConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[solver]: {exc}") from exc


@dataclass
class Report:
    task: str
    config: dict
    dataset_digest: str
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    feasibility: dict = field(default_factory=lambda: {"checked": 0, "infeasible": 0})
    traces: dict = field(default_factory=dict, repr=False)

    def count(self, checked: int, infeasible: int):
        self.feasibility["checked"] += int(checked)
        self.feasibility["infeasible"] += int(infeasible)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "task": self.task, "config": self.config,
                "dataset_digest": self.dataset_digest, "metrics": self.metrics,
                "timings": self.timings, "feasibility": self.feasibility,
                "traces": sorted(self.traces)}

    def save(self, out_dir) -> str:
        """Write report.json plus one trace_<name>.tsv per recorded trace."""
        import os
        os.makedirs(out_dir, exist_ok=True)
        for name, trace in self.traces.items():
            trace.to_tsv(os.path.join(out_dir, f"trace_{name}.tsv"))
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


def _digest(*datasets) -> str:
    h = hashlib.sha256()
    for d in datasets:
        h.update(d.digest().encode())
    return h.hexdigest()


def _train_crf(train, cfg):
    from .learning import LearnerConfig, Model, PsiParametrization, ThetaParametrization, train_doubly_stochastic
    lc = cfg["learner"]
    model = Model(ThetaParametrization.zeros(train.feature_dim, train.k), PsiParametrization("constant", []))
    lcfg = LearnerConfig(theta_step=lc.get("crf_step", 0.05), max_iters=lc.get("crf_iters", 3000),
                         learn_psi=False, seed=lc.get("seed", 0))
    model, _ = train_doubly_stochastic(train, model, lcfg)
    return model


def _learn_psi(train, base_model, energy_spec, cfg, report, label):
    """Learn psi with theta frozen at the trained chain."""
    from .learning import LearnerConfig, MeanMapFeatures, Model, PsiParametrization
    from .learning import train as fit
    lc = cfg["learner"]
    inner = solver_config(cfg, max_iters=lc.get("inner_max_iters", 30), record_iterates=False,
                          validate_iterates=True)
    lcfg = LearnerConfig(algorithm=lc.get("algorithm", "doubly-stochastic"), theta_step=0.0,
                         psi_step=lc["psi_step"], schedule=lc.get("schedule", "constant"),
                         max_iters=lc["max_iters"], m_steps=lc.get("m_steps", 1), learn_theta=False,
                         inner=inner, seed=lc.get("seed", 0) + 1)
    theta = base_model.theta.copy()
    psi = PsiParametrization("constant", np.full(energy_spec.num_psi(), float(lc.get("psi_init", 0.0))))
    t0 = time.perf_counter()
    model, hist = fit(train, Model(theta, psi, energy_spec), lcfg)
    models = {label: model}
    if lc.get("psi_mode", "constant") == "featurized":
        # featurized psi starts at the learned constant and is refined from there
        feats = MeanMapFeatures(train.feature_dim, num_features=int(lc.get("mean_map_features", 100)),
                                bandwidth=float(lc.get("bandwidth", 1.0)), seed=lc.get("seed", 0))
        fpsi = PsiParametrization.featurized_from(model.psi, feats.num_features)
        lcfg.seed += 1
        fmodel, fhist = fit(train, Model(theta, fpsi, energy_spec, feats), lcfg)
        hist = hist + fhist
        models[label + "_featurized"] = fmodel
    report.timings[f"learn_{label}"] = time.perf_counter() - t0
    report.count(sum(h["inner_checked"] for h in hist), sum(h["inner_infeasible"] for h in hist))
    return models


def _evaluate(report, name, data, model, solver, constraints=None):
    from .learning import evaluate
    t0 = time.perf_counter()
    m = evaluate(data, model, solver, constraints)
    report.timings[f"eval_{name}"] = time.perf_counter() - t0
    report.count(m.pop("iterates_checked"), m.pop("iterates_infeasible"))
    report.metrics[name] = m
    return m


def _run_labeling(task, cfg, spec, report_holder):
    if task == "softcon":
        train, dev, test, energy_spec, _ = generate_softcon(spec)
        variants = {"augmented": energy_spec}
        constraints = energy_spec
    else:
        train, dev, test, _, unigram, full = generate_prototype(spec)
        names = cfg["energy"].get("variants", ["unigram", "full"])
        bad = [v for v in names if v not in ("unigram", "full")]
        if bad:
            raise ConfigError(f"energy.variants: unknown prototype variant {bad[0]!r}")
        variants = {name: {"unigram": unigram, "full": full}[name] for name in names}
        constraints = None
    report = Report(task, cfg, _digest(train, dev, test))
    report_holder.append(report)
    t0 = time.perf_counter()
    base = _train_crf(train, cfg)
    report.timings["train_crf"] = time.perf_counter() - t0
    solver = solver_config(cfg, record_iterates=False, validate_iterates=True)
    _evaluate(report, "baseline", test, base, solver, constraints)
    if not cfg["learner"].get("learn_psi", True):
        return report
    for label, espec in variants.items():
        for name, model in _learn_psi(train, base, espec, cfg, report, label).items():
            _evaluate(report, name, test, model, solver, constraints)
            report.metrics[name]["psi"] = model.psi.values.tolist()
            if cfg["solver"].get("anytime_iters"):
                capped = solver_config(cfg, max_iters=int(cfg["solver"]["anytime_iters"]),
                                       record_iterates=False, validate_iterates=True)
                _evaluate(report, f"{name}_capped", test, model, capped, constraints)
            # one full trace for plotting
            from .inference import solve
            ex = test[0]
            report.traces[name] = solve(model.problem(ex), solver_config(cfg, record_iterates=False)).trace
    return report


def _run_cgm(cfg, spec, report_holder):
    from .baseline import BaselineConfig, euclidean_baseline_solve
    from .inference import AugmentedProblem, solve
    inst = generate_cgm(spec)
    report = Report("cgm", cfg, inst.digest())
    report_holder.append(report)
    p = AugmentedProblem(inst.base, inst.energy.build(spec.n, spec.k))
    s = cfg["solver"]
    solvers = [s["algorithm"]] + [c for c in s.get("compare", []) if c != s["algorithm"]]
    for name in solvers:
        t0 = time.perf_counter()
        if name == "euclidean":
            bcfg = BaselineConfig(max_iters=int(s.get("baseline_max_iters", 20000)),
                                  tolerance=float(s.get("baseline_tolerance", 1e-8)),
                                  record_iterates=False, validate_iterates=True)
            _, trace = euclidean_baseline_solve(p, bcfg)
        else:
            trace = solve(p, solver_config(cfg, algorithm=name, record_iterates=False,
                                           validate_iterates=True)).trace
        wall = time.perf_counter() - t0
        report.count(*trace.feasibility_counts())
        report.traces[name] = trace
        report.metrics[name] = {"objective": trace.objective[-1], "iterations": trace.iterations,
                                "converged": trace.converged}
        report.timings[name] = wall
    if len(solvers) > 1:
        first, other = solvers[0], solvers[1]
        report.metrics["objective_gap"] = abs(report.metrics[first]["objective"] - report.metrics[other]["objective"])
        report.metrics["speedup"] = report.timings[other] / report.timings[first]
    report.metrics["instance"] = {"n": spec.n, "k": spec.k}
    return report


def run_experiment(config, out=None, seed=None, max_iters=None, solver=None) -> Report:
    """generate -> train -> evaluate -> report.

    ``config`` is a TOML path or an already-parsed dict.  The keyword
    arguments override the config the same way the CLI flags do.  With
    ``out`` the report and traces are written there.
    """
    cfg = load_config(config) if isinstance(config, (str, bytes)) or hasattr(config, "__fspath__") \
        else normalize_config(config)
    if seed is not None:
        cfg["task"]["seed"] = int(seed)
    if max_iters is not None:
        cfg["solver"]["max_iters"] = int(max_iters)
    if solver is not None:
        if solver == "euclidean":
            cfg["solver"]["compare"] = []
        cfg["solver"]["algorithm"] = solver
    spec = spec_from_config(cfg)
    task = cfg["task"]["name"]
    holder = []
    try:
        if task == "cgm":
            report = _run_cgm(cfg, spec, holder)
        else:
            report = _run_labeling(task, cfg, spec, holder)
    except ConfigError:
        raise
    except Exception as exc:
        raise RuntimeError(f"{task} run (seed {spec.seed}) failed: {exc}") from exc
    log.info("%s finished: %s", task, report.metrics)
    if out is not None:
        report.save(out)
    return report
