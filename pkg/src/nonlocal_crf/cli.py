"""Command-line entry point: generate, train, infer, eval, bench."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import benchmarks as B
from .learning import Dataset, Model, evaluate, predict

log = logging.getLogger("nonlocal_crf")


def _config(args) -> dict:
    if args.config is None:
        raise B.ConfigError("--config is required for this command")
    cfg = B.load_config(args.config)
    if args.seed is not None:
        cfg["task"]["seed"] = args.seed
    if args.max_iters is not None:
        cfg["solver"]["max_iters"] = args.max_iters
    if args.solver is not None:
        cfg["solver"]["algorithm"] = args.solver
    return cfg


def _out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    print(path)


def cmd_generate(args):
    cfg = _config(args)
    spec = B.spec_from_config(cfg)
    out = _out(args)
    if spec.task == "cgm":
        inst = B.generate_cgm(spec)
        _write_json(os.path.join(out, "cgm_instance.json"), {
            "base": inst.base.to_dict(), "energy": inst.energy.to_dict(),
            "true_marginals": inst.true_marginals.tolist(), "digest": inst.digest()})
        return
    if spec.task == "softcon":
        train, dev, test, energy, _ = B.generate_softcon(spec)
        energies = {"energy": energy}
    else:
        train, dev, test, _, unigram, full = B.generate_prototype(spec)
        energies = {"energy_unigram": unigram, "energy_full": full}
    for name, data in (("train", train), ("dev", dev), ("test", test)):
        path = os.path.join(out, f"{name}.jsonl")
        data.save(path)
        print(path)
    for name, espec in energies.items():
        espec.save(os.path.join(out, f"{name}.json"))
        print(os.path.join(out, f"{name}.json"))


def cmd_train(args):
    cfg = _config(args)
    spec = B.spec_from_config(cfg)
    if spec.task == "cgm":
        raise B.ConfigError("task.name: cgm has nothing to train; use bench")
    out = _out(args)
    if args.data:
        train = Dataset.load(args.data)
    elif spec.task == "softcon":
        train = B.generate_softcon(spec)[0]
    else:
        train = B.generate_prototype(spec)[0]
    base = B._train_crf(train, cfg)
    _write_json(os.path.join(out, "model_baseline.json"), base.to_dict())
    if not cfg["learner"].get("learn_psi", True):
        return
    if spec.task == "softcon":
        variants = {"augmented": B.generate_softcon(spec)[3]}
    else:
        _, _, _, _, unigram, full = B.generate_prototype(spec)
        variants = {v: {"unigram": unigram, "full": full}[v] for v in cfg["energy"].get("variants", ["unigram", "full"])}
    report = B.Report(spec.task, cfg, train.digest())
    for label, espec in variants.items():
        for name, model in B._learn_psi(train, base, espec, cfg, report, label).items():
            _write_json(os.path.join(out, f"model_{name}.json"), model.to_dict())


def _load_model(path) -> Model:
    with open(path) as fh:
        return Model.from_dict(json.load(fh))


def cmd_infer(args):
    if not (args.model and args.data):
        raise B.ConfigError("infer needs --model and --data")
    cfg = _config(args) if args.config else B.normalize_config({"task": {"name": "softcon"}})
    if args.max_iters is not None:
        cfg["solver"]["max_iters"] = args.max_iters
    if args.solver is not None:
        cfg["solver"]["algorithm"] = args.solver
    model = _load_model(args.model)
    data = Dataset.load(args.data)
    solver = B.solver_config(cfg)
    out = _out(args)
    path = os.path.join(out, "predictions.jsonl")
    with open(path, "w") as fh:
        for i, ex in enumerate(data):
            y, trace = predict(model, ex, solver, return_trace=True)
            fh.write(json.dumps({"index": i, "labels": np.asarray(y).tolist()}) + "\n")
            if trace is not None and i == 0:
                trace.to_tsv(os.path.join(out, "trace_infer.tsv"))
    print(path)


def cmd_eval(args):
    if not (args.model and args.data):
        raise B.ConfigError("eval needs --model and --data")
    cfg = _config(args) if args.config else B.normalize_config({"task": {"name": "softcon"}})
    if args.max_iters is not None:
        cfg["solver"]["max_iters"] = args.max_iters
    model = _load_model(args.model)
    data = Dataset.load(args.data)
    constraints = None
    if args.constraints:
        constraints = B.EnergySpec.load(args.constraints)
    metrics = evaluate(data, model, B.solver_config(cfg), constraints)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out:
        _write_json(os.path.join(_out(args), "metrics.json"), metrics)


def cmd_bench(args):
    if args.kernels:
        from .kernels import benchmark_backends
        result = benchmark_backends()
        print(json.dumps(result, indent=2, sort_keys=True))
        if args.out:
            _write_json(os.path.join(_out(args), "kernel_bench.json"), result)
        return
    cfg = _config(args)
    report = B.run_experiment(cfg, out=args.out, solver=None)
    print(json.dumps(report.to_dict()["metrics"], indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--max-iters", type=int, dest="max_iters")
    common.add_argument("--solver", choices=["rda", "md", "acc-rda", "euclidean"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nonlocal-crf", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic datasets and energy specs")
    p = sub.add_parser("train", parents=[common], help="train the chain, then learn psi")
    p.add_argument("--data", help="training JSONL (default: generate from the config)")
    for name, text in (("infer", "MAP predictions for a dataset"), ("eval", "metrics for a dataset")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--model", help="model JSON written by train")
        p.add_argument("--data", help="dataset JSONL")
        if name == "eval":
            p.add_argument("--constraints", help="energy spec JSON used to count violations")
    p = sub.add_parser("bench", parents=[common], help="run a full experiment and write its report")
    p.add_argument("--kernels", action="store_true", help="time the compiled vs pure-Python kernels instead")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except B.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
