"""Command-line entry point: pretrain, collect, adapt, eval, sweep.

Exit codes: 0 success, 1 method or gate failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ExperimentConfig, load_config
from .evaluation import evaluate, sweep, write_sweep_csv
from .math_core import ConfigurationError, dumps
from .optim import OptimizationError, TransitionDataset
from .pipelines import METHODS, GateError, adapt, collect_demos, scripted_expert, train_base_policy
from .policies import load_base, load_bundle, save_base, save_bundle

log = logging.getLogger("policy_transfer")

SUBDIRS = ("policies", "datasets", "bundles", "reports")


class Layout:
    """File names under the output directory for one (config, seed)."""

    def __init__(self, out: str, cfg: ExperimentConfig):
        self.out = out
        self.tag = f"s{cfg.seed}_{cfg.hash()}"
        self.cfg = cfg

    def make(self) -> None:
        for d in SUBDIRS:
            os.makedirs(os.path.join(self.out, d), exist_ok=True)

    def path(self, sub: str, name: str) -> str:
        return os.path.join(self.out, sub, name)

    def base(self, task_id: str) -> str:
        return self.path("policies", f"base_{task_id}_{self.tag}.json")

    def dataset(self) -> str:
        return self.path("datasets", f"demos_{self.cfg.target_task.task_id}_b{self.cfg.collect.budget}_{self.tag}.jsonl")

    def bundle(self, method: str) -> str:
        return self.path("bundles", f"{method}_{self.cfg.target_task.task_id}_{self.tag}.json")

    def report(self, name: str, ext: str = "json") -> str:
        return self.path("reports", f"{name}_{self.tag}.{ext}")


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w") as f:
        f.write(dumps(obj))


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.hash(), "config": cfg.to_dict()}


def _load_bases(paths, layout: Layout):
    if not paths:
        paths = [layout.base(t.task_id) for t in layout.cfg.base_tasks]
    bases = [load_base(p) for p in paths]
    return bases, {b.digest(): p for b, p in zip(bases, paths)}


def _load_dataset(path, layout: Layout) -> TransitionDataset:
    path = path or layout.dataset()
    try:
        return TransitionDataset.load(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigurationError(f"{path}: cannot read dataset ({e})") from e


# ------------------------------------------------------------------- commands


def cmd_pretrain(cfg: ExperimentConfig, layout: Layout, args) -> int:
    spec = cfg.pretrain_spec()
    layout.make()
    rows, failed = [], []
    for task in cfg.base_tasks:
        try:
            res = train_base_policy(task, spec, threads=args.threads, params=cfg.env)
        except GateError as e:
            res = e.result
            failed.append(task.task_id)
        save_base(res.policy, layout.base(task.task_id))
        target = evaluate(res.policy, cfg.target_task, cfg.eval.n_episodes, cfg.seed, "mean", cfg.env)
        rows.append({"task_id": task.task_id, "file": os.path.basename(layout.base(task.task_id)),
                     "home_success": res.success_rate, "target_success": target.success_rate,
                     "passed_gate": task.task_id not in failed, "bc_final_loss": res.bc_history[-1] if res.bc_history else None,
                     "cem_history": res.cem_history})
        print(f"{task.task_id}: home success {res.success_rate:.3f}, target success {target.success_rate:.3f}")
    _write_json(layout.report("pretrain"), {"bases": rows, "gate": spec.gate, **_provenance(cfg)})
    if failed:
        print(f"gate failure: {', '.join(failed)} below {spec.gate:.2f}", file=sys.stderr)
        return 1
    return 0


def cmd_collect(cfg: ExperimentConfig, layout: Layout, args) -> int:
    task = cfg.target_task
    layout.make()
    data = collect_demos(lambda o: scripted_expert(o, task, params=cfg.env), task, cfg.collect.budget,
                         cfg.seed, noise=cfg.collect.noise, params=cfg.env)
    data.meta.update(config_hash=cfg.hash())
    data.save(layout.dataset())
    print(f"{task.task_id}: {data.n_timesteps} timesteps in {data.n_episodes} episodes")
    return 0


def cmd_adapt(cfg: ExperimentConfig, layout: Layout, args) -> int:
    spec = cfg.adapt_spec(method=args.method)
    bases, files = _load_bases(args.bases, layout)
    data = _load_dataset(args.dataset, layout)
    layout.make()
    res = adapt(bases, data, spec, threads=args.threads)
    save_bundle(res.policy, layout.bundle(spec.method), files)
    _write_json(layout.report(f"adapt_{spec.method}"), {**res.report, **_provenance(cfg)})
    msg = f"{spec.method}: final loss {res.report['final_loss']:.4f}"
    if "chosen_base" in res.report:
        msg += f", chosen base {res.report['chosen_base']}"
    print(msg)
    return 0


def cmd_eval(cfg: ExperimentConfig, layout: Layout, args) -> int:
    task = cfg.target_task
    if args.expert:
        policy, name = (lambda o: scripted_expert(o, task, params=cfg.env)), "expert"
    elif args.base:
        policy = load_base(args.base)
        name = f"base_{policy.task_id}"
    else:
        path = args.bundle or layout.bundle(cfg.adapt_spec(method=args.method).method)
        policy = load_bundle(path)
        name = os.path.splitext(os.path.basename(path))[0].replace(f"_{layout.tag}", "")
    layout.make()
    rep = evaluate(policy, task, cfg.eval.n_episodes, cfg.seed, cfg.eval.mode, cfg.env)
    _write_json(layout.report(f"eval_{name}"), {"policy": name, "task_id": task.task_id, **rep.to_dict(),
                                                **_provenance(cfg)})
    print(f"{name} on {task.task_id}: {rep.summary()}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, layout: Layout, args) -> int:
    spec = cfg.adapt_spec(method=args.method)
    bases, _ = _load_bases(args.bases, layout)
    task = cfg.target_task
    if cfg.sweep.param == "demo_budget":
        def demos(budget):
            return collect_demos(lambda o: scripted_expert(o, task, params=cfg.env), task, budget, cfg.seed,
                                 noise=cfg.collect.noise, params=cfg.env)
    else:
        demos = _load_dataset(args.dataset, layout)
    layout.make()
    rows = sweep(cfg.sweep.param, list(cfg.sweep.values), bases, spec, task, demos, cfg.eval.n_episodes,
                 cfg.seed, cfg.env, args.threads)
    path = layout.report(f"sweep_{cfg.sweep.param}_{spec.method}", "csv")
    write_sweep_csv(path, rows, cfg.seed, cfg.hash())
    for r in rows:
        sr = "" if r["switching_rate"] is None else f", switching rate {r['switching_rate']:.2f}"
        print(f"{cfg.sweep.param}={r['value']}: success {r['success']:.3f} [{r['ci_low']:.3f}, {r['ci_high']:.3f}]{sr}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "collect": cmd_collect, "adapt": cmd_adapt, "eval": cmd_eval,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policy-transfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment JSON")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads for population evaluation")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("adapt", "eval", "sweep"):
            s.add_argument("--method", default=None, help=f"overrides adapt.method ({', '.join(METHODS)})")
        if name in ("adapt", "sweep"):
            s.add_argument("--bases", nargs="+", default=None, help="base policy files")
        if name in ("adapt", "sweep"):
            s.add_argument("--dataset", default=None, help="demonstration JSONL")
        if name == "eval":
            g = s.add_mutually_exclusive_group()
            g.add_argument("--bundle", default=None, help="adapted policy bundle")
            g.add_argument("--base", default=None, help="evaluate an unadapted base policy file")
            g.add_argument("--expert", action="store_true", help="evaluate the scripted expert")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = load_config(args.config).with_seed(args.seed)
        return COMMANDS[args.command](cfg, Layout(args.out, cfg), args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OptimizationError, GateError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
