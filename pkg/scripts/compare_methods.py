"""Target-task success and switching rate for every method over several data seeds.

Usage: python scripts/compare_methods.py [--seeds 0 1 2] [--episodes 100] [--out methods.csv]
"""
import argparse
import csv

from policy_transfer.cargoal_env import default_base_tasks, default_target_task
from policy_transfer.evaluation import evaluate
from policy_transfer.pipelines import (METHODS, AdaptSpec, PretrainSpec, adapt, collect_demos, scripted_expert,
                                       train_base_policy)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--out", default="methods.csv")
    args = p.parse_args()

    tasks, target = default_base_tasks(), default_target_task()
    spec = PretrainSpec(tuple(tasks), seed=0)
    bases = [train_base_policy(t, spec).policy for t in tasks]
    rows = []
    for b in bases:
        rep = evaluate(b, target, args.episodes, seed=0)
        rows.append(["base_" + b.task_id, "", rep.success_rate, rep.ci_low, rep.ci_high, "", ""])
    for seed in args.seeds:
        data = collect_demos(lambda o: scripted_expert(o, target), target, args.budget, seed, noise=3.0)
        for method in METHODS:
            res = adapt(bases, data, AdaptSpec(method, target, seed=seed, demo_budget=args.budget))
            rep = evaluate(res.policy, target, args.episodes, seed=0)
            rows.append([method, seed, rep.success_rate, rep.ci_low, rep.ci_high,
                         "" if rep.switching_rate is None else rep.switching_rate, res.report["final_loss"]])
            print(f"seed {seed} {method}: {rep.summary()}, loss {res.report['final_loss']:.4f}")
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "data_seed", "success", "ci_low", "ci_high", "switching_rate", "final_loss"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
