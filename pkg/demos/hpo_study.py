"""NSGA-II against random search on the 96-point JetFormer space.

A cheap synthetic objective stands in for training so the whole study
runs in seconds. Pass ``--train`` to train a real model per trial instead
(slow: minutes per trial on one core).
"""

import argparse
import statistics

from jetforge import data as D
from jetforge import hpo as H
from jetforge.training import TrainConfig


def objective_for(args):
    if not args.train:
        return H.synthetic_objective("rich")
    records = D.synth_gen(0, 2000, 8, 3, 5)
    train, val = D.JetBatch.from_records(records, 8, 3).split(0.1, 0)
    stats = D.fit_norm_stats(train)
    cfg = TrainConfig(epochs=5, early_stop_patience=4)
    return H.jetformer_objective(D.normalize(train, stats), D.normalize(val, stats), cfg)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--trials", type=int, default=80)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--train", action="store_true")
    parser.add_argument("--out", default="hpo_demo")
    args = parser.parse_args()
    objective = objective_for(args)

    hv = {"nsga2": [], "random": []}
    for seed in range(args.seeds):
        runs = {name: H.run_study(H.make_sampler(name, seed=seed), args.trials, objective) for name in hv}
        norm = H.Normalization.from_trials(runs["nsga2"].trials + runs["random"].trials)
        for name, res in runs.items():
            hv[name].append(H.hv_at(res.trials, args.trials, norm))
    for name, values in hv.items():
        print(f"{name:>6}: median HV@{args.trials} = {statistics.median(values):.4f}")

    result = H.run_study(H.NSGA2Sampler(seed=0), args.trials, objective)
    print("\n" + H.pareto_table(result.front))
    tiny = H.select_tiny(result.trials)
    print(f"\nsmallest feasible model: {H.canon(tiny.params)} at {tiny.flops:,} FLOPs")
    paths = H.write_report(result.trials, args.out)
    print("wrote", ", ".join(str(p) for p in paths))


if __name__ == "__main__":
    main()
