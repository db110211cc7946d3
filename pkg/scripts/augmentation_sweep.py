"""Internal and external AUROC of the frozen-representation model across
augmentation factors, on one seeded instance of the shift benchmark.

    python3 scripts/augmentation_sweep.py --seed 0 --factors 1 2 3 5 10
"""
import argparse
from dataclasses import replace

import numpy as np

from medrep.augment import SWEEP_FACTORS
from medrep.evaluate import run_benchmark
from medrep.experiment import EXTERNAL, ShiftBenchmarkConfig, graph_representations, neighbor_sets, prepare_data


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--factors", type=int, nargs="+", default=list(SWEEP_FACTORS))
    parser.add_argument("--replace-prob", type=float)
    args = parser.parse_args()

    config = ShiftBenchmarkConfig()
    spec = replace(config.synth, seed=args.seed)
    data = prepare_data(spec, config.tasks, config.max_len)
    R = graph_representations(data.vocab, replace(config.train, seed=args.seed))
    sets = neighbor_sets(data.vocab, R, config.num_neighbors)
    augment = replace(config.augment, seed=args.seed)
    if args.replace_prob is not None:
        augment = replace(augment, replace_prob=args.replace_prob)
    clf = replace(config.classifier, seed=args.seed)
    print("factor\tinternal\texternal")
    for factor in args.factors:
        report = run_benchmark(data.internal, {EXTERNAL: data.external}, R, augment, (factor,), sets,
                               data.vocab.catalog.domains, clf)
        means = [np.mean([r.auroc for r in report.rows if r.dataset == d]) for d in ("internal", EXTERNAL)]
        print(f"{factor}\t{means[0]:.4f}\t{means[1]:.4f}", flush=True)


if __name__ == "__main__":
    main()
