"""Frozen graph representations with factor-5 augmentation against a trainable
embedding table on the synthetic vocabulary-shift benchmark.

    python3 scripts/shift_benchmark.py --seeds 0 1 2 3 4 --out shift.json
"""
import argparse
import json
import logging
from dataclasses import replace

import numpy as np

from medrep.experiment import EXTERNAL, ShiftBenchmarkConfig, run_shift_benchmark


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--patients", type=int, help="override the cohort size")
    parser.add_argument("--out", help="write per-seed summaries and medians as JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    config = ShiftBenchmarkConfig()
    if args.patients:
        config = replace(config, synth=replace(config.synth, num_patients=args.patients))
    runs = {}
    for seed in args.seeds:
        result = run_shift_benchmark(config, seed)
        runs[seed] = dict(result.summary(), seconds=result.seconds)
        print(f"seed {seed}: " + "  ".join(f"{k}={v:.4f}" for k, v in runs[seed].items()), flush=True)
        for row in result.medrep.rows + result.baseline.rows:
            print(f"  {row.model:8s} {row.task:4s} {row.dataset:8s} factor={row.factor} auroc={row.auroc:.4f} f1={row.f1:.4f}")
    keys = [k for k in runs[args.seeds[0]] if k != "seconds"]
    median = {k: float(np.median([r[k] for r in runs.values()])) for k in keys}
    print("median: " + "  ".join(f"{k}={v:.4f}" for k, v in median.items()))
    print(f"external gap {median[f'medrep_{EXTERNAL}'] - median[f'baseline_{EXTERNAL}']:+.4f}  "
          f"internal change {median['medrep_internal'] - median['baseline_internal']:+.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"runs": runs, "median": median}, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
