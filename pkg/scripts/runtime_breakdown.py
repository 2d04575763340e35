"""Per-stage runtime at 512^2 and 1024^2 plus the S sweep at 512^2.

    python3 scripts/runtime_breakdown.py [--workers N] [--json]
"""

import argparse
import dataclasses
import json

from asapnet.bench import ablation_sweep, sweep_table, time_breakdown
from asapnet.hypernet import GeneratorConfig


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--json", action="store_true")
    args = p.parse_args()

    cfg = GeneratorConfig()
    rep = time_breakdown(cfg, [512, 1024], reps=args.reps, workers=args.workers)
    rows, monotone = ablation_sweep(cfg, [16, 32, 64], resolution=512, reps=args.reps, workers=args.workers)
    ratios = {
        "pixelwise_1024_over_512": rep.ratio("pixelwise", 1024, 512),
        "hypernet_1024_over_512": rep.ratio("hypernet", 1024, 512),
    }
    if args.json:
        print(json.dumps({
            "breakdown": json.loads(rep.to_json()),
            "ratios": ratios,
            "sweep": [dataclasses.asdict(r) for r in rows],
            "sweep_time_nonincreasing": monotone,
        }, indent=2))
        return
    print(rep.table())
    print()
    for k, v in ratios.items():
        print(f"{k}: {v:.2f}")
    print()
    print(sweep_table(rows))
    print(f"total time non-increasing in S: {monotone}")


if __name__ == "__main__":
    main()
