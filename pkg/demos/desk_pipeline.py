"""Run the whole desk pipeline (calibrate, search, retrain, report) once.

Usage: python demos/desk_pipeline.py [--seed 0] [--threads 1] [--out runs/demo]
"""

import argparse
import json
import logging

from moras.harness import RunConfig, run_pipeline


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", default="runs/demo")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = RunConfig().with_overrides(seed=args.seed, threads=args.threads, out=args.out)
    result = run_pipeline(cfg)
    print("archive:")
    for ind in sorted(result["archive"], key=lambda i: i.objectives):
        f1, f2 = ind.objectives
        print(f"  id {ind.id:3d}  clean error {f1:6.2f}%  robustness z {f2:+.3f}")
    print("timings (s):", json.dumps({k: round(v, 1) for k, v in result["timings"].items()}))
    print(f"report: {cfg.out_dir / 'report' / 'report.md'}")


if __name__ == "__main__":
    main()
