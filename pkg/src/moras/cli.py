"""Command-line entry point: ``moras <stage> --config run.json [...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import harness as H
from .attacks import AttackConfig, AttackKind
from .errors import MorasError
from .network import load_model

STAGES = ("calibrate", "search", "retrain", "attack-eval", "report")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moras", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="run configuration (JSON)")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--out", type=Path, help="run directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "search":
            s.add_argument("--stop-after", type=int, default=None,
                           help="stop after this generation (resume later)")
        if name == "attack-eval":
            s.add_argument("--model", type=Path, required=True)
            s.add_argument("--data", type=Path,
                           help="MDS/CSV file (default: the config's test split)")
            s.add_argument("--attack", default="pgd",
                           help="fgsm, bim, pgd, ffgsm or blk-fgsm")
            s.add_argument("--epsilon", type=float)
            s.add_argument("--alpha", type=float)
            s.add_argument("--iterations", type=int)
            s.add_argument("--substitute", type=Path,
                           help="substitute model for blk-fgsm (default: run calibration)")
            s.add_argument("--export", type=Path, help="write adversarial images as MDS")
    return p


def _config(args) -> H.RunConfig:
    cfg = H.RunConfig.load(args.config) if args.config else H.RunConfig()
    return cfg.with_overrides(seed=args.seed, threads=args.threads,
                              out=None if args.out is None else str(args.out))


def _attack_eval(args, cfg: H.RunConfig) -> dict:
    kind = AttackKind.parse(args.attack)
    base = cfg.attack_configs()[kind]
    attack = AttackConfig(kind,
                          base.epsilon if args.epsilon is None else args.epsilon,
                          base.alpha if args.alpha is None else args.alpha,
                          base.iterations if args.iterations is None else args.iterations,
                          cfg.seed)
    dataset = D.load(args.data) if args.data else H.load_splits(cfg).test
    substitute = None
    if kind is AttackKind.BLK_FGSM:
        if args.substitute:
            substitute, _ = load_model(args.substitute)
        else:
            _, substitute = H.load_calibration(cfg)
    return H.cmd_attack_eval(args.model, dataset, attack, substitute,
                             None if args.export is None else str(args.export))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "calibrate":
            stats = H.cmd_calibrate(cfg)
            result = {"stats": str(cfg.out_dir / "calibration" / "stats.json"),
                      "flagged": stats.flagged}
        elif args.command == "search":
            archive = H.cmd_search(cfg, stop_after=args.stop_after)
            result = {"archive": [{"id": a.id, "objectives": list(a.objectives)}
                                  for a in archive]}
        elif args.command == "retrain":
            result = {"rows": H.cmd_retrain(cfg)}
        elif args.command == "attack-eval":
            result = _attack_eval(args, cfg)
        else:
            H.cmd_report(cfg.out_dir)
            result = {"report": str(cfg.out_dir / "report" / "report.md")}
    except (MorasError, OSError) as exc:
        print(f"moras {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
