"""Command line entry point: ``ramlab {gen-data,train,attack,rf,report}``.

Exit codes: 0 success, 1 validation error (bad config, missing inputs),
2 runtime failure (divergence, non-finite values, I/O errors).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .attacks import AttackError
from .config import ConfigError, default_config, load_config
from .report import render_report
from .tensor import NonFiniteError
from .train import TrainingDiverged

log = logging.getLogger("ramlab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (key=value sections)")
    common.add_argument("--seed", type=_u64, help="master seed (overrides experiment.seed)")
    common.add_argument("--out", type=Path, help="output directory (overrides experiment.out)")
    common.add_argument("--jobs", type=_positive, default=1, help="worker processes")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="ramlab", description="Attention-robustness lab for toy segmentation models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train every model variant in the config")
    sub.add_parser("attack", parents=[common], help="run the attack sweep and append to the ledger")
    rf = sub.add_parser("rf", parents=[common], help="receptive-field heatmaps and radii")
    rf.add_argument("--q", type=float, help="mass fraction for the effective radius (default 0.95)")
    rep = sub.add_parser("report", parents=[common], help="markdown summary of a ledger")
    rep.add_argument("--ledger", type=Path, help="ledger CSV (default <out>/ledger.csv)")
    return p


def resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.replace("experiment", seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace("experiment", out=str(args.out))
    if getattr(args, "q", None) is not None:
        cfg = cfg.replace("rf", q=args.q)
    return cfg


def run(args) -> int:
    cfg = resolve(args)
    if args.command == "report":
        ledger = args.ledger or cfg.out / "ledger.csv"
        if not Path(ledger).is_file():
            raise ConfigError(f"ledger {ledger} not found")
        text = render_report(experiments.read_ledger(ledger))
        out = Path(ledger).parent / "report.md"
        out.write_text(text + "\n", encoding="utf-8")
        print(text)
        return EXIT_OK
    cfg.write_resolved(cfg.out / "resolved.cfg")
    if args.command == "gen-data":
        experiments.gen_data(cfg)
    elif args.command == "train":
        for r in experiments.train_models(cfg, args.jobs):
            print(f"{r['tag']}\tval_miou={r['val_miou']:.4f}\tadv_steps={r['adv_steps_run']}"
                  f"\t{r['checkpoint']}")
    elif args.command == "attack":
        for row in experiments.run_attacks(cfg, args.jobs):
            print(f"{row['run_id']}\t{row['model_tag']}\t{row['method']}\t{row['target']}\t"
                  f"size={row['size']}\t{row['location']}\tmiou_target={row['miou_target']}\t"
                  f"{row['status']}")
    elif args.command == "rf":
        for tag, q, radius in experiments.run_rf(cfg):
            print(f"{tag}\tq={q:g}\tradius={radius:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, ValueError) as exc:  # includes malformed checkpoints and images
        print(f"ramlab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, AttackError, NonFiniteError, OSError) as exc:
        print(f"ramlab: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
