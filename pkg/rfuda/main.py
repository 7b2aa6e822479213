"""CLI entrypoint: rf-uda <train|eval|ablate|synth> --config FILE [--set key=value]... [--out DIR]."""

import argparse
import logging
import sys
from typing import Optional, Sequence

from rfuda import harness
from rfuda.config import load_config
from rfuda.dataset import FACTORS
from rfuda.errors import DataError, RfUdaError
from rfuda.uda import EPOCH_CSV_HEADER


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", default=None,
        help="key = value config file (default: built-in defaults)",
    )
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override one config key; repeatable, applied after --config",
    )
    parser.add_argument(
        "--out", default=None,
        help="Output directory (default: out_dir from the config, runs/latest)",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="Log progress to stderr (-v info, -vv debug)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rf-uda",
        description="RF gesture recognition with unsupervised domain adaptation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""\
Examples:
  rf-uda synth --out data/synth
  rf-uda train --config configs/synth.conf --set held_value=o2 --out runs/o2
  rf-uda eval --config configs/synth.conf --checkpoint runs/o2/model.ckpt --out runs/o2
  rf-uda ablate --config configs/synth.conf --set disable_lc=true --set held_values=all

Exit codes: 0 ok, 2 config/usage, 3 data, 4 numerical.
        """,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    train = sub.add_parser("train", help="Train on a leave-one-domain-out split")
    _add_common(train)

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint on the held-out domain")
    _add_common(evaluate)
    evaluate.add_argument(
        "--checkpoint", default=None,
        help="Checkpoint file (default: checkpoint key, else OUT/model.ckpt)",
    )
    evaluate.add_argument(
        "--by", default=None, choices=FACTORS,
        help="Also report accuracy per value of this domain factor",
    )

    ablate = sub.add_parser("ablate", help="Run ablation variants over held domains and seeds")
    _add_common(ablate)

    synth = sub.add_parser("synth", help="Write the synthetic dataset to OUT")
    _add_common(synth)
    return parser


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def _train(config) -> None:
    print(EPOCH_CSV_HEADER)
    result = harness.run_train(config, on_epoch=lambda report: print(report.csv_row(), flush=True))
    print(f"Checkpoint: {result.checkpoint}")


def _eval(config, args) -> None:
    report = harness.run_eval(config, checkpoint=args.checkpoint, domain_factor=args.by)
    print(f"Target accuracy: {report.accuracy:.4f} ({report.sample_count} samples)")
    for c, acc in enumerate(report.per_class_accuracy):
        print(f"  class {c}: {acc:.4f}")
    for name, acc in report.per_domain_accuracy.items():
        print(f"  {args.by} {name}: {acc:.4f}")
    print(f"Wrote {config.out_dir}/{harness.EVAL_NAME} and {config.out_dir}/{harness.CONFUSION_NAME}")


def _ablate(config) -> None:
    print(",".join(harness.ABLATION_HEADER))
    harness.run_ablation(config, on_row=lambda row: print(",".join(row.csv_fields()), flush=True))


def _synth(config) -> None:
    dataset, manifest = harness.run_synth(config)
    print(f"Wrote {len(dataset)} samples ({dataset.class_count} classes, "
          f"N={dataset.grid}, T={dataset.frames}) to {manifest}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    try:
        config = load_config(args.config, args.overrides, args.out)
        if args.command == "train":
            _train(config)
        elif args.command == "eval":
            _eval(config, args)
        elif args.command == "ablate":
            _ablate(config)
        elif args.command == "synth":
            _synth(config)
    except RfUdaError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return 130
    return 0
