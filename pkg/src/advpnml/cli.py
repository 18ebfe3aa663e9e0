"""``advpnml`` command line: gen-data, train, eval, sweep."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .errors import ConfigError

log = logging.getLogger("advpnml")


def _values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="advpnml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel evaluation cells")
        return p

    common(sub.add_parser("gen-data", help="write the synthetic dataset as CSV"))
    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    ev = common(sub.add_parser("eval", help="evaluate attacks with and without the defense"))
    ev.add_argument("--checkpoint", help="checkpoint to evaluate (default: OUT/model.ckpt)")
    sw = common(sub.add_parser("sweep", help="evaluate along one axis"))
    sw.add_argument("--checkpoint")
    sw.add_argument("--axis", required=True, choices=["epsilon", "lambda", "hypotheses"])
    sw.add_argument("--values", required=True, type=_values, help="comma-separated, ascending")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "gen-data":
            path = harness.cmd_gen_data(cfg, args.out)
            log.info("wrote %s", path)
        elif args.command == "train":
            ckpt, _ = harness.cmd_train(cfg, args.out, echo=log.info)
            log.info("wrote %s", ckpt)
        elif args.command == "eval":
            rows = harness.cmd_eval(cfg, args.out, args.checkpoint, args.jobs)
            for r in rows:
                log.info("%-10s lambda=%-5s adv_acc=%.4f", r["attack"], r["lambda"], r["adv_acc"])
        else:
            values = [int(v) for v in args.values] if args.axis == "hypotheses" else args.values
            harness.cmd_sweep(cfg, args.axis, values, args.out, args.checkpoint, args.jobs)
    except Exception as exc:  # noqa: BLE001 - any failure maps to a nonzero exit
        log.error("error: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
