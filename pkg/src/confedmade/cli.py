"""Command-line interface.

Subcommands: ``run``, ``gradcheck``, ``ablate-masks`` and ``report --compare``.
Failures print a JSON error record to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import Hyperparams
from .exceptions import ConfedmadeError, UsageError
from .metrics import compare, export, load_report
from .methods import METHODS

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}; methods: {', '.join(METHODS)}")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    p = _Parser(prog="confedmade", description="Continual federated MADE experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one method on a scenario config")
    r.add_argument("--config", required=True)
    r.add_argument("--method", required=True, choices=list(METHODS))
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=None)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate-masks", help="synchronized/distinct mask and MADE-variant grid")
    a.add_argument("--images", help="IDX image file (default: from --config)")
    a.add_argument("--labels", help="IDX label file")
    a.add_argument("--config", help="experiment config providing data.mnist")
    a.add_argument("--clients", type=_int_list, default=[1, 2, 5])
    a.add_argument("--sync", choices=["both", "sync", "distinct"], default="both")
    a.add_argument("--variants", default="baseline",
                   help="comma-separated subset of baseline,dc,ca,oa")
    a.add_argument("--classes", type=_int_list, default=None, help="restrict to these labels")
    a.add_argument("--samples", type=int, default=2000)
    a.add_argument("--rounds", type=int, default=10)
    a.add_argument("--hidden", type=int, default=64)
    a.add_argument("--epochs-per-round", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="write the grid as CSV here (JSON always goes to stdout)")

    c = sub.add_parser("report", help="merge run directories into one comparison table")
    c.add_argument("--compare", nargs="+", required=True, metavar="DIR")
    c.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _cmd_run(args):
    from .experiments import load_config, scenario_from_config
    from .runner import run_scenario
    cfg = load_config(args.config)
    scenario = scenario_from_config(cfg, args.seed)
    report = run_scenario(scenario, args.method, workers=args.workers)
    export(report, args.out)
    print(json.dumps({"out": str(args.out), **report.metrics["summary"]}, sort_keys=True))
    return 0


def _cmd_gradcheck(args):
    from .experiments import gradcheck_suite
    res = gradcheck_suite(args.seed)
    sizes = res.pop("n_parameters")
    ok = all(v < GRADCHECK_TOLERANCE for v in res.values())
    print(json.dumps({"max_relative_error": res, "tolerance": GRADCHECK_TOLERANCE,
                      "n_parameters": sizes, "passed": ok}, sort_keys=True, indent=2))
    return 0 if ok else 1


def _load_images(args):
    from .data import binarize, load_labeled_images
    from .experiments import load_config, load_datasets
    if args.images:
        if not args.labels:
            raise UsageError("--images needs --labels")
        imgs = load_labeled_images(args.images, args.labels)
    elif args.config:
        ds = load_datasets(load_config(args.config))
        if "mnist" not in ds:
            raise UsageError("config has no data.mnist entry")
        imgs = ds["mnist"]
    else:
        raise UsageError("ablate-masks needs --images/--labels or --config")
    import numpy as np
    idx = np.arange(len(imgs.labels))
    if args.classes:
        idx = idx[np.isin(imgs.labels, args.classes)]
    idx = np.random.default_rng(args.seed).permutation(idx)[:args.samples]
    return binarize(imgs.images[np.sort(idx)])


def _cmd_ablate(args):
    from .experiments import ABLATION_VARIANTS, ablate_masks
    variants = [v for v in args.variants.split(",") if v]
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; valid: {', '.join(ABLATION_VARIANTS)}")
    sync = ("sync", "distinct") if args.sync == "both" else (args.sync,)
    X = _load_images(args)
    rows = ablate_masks(X, args.clients, sync, variants, args.rounds, args.hidden, args.seed,
                        Hyperparams(), epochs_per_round=args.epochs_per_round)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["clients", "sync", "variant", "nll"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    print(json.dumps(rows, indent=2))
    return 0


def _cmd_report(args):
    rows = compare([load_report(d) for d in args.compare])
    cols = ["method", "seed", "avg_task_nll", "avg_forgetting", "communication"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


COMMANDS = {"run": _cmd_run, "gradcheck": _cmd_gradcheck, "ablate-masks": _cmd_ablate,
            "report": _cmd_report}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfedmadeError as exc:
        print(json.dumps(exc.to_record(), sort_keys=True), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io", "type": type(exc).__name__, "message": str(exc)},
                         sort_keys=True), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
