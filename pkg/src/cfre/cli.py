"""Command-line surface.

Subcommands: train (run an experiment config), eval (score a checkpoint
on its task), density-grid (export the residual density around a probe
prediction), sparsify (curves and metrics from a prediction CSV),
compare (join run directories into one table), selftest (built-in
invariant suites).  Exit codes: 0 success, 1 invalid input or usage,
2 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import metrics as metrics_mod
from .errors import InputError, NumericError
from .experiment import (ExperimentConfig, config_to_dict, density_grid_rows,
                         evaluate_trained, load_config, run_dataset,
                         run_experiment, split_indices, _write_grid_csv,
                         _write_json)
from .selftest import run_selftest


class _UsageError(Exception):
    def __init__(self, parser, message):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(self, message)


def _build_parser():
    parser = _Parser(prog="cfre", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p_train = sub.add_parser("train", help="run an experiment config")
    p_train.add_argument("--config", required=True, help="experiment JSON")
    p_train.add_argument("--seed", type=int, default=None,
                         help="replace the config's seed list with one seed")
    p_train.add_argument("--out", default=None, help="override output directory")
    p_train.add_argument("--trainer", default=None,
                         help="override the trainer name")
    p_train.add_argument("--c", type=float, default=None,
                         help="override the flow weight (disables any sweep)")

    p_eval = sub.add_parser("eval", help="score a checkpoint on its task")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True, help="experiment JSON")
    p_eval.add_argument("--seed", type=int, default=None,
                        help="run seed (default: first seed in the config)")
    p_eval.add_argument("--out", default=None, help="also write metrics JSON here")

    p_grid = sub.add_parser("density-grid",
                            help="export the residual density on a grid")
    p_grid.add_argument("--checkpoint", required=True)
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--seed", type=int, default=None)
    p_grid.add_argument("--grid-range", nargs=2, type=float, default=None,
                        metavar=("A", "B"))
    p_grid.add_argument("--grid-steps", type=int, default=None, metavar="N")
    p_grid.add_argument("--joint", type=int, default=None,
                        help="probe joint (default: config probe_joint)")
    p_grid.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p_sp = sub.add_parser("sparsify",
                          help="curves and metrics from a prediction CSV")
    p_sp.add_argument("records", help="CSV with error,uncertainty,confidence")
    p_sp.add_argument("--seed", type=int, default=0,
                      help="seed for the random-removal baseline")
    p_sp.add_argument("--out", default=None,
                      help="directory for sparsification.csv and metrics.json")

    p_cmp = sub.add_parser("compare", help="join run directories into a table")
    p_cmp.add_argument("runs", nargs="+", help="run directories with metrics.json")
    p_cmp.add_argument("--out", default=None, help="write the table as CSV")

    p_self = sub.add_parser("selftest", help="run the built-in invariant suites")
    p_self.add_argument("--seed", type=int, default=0)

    return parser


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_train(args):
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.trainer is not None:
        updates["trainer"] = args.trainer
    if args.c is not None:
        updates["model"] = dataclasses.replace(cfg.model, c=args.c)
        updates["c_sweep"] = None
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    report = run_experiment(cfg)
    for r in report.runs:
        m = r.metrics
        c_txt = "" if r.c is None else " c=%g" % r.c
        print("run %s seed=%d%s: val_nll=%.6f test_nll=%.6f ause=%.6f "
              "aurg=%.6f pcc=%.6f"
              % (r.trainer, r.seed, c_txt, m["val_nll"], m["test_nll"],
                 m["ause"], m["aurg"], m["pcc"]))
    print("summary: %s" % report.summary_path)
    return 0


def _load_bundle(args):
    cfg = load_config(args.config)
    trained = ckpt.load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return cfg, trained, seed


def _cmd_eval(args):
    cfg, trained, seed = _load_bundle(args)
    payload, _, _ = evaluate_trained(trained, cfg, seed)
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        _write_json(args.out, payload)
    return 0


def _cmd_density_grid(args):
    cfg, trained, seed = _load_bundle(args)
    grid_range = tuple(args.grid_range) if args.grid_range else cfg.grid_range
    if not grid_range[0] < grid_range[1]:
        raise InputError("--grid-range must be (low, high) with low < high")
    steps = args.grid_steps if args.grid_steps is not None else cfg.grid_steps
    if steps < 2:
        raise InputError("--grid-steps must be >= 2")
    joint = args.joint if args.joint is not None else cfg.probe_joint
    data = run_dataset(cfg, seed)
    _, _, te = split_indices(cfg.n_samples, seed)
    test_inputs = data.inputs[te]
    probe = test_inputs[min(cfg.probe_index, len(test_inputs) - 1)]
    rows = density_grid_rows(trained, probe, joint, grid_range, steps)
    if args.out is not None:
        _write_grid_csv(args.out, rows)
        print("wrote %s (%d points)" % (args.out, len(rows)))
    else:
        sys.stdout.write("x,y,log_prob,prob\n")
        for x, y, lp, p in rows:
            sys.stdout.write("%r,%r,%r,%r\n" % (float(x), float(y),
                                                float(lp), float(p)))
    return 0


def _cmd_sparsify(args):
    records = metrics_mod.read_records_csv(args.records)
    curve = metrics_mod.sparsification_curve(records)
    oracle = metrics_mod.oracle_curve(records)
    random_curve = metrics_mod.random_baseline_curve(records, seed=args.seed)
    errs = np.array([r.error for r in records])
    uncs = np.array([r.uncertainty for r in records])
    payload = metrics_mod.metrics_payload(
        metrics_mod.ause(curve, oracle),
        metrics_mod.aurg(curve, random_curve),
        metrics_mod.pcc(errs, uncs),
        normalized=curve.normalized)
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        metrics_mod.write_curve_csv(os.path.join(args.out, "sparsification.csv"),
                                    curve)
        _write_json(os.path.join(args.out, "metrics.json"), payload)
    return 0


def _cmd_compare(args):
    rows = []
    for run_dir in args.runs:
        metrics_path = os.path.join(run_dir, "metrics.json")
        manifest_path = os.path.join(run_dir, "manifest.json")
        if not os.path.isfile(metrics_path):
            raise InputError("no metrics.json under %s" % run_dir)
        with open(metrics_path) as fh:
            metrics = json.load(fh)
        run_info = {"trainer": "?", "seed": -1, "c": None}
        if os.path.isfile(manifest_path):
            with open(manifest_path) as fh:
                run_info = json.load(fh).get("run", run_info)
        rows.append((run_dir, run_info, metrics))
    header = ("run", "trainer", "seed", "c", "val_nll", "test_nll", "ause",
              "aurg", "pcc")
    table = [header]
    for run_dir, info, m in rows:
        c_txt = "" if info.get("c") is None else "%g" % info["c"]
        table.append((os.path.basename(os.path.normpath(run_dir)),
                      str(info.get("trainer", "?")), str(info.get("seed", "?")),
                      c_txt, "%.6f" % m["val_nll"], "%.6f" % m["test_nll"],
                      "%.6f" % m["ause"], "%.6f" % m["aurg"], "%.6f" % m["pcc"]))
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    for row in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in table[1:]:
                fh.write(",".join(row) + "\n")
    return 0


def _cmd_selftest(args):
    return 0 if run_selftest(seed=args.seed) else 2


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "density-grid": _cmd_density_grid,
    "sparsify": _cmd_sparsify,
    "compare": _cmd_compare,
    "selftest": _cmd_selftest,
}


def cli(argv):
    """Parse argv (without the program name) and run one subcommand."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("cfre: a subcommand is required", file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError as err:
        err.parser.print_usage(sys.stderr)
        print("cfre: %s" % err, file=sys.stderr)
        return 1
    except SystemExit as err:  # argparse --help exits directly
        code = err.code
        return 0 if code is None else int(code)
    except FileNotFoundError as err:
        print("cfre: missing file: %s" % err, file=sys.stderr)
        return 1
    except InputError as err:
        print("cfre: invalid input: %s" % err, file=sys.stderr)
        return 1
    except NumericError as err:
        print("cfre: numeric failure: %s" % err, file=sys.stderr)
        return 2


def entrypoint():
    raise SystemExit(cli(sys.argv[1:]))
