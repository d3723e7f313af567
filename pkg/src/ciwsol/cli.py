"""Command-line entry points.

Subcommands: `train` runs a full incremental experiment from a config file,
`eval` re-evaluates one task checkpoint, `report` prints (and optionally
plots) a finished run's accuracy table, `make-synthetic` renders the shapes
dataset, and `selfcheck` runs the built-in sanity battery.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ValidationError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ciwsol",
                                     description="class-incremental WSOL runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full incremental experiment")
    p_train.add_argument("--config", required=True, help="path to a config file")

    p_eval = sub.add_parser("eval", help="re-evaluate a task checkpoint")
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--task", required=True, type=int, help="task index (1-based)")

    p_report = sub.add_parser("report", help="print a run's accuracy table")
    p_report.add_argument("--run", required=True, help="run directory")
    p_report.add_argument("--plot", action="store_true",
                          help="write accuracy-vs-task plots into the run directory")

    p_synth = sub.add_parser("make-synthetic", help="render the synthetic shapes dataset")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--classes", type=int, default=6)
    p_synth.add_argument("--train", type=int, default=100, dest="per_class_train")
    p_synth.add_argument("--test", type=int, default=20, dest="per_class_test")
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)

    sub.add_parser("selfcheck", help="run the built-in oracle/invariant battery")
    return parser


def _cmd_train(args) -> int:
    from .config import load_config
    from .engine import run_experiment
    config = load_config(args.config)
    report = run_experiment(config)
    _print_report(report)
    return 0


def _cmd_eval(args) -> int:
    from .engine import evaluate_checkpoint
    record = evaluate_checkpoint(args.run, args.task)
    print("task,classes,top1_loc,top5_loc,gtk_loc")
    print(f"{record.task},{record.classes},{record.top1_loc:.6f},"
          f"{record.top5_loc:.6f},{record.gtk_loc:.6f}")
    return 0


def _print_report(report):
    print(f"{'task':>4} {'classes':>7} {'top1_loc':>9} {'top5_loc':>9} {'gtk_loc':>9}")
    for r in report.per_task:
        print(f"{r.task:>4} {r.classes:>7} {r.top1_loc:>9.4f} "
              f"{r.top5_loc:>9.4f} {r.gtk_loc:>9.4f}")
    for name in ("top1_loc", "top5_loc", "gtk_loc"):
        print(f"{name}: acc_avg={report.acc_avg(name):.4f} "
              f"acc_last={report.acc_last(name):.4f}")


def _cmd_report(args) -> int:
    from .evaluation import IncrementalReport
    path = os.path.join(args.run, "report.json")
    if not os.path.exists(path):
        raise ValidationError(f"no report.json under {args.run}")
    report = IncrementalReport.load(path)
    _print_report(report)
    if args.plot:
        _write_plots(report, os.path.join(args.run, "plots"))
    return 0


def _write_plots(report, plot_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(plot_dir, exist_ok=True)
    tasks = [r.task for r in report.per_task]
    for name, label in (("top1_loc", "Top-1 Loc"), ("top5_loc", "Top-5 Loc"),
                        ("gtk_loc", "GT-known Loc")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(tasks, report.metric(name), marker="o")
        ax.set_xlabel("task")
        ax.set_ylabel(f"{label} accuracy")
        ax.set_ylim(0.0, 1.0)
        ax.set_xticks(tasks)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        out = os.path.join(plot_dir, f"{name}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        print(f"wrote {out}")


def _cmd_synth(args) -> int:
    from .synth import synth_generate
    manifest = synth_generate(args.out, args.classes, args.per_class_train,
                              args.per_class_test, args.size, args.seed)
    print(f"wrote {len(manifest.entries)} entries to "
          f"{os.path.join(args.out, 'manifest.tsv')}")
    return 0


def _cmd_selfcheck(_args) -> int:
    from .selfcheck import run_selfcheck
    return 0 if run_selfcheck() else 3


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "make-synthetic": _cmd_synth,
    "selfcheck": _cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors and 0 for --help
        return 1 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
