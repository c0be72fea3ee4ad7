"""Command-line entry point: ``ctkd <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration problem, 3 runtime failure. Failures
print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .data import IdxFormatError, export_csv, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DEFAULT_SWEEP_TAUS = (1, 2, 3, 4, 5, 6, 8)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "usage", [message])


def _fail(code: int, kind: str, problems: list[str]):
    print(json.dumps({"error": kind, "problems": problems}), file=sys.stderr)
    sys.exit(code)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctkd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ctkd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("gen-data", help="generate and cache the dataset")
    common(sp)

    sp = sub.add_parser("train-teacher", help="train the teacher on labels only")
    common(sp)

    sp = sub.add_parser("distill", help="distil the teacher into the student")
    common(sp)
    sp.add_argument("--tau-fixed", type=float, help="plain KD at this fixed temperature")
    sp.add_argument("--strategy", choices=["cosine", "linear", "fixed", "delayed"])

    sp = sub.add_parser("eval", help="test accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="defaults to <out>/student.npz")

    sp = sub.add_parser("sweep", help="fixed-temperature grid plus a learned-temperature row")
    common(sp)
    sp.add_argument("--taus", type=_floats, default=list(DEFAULT_SWEEP_TAUS))
    sp.add_argument("--seeds", type=_ints, help="comma-separated seeds (default: the config seed)")
    sp.add_argument("--strategy", choices=["cosine", "linear", "fixed", "delayed"])

    sp = sub.add_parser("plot", help="charts from metrics CSVs")
    sp.add_argument("metrics", nargs="+", help="metrics.csv paths, optionally NAME=PATH")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tau-ref", type=_floats, default=[], help="extra reference temperatures")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    d = cfg.echo()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None):
        d["out"] = args.out
    if getattr(args, "tau_fixed", None) is not None:
        d["tau_fixed"] = args.tau_fixed
        d["temperature"] = None
    if getattr(args, "strategy", None):
        d["curriculum"]["strategy"] = args.strategy
    return parse_config(d)


def cmd_gen_data(args) -> dict:
    from .trainer import load_data

    cfg = _config(args)
    out = Path(args.out or cfg.out)
    train, test = load_data(cfg)
    for ds in (train, test):
        save_dataset(out / f"{ds.split}.npz", ds)
        export_csv(out / f"{ds.split}.csv", ds)
    dump_config(cfg, out / "config.yaml")
    return {"out": str(out), "train": len(train), "test": len(test), "dim": train.dim}


def cmd_train_teacher(args) -> dict:
    from .trainer import train_teacher

    cfg = _config(args)
    if args.out:
        d = cfg.echo()
        d["teacher"]["checkpoint"] = str(Path(args.out) / "teacher.npz")
        cfg = parse_config(d)
    result = train_teacher(cfg)
    return {"checkpoint": cfg.teacher.checkpoint, "test_acc": result.final_test_acc}


def cmd_distill(args) -> dict:
    from .trainer import distill

    cfg = _config(args)
    result = distill(cfg)
    last = result.records[-1] if result.records else None
    return {"out": cfg.out, "test_acc": last.test_acc if last else None,
            "tau_mean": last.tau_mean if last else None}


def cmd_eval(args) -> dict:
    from .trainer import TrainingError, evaluate, load_data
    from .models import load_checkpoint

    cfg = _config(args)
    ckpt = Path(args.checkpoint or Path(cfg.out) / "student.npz")
    if not ckpt.exists():
        raise TrainingError(f"checkpoint not found: {ckpt}")
    _, test = load_data(cfg)
    return {"checkpoint": str(ckpt), "test_acc": evaluate(load_checkpoint(ckpt), test)}


def cmd_sweep(args) -> dict:
    from .trainer import grid_search_tau, write_table

    cfg = _config(args)
    seeds = args.seeds or [cfg.seed]
    rows = grid_search_tau(cfg, args.taus, seeds)
    out = Path(cfg.out)
    path = write_table(out / "sweep.csv", rows)
    dump_config(cfg, out / "config.yaml")
    return {"table": str(path), "rows": rows}


def cmd_plot(args) -> dict:
    from .plotting import plot_runs

    runs = {}
    for item in args.metrics:
        name, sep, path = item.partition("=")
        if not sep:
            path = item
            p = Path(item)
            name = p.parent.name or p.stem
        if name in runs:
            name = f"{name}-{len(runs)}"
        runs[name] = path
    res = plot_runs(runs, args.out, args.tau_ref)
    return {"charts": [str(c) for c in res["charts"]], "merged": str(res["merged"])}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import TrainingError

    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, "config", exc.problems)
    except (TrainingError, IdxFormatError, OSError, ValueError) as exc:
        _fail(EXIT_RUNTIME, "runtime", [str(exc)])
    print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
