"""Command line for sequentially trained early-exit networks.

Failures print one JSON object ``{"code", "message", "context"}`` on stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .artifacts import RunDirExists, new_run_dir, write_csv, write_json
from .config import ConfigError, RunConfig, build_dataset, load_config
from .data import SchemaError
from .evaluator import BudgetError, budget_header, evaluate
from .model import load_checkpoint
from .runner import (
    budget_row, compare_runs, fisher_all_exits, grid_runs, write_budget_table, write_eval,
    write_run,
)
from .trainer import TrainingDiverged

log = logging.getLogger("seqexit")

EXIT_CODES = {
    "usage": 2,
    "config_error": 3,
    "data_error": 4,
    "run_dir_exists": 5,
    "checkpoint_error": 6,
    "training_diverged": 7,
    "budget_error": 8,
}


class CliError(Exception):
    def __init__(self, code: str, message: str, context: dict | None = None):
        super().__init__(message)
        self.code = code
        self.context = context or {}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return v


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out_dir
    if out is None:
        raise CliError("usage", "no output directory: pass --out or set out_dir in the config")
    return Path(out)


def _dataset(cfg: RunConfig):
    try:
        return build_dataset(cfg)
    except (ConfigError, SchemaError):
        raise
    except ValueError as exc:
        raise CliError("data_error", str(exc)) from None


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError("checkpoint_error", str(exc), {"path": str(path)}) from None


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = _dataset(cfg)
    root = new_run_dir(out)
    results = grid_runs(cfg, ds)
    if len(results) == 1:
        write_run(root, cfg, results[0])
        return
    for res in results:
        write_run(root / res.label, cfg, res)
    best = max(range(len(results)), key=lambda i: results[i].selection_score)
    budgets = cfg.eval.budgets
    rows = [budget_row(r.label, r.report, budgets) + [r.selection_score, i == best]
            for i, r in enumerate(results)]
    write_csv(root / "budget_table.csv", ["run"] + budget_header(budgets) + ["val_score", "selected"], rows)
    write_json(root / "grid.json", {"runs": [r.label for r in results], "selected": results[best].label,
                                    "criterion": "mean validation accuracy over exits"})


def cmd_compare(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = _dataset(cfg)
    root = new_run_dir(out)
    results = compare_runs(cfg, ds)
    for res in results:
        write_run(root / res.train.regime, cfg, res)
    budgets = cfg.eval.budgets
    for r in results:
        r.label = r.train.regime
    write_budget_table(root / "budget_table.csv", results, budgets, key="regime")
    write_budget_table(root / "budget_table_dynamic.csv", results, budgets, dynamic=True, key="regime")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    net = _checkpoint(args.checkpoint)
    if net.spec != cfg.model:
        raise CliError("checkpoint_error", "checkpoint architecture differs from the config model",
                       {"checkpoint": net.spec.to_dict(), "config": cfg.model.to_dict()})
    ds = _dataset(cfg)
    x, y = ds.part("test")
    if y.size == 0:
        x, y = ds.part("val")
    ev = cfg.eval
    out = new_run_dir(out)
    report = evaluate(net, x, y, ev.taus, ev.budgets, ev.confidence)
    write_eval(out, report, ev.budgets, Path(args.checkpoint).stem)


def cmd_fisher_dump(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    net = _checkpoint(args.checkpoint)
    if net.spec != cfg.model:
        raise CliError("checkpoint_error", "checkpoint architecture differs from the config model",
                       {"checkpoint": net.spec.to_dict(), "config": cfg.model.to_dict()})
    ds = _dataset(cfg)
    out = new_run_dir(out)
    fisher_all_exits(net, ds).to_csv(out / "fisher.csv")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqexit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, type=Path, help="run configuration JSON")
        sp.add_argument("--seed", type=_u64, help="override the config seed")
        sp.add_argument("--out", type=Path, help="output directory (must be new or empty)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, type=Path, help="model.json from a train run")

    common(sub.add_parser("train", help="train one regime, or every point of the config grid"))
    common(sub.add_parser("compare", help="train all six regimes and tabulate budget accuracy"))
    common(sub.add_parser("evaluate", help="budget tables for a saved checkpoint"), checkpoint=True)
    common(sub.add_parser("fisher-dump", help="per-exit empirical Fisher of a checkpoint"), checkpoint=True)
    return p


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "evaluate": cmd_evaluate,
            "fisher-dump": cmd_fisher_dump}


def _fail(code: str, message: str, context: dict | None = None) -> int:
    sys.stderr.write(json.dumps({"code": code, "message": message, "context": context or {}},
                                sort_keys=True) + "\n")
    return EXIT_CODES[code]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            return 0
        return _fail("usage", "invalid command line", {"argv": list(sys.argv[1:] if argv is None else argv)})
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.context)
    except ConfigError as exc:
        return _fail("config_error", str(exc), {"config": str(args.config)})
    except (SchemaError, FileNotFoundError) as exc:
        return _fail("data_error", str(exc))
    except RunDirExists as exc:
        return _fail("run_dir_exists", str(exc))
    except TrainingDiverged as exc:
        return _fail("training_diverged", str(exc), exc.context)
    except BudgetError as exc:
        return _fail("budget_error", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
