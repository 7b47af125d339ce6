"""Run one training configuration end to end and persist its artifacts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .artifacts import new_run_dir, write_csv, write_json
from .config import RunConfig
from .data import Dataset
from .evaluator import (
    BudgetReport, budget_header, evaluate, exit_accuracies, write_budget_curve,
    write_exit_ratios, write_flops_table,
)
from .model import ExitNetwork, save_checkpoint
from .objectives import FisherStore, empirical_fisher
from .trainer import StageReport, TrainConfig, forgetting, run_regime

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    label: str
    train: TrainConfig
    net: ExitNetwork
    stages: list[StageReport]
    report: BudgetReport
    val_accuracy: list[float]
    fisher: FisherStore | None = None

    @property
    def selection_score(self) -> float:
        """Mean validation accuracy over all exits; grids pick the maximum."""
        return float(np.mean(self.val_accuracy))

    def forgetting(self) -> dict[str, float]:
        stages = {r.stage for r in self.stages if r.phase == "stage"}
        M = self.net.num_exits
        if set(range(1, M + 1)) <= stages:
            return {f"{nu}->{M}": forgetting(self.stages, nu, M) for nu in range(1, M)}
        return {}


def run_label(train: TrainConfig) -> str:
    parts = [train.regime]
    if train.regime == "ewc":
        parts.append(f"lam{train.lam:g}")
    elif train.regime == "lwf":
        parts.append(f"rho{train.rho:g}")
    if train.regime not in ("joint", "disjoint"):
        parts.append("wu" if train.warm_up else "nowu")
    return "_".join(parts)


def train_and_evaluate(cfg: RunConfig, train: TrainConfig, ds: Dataset) -> RunResult:
    net = ExitNetwork.init(cfg.model, cfg.seed)
    fisher = FisherStore() if train.regime == "ewc" else None
    net, stages = run_regime(net, ds, train, fisher)
    xte, yte = ds.part("test")
    if yte.size == 0:
        xte, yte = ds.part("val")
    ev = cfg.eval
    report = evaluate(net, xte, yte, ev.taus, ev.budgets, ev.confidence)
    xva, yva = ds.part("val")
    val_acc = exit_accuracies(net.predict_proba(xva), yva)
    return RunResult(run_label(train), train, net, stages, report, val_acc, fisher)


def budget_row(label: str, report: BudgetReport, budgets, dynamic: bool = False) -> list:
    table = report.dynamic if dynamic else report.static
    return [label] + [table[b] for b in budgets]


def write_budget_table(path: Path, results: list[RunResult], budgets, dynamic: bool = False,
                       key: str = "run") -> None:
    rows = [budget_row(r.label, r.report, budgets, dynamic) for r in results]
    write_csv(path, [key] + budget_header(budgets), rows)


def write_run(out: Path, cfg: RunConfig, res: RunResult) -> None:
    """All per-run artifacts.  ``out`` must be new or empty."""
    out = new_run_dir(out)
    doc = cfg.to_dict()
    train = doc["train"]
    for k in ("regime", "lam", "rho", "warm_up"):
        train[k] = getattr(res.train, k)
    doc["grid"] = {}
    write_json(out / "config.json", doc)

    rows = []
    for r in res.stages:
        rows += [[r.phase, r.stage, *h] for h in r.history]
    write_csv(out / "epochs.csv", ["phase", "stage", "epoch", "exit", "train_ce", "val_ce", "regularizer"], rows)
    write_json(out / "stages.json", [r.to_dict() for r in res.stages])
    save_checkpoint(res.net, out / "model.json")
    if res.fisher is not None and res.fisher.per_exit:
        res.fisher.to_csv(out / "fisher.csv")

    ev = cfg.eval
    write_flops_table(out / "flops.csv", res.report.flops)
    write_exit_ratios(out / "exit_ratios.csv", res.report)
    write_budget_curve(out / "budget_curve.csv", res.report)
    write_budget_table(out / "budget_table.csv", [res], ev.budgets)
    write_budget_table(out / "budget_table_dynamic.csv", [res], ev.budgets, dynamic=True)
    write_json(out / "summary.json", {
        "label": res.label,
        "seed": cfg.seed,
        "test_accuracy": res.report.exit_accuracy,
        "val_accuracy": res.val_accuracy,
        "selection_score": res.selection_score,
        "forgetting": res.forgetting(),
        "static_budget_accuracy": {f"{b:g}": v for b, v in res.report.static.items()},
        "dynamic_budget_accuracy": {f"{b:g}": v for b, v in res.report.dynamic.items()},
        "flops": list(res.report.flops.flops),
    })
    log.info("wrote %s", out)


def write_eval(out: Path, report: BudgetReport, budgets, label: str) -> None:
    out = new_run_dir(out)
    write_flops_table(out / "flops.csv", report.flops)
    write_exit_ratios(out / "exit_ratios.csv", report)
    write_budget_curve(out / "budget_curve.csv", report)
    rows = [[label] + [report.static[b] for b in budgets]]
    write_csv(out / "budget_table.csv", ["model"] + budget_header(budgets), rows)
    rows = [[label] + [report.dynamic[b] for b in budgets]]
    write_csv(out / "budget_table_dynamic.csv", ["model"] + budget_header(budgets), rows)
    write_json(out / "summary.json", {"label": label, "test_accuracy": report.exit_accuracy})


def fisher_all_exits(net: ExitNetwork, ds: Dataset) -> FisherStore:
    """Per-exit empirical Fisher at the given parameters, on the training split."""
    x, y = ds.part("train")
    store = FisherStore()
    for mu in range(1, net.num_exits + 1):
        store.add(mu, empirical_fisher(net, x, y, mu))
    return store


def grid_runs(cfg: RunConfig, ds: Dataset) -> list[RunResult]:
    return [train_and_evaluate(cfg, t, ds) for t in cfg.expand_grid()]


def compare_runs(cfg: RunConfig, ds: Dataset) -> list[RunResult]:
    """The six regimes on one dataset and seed; ewc and lwf keep the configured weights."""
    out = []
    for regime in ("disjoint", "branch-wise", "separate", "joint", "ewc", "lwf"):
        out.append(train_and_evaluate(cfg, replace(cfg.train, regime=regime), ds))
    return out
