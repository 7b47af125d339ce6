"""Inference-time analysis of a trained exit network.

Two readings of a compute budget are produced and kept apart:

* static: the deepest single exit whose cumulative cost fits the budget
  (one accuracy per exit, Table-1 style columns);
* dynamic: confidence-threshold early exiting, where a threshold sweep
  traces accuracy against mean cost per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .artifacts import write_csv
from .model import ExitNetwork, ModelSpec

DEFAULT_BUDGETS = (0.25, 0.5, 0.75, 1.0)
DEFAULT_TAUS = tuple(round(0.1 * k, 1) for k in range(1, 10))


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class FlopsTable:
    """Cumulative cost of reaching each exit.

    A dense layer ``in -> out`` costs ``in * out`` multiply-accumulates plus
    ``out`` bias additions; both are kept, and ``flops`` (their sum) is the
    cost axis for budgets.  Exit ``mu`` pays for segments ``1..mu`` and its
    own classifier only.
    """

    macs: tuple[int, ...]
    bias_adds: tuple[int, ...]

    @property
    def flops(self) -> tuple[int, ...]:
        return tuple(m + b for m, b in zip(self.macs, self.bias_adds))

    @property
    def total(self) -> int:
        return self.flops[-1]

    def fractions(self) -> tuple[float, ...]:
        return tuple(f / self.total for f in self.flops)


def flops_of(net: ExitNetwork | ModelSpec) -> FlopsTable:
    spec = net.spec if isinstance(net, ExitNetwork) else net
    macs, adds = [], []
    back_m = back_a = 0
    for mu in range(1, spec.num_exits + 1):
        for fi, fo in spec.segment_shapes(mu):
            back_m += fi * fo
            back_a += fo
        w = spec.widths[mu - 1]
        macs.append(back_m + w * spec.num_classes)
        adds.append(back_a + spec.num_classes)
    table = FlopsTable(tuple(macs), tuple(adds))
    f = table.flops
    if any(b <= a for a, b in zip(f, f[1:])):
        raise ValueError(f"exit costs are not strictly increasing: {f}")
    return table


@dataclass(frozen=True)
class ExitPolicy:
    """Exit at the first classifier whose confidence reaches its threshold.

    ``tau`` is one global threshold or one per exit; the final exit always
    accepts.  Confidence is the max softmax probability, or with
    ``confidence="entropy"`` one minus the entropy normalised by ``log C``.
    """

    tau: float | tuple[float, ...]
    confidence: str = "max_prob"

    def __post_init__(self):
        taus = self.tau if isinstance(self.tau, tuple) else (self.tau,)
        if any(not 0.0 <= float(t) <= 1.0 for t in taus):
            raise ValueError(f"thresholds must lie in [0, 1], got {self.tau}")
        if self.confidence not in ("max_prob", "entropy"):
            raise ValueError(f"unknown confidence measure {self.confidence!r}")

    def thresholds(self, num_exits: int) -> np.ndarray:
        if isinstance(self.tau, tuple):
            if len(self.tau) != num_exits:
                raise ValueError(f"need {num_exits} thresholds, got {len(self.tau)}")
            return np.array(self.tau, dtype=np.float64)
        return np.full(num_exits, float(self.tau))


def confidence(probs: np.ndarray, measure: str = "max_prob") -> np.ndarray:
    """(M, N, C) distributions -> (N, M) confidences."""
    if measure == "max_prob":
        c = probs.max(axis=-1)
    else:
        p = np.maximum(probs, _kernels.LOG_EPS)
        ent = -(probs * np.log(p)).sum(axis=-1)
        c = 1.0 - ent / math.log(probs.shape[-1])
    return np.ascontiguousarray(c.T)


@dataclass
class ThresholdResult:
    tau: float | tuple[float, ...]
    accuracy: float
    counts: tuple[int, ...]
    ratios: tuple[float, ...]
    mean_flops: float
    exit_index: np.ndarray = field(repr=False)  # 0-based exit per sample


def expected_flops(ratios: Sequence[float], flops: Sequence[int]) -> float:
    """``sum(ratio_mu * flops_mu)`` accumulated left to right."""
    total = 0.0
    for r, f in zip(ratios, flops):
        total += r * f
    return total


def threshold_inference_probs(probs: np.ndarray, labels, policy: ExitPolicy,
                              table: FlopsTable) -> ThresholdResult:
    y = np.asarray(labels, dtype=np.int64)
    M, N, _ = probs.shape
    idx = _kernels.first_exit(confidence(probs, policy.confidence), policy.thresholds(M))
    pred = probs[idx, np.arange(N)].argmax(axis=-1)
    counts = np.bincount(idx, minlength=M)
    ratios = tuple(float(c) / N for c in counts)
    return ThresholdResult(
        tau=policy.tau,
        accuracy=float(np.mean(pred == y)),
        counts=tuple(int(c) for c in counts),
        ratios=ratios,
        mean_flops=expected_flops(ratios, table.flops),
        exit_index=idx,
    )


def threshold_inference(net: ExitNetwork, x, labels, policy: ExitPolicy) -> ThresholdResult:
    return threshold_inference_probs(net.predict_proba(x), labels, policy, flops_of(net))


def exit_accuracies(probs: np.ndarray, labels) -> list[float]:
    y = np.asarray(labels, dtype=np.int64)
    return [float(np.mean(p.argmax(axis=-1) == y)) for p in probs]


def budget_exit(table: FlopsTable, budget: float) -> int:
    """1-based index of the deepest exit affordable within ``budget * total``."""
    if not 0.0 < budget <= 1.0:
        raise BudgetError(f"budget must lie in (0, 1], got {budget}")
    limit = budget * table.total
    fits = [mu for mu, f in enumerate(table.flops, start=1) if f <= limit]
    if not fits:
        raise BudgetError(f"no exit fits {budget:.0%} of the total cost; exit 1 needs "
                          f"{table.flops[0] / table.total:.1%}")
    return fits[-1]


def accuracy_at_budget_probs(probs: np.ndarray, labels, table: FlopsTable, budget: float) -> float:
    mu = budget_exit(table, budget)
    return exit_accuracies(probs[mu - 1:mu], labels)[0]


def accuracy_at_budget(net: ExitNetwork, x, labels, budget: float) -> float:
    table = flops_of(net)
    mu = budget_exit(table, budget)
    return exit_accuracies(net.predict_proba(x, upto=mu)[mu - 1:mu], labels)[0]


def budget_curve_probs(probs: np.ndarray, labels, taus: Sequence[float], table: FlopsTable,
                       measure: str = "max_prob") -> list[ThresholdResult]:
    """One threshold result per tau, ordered by mean cost (stable on ties)."""
    if len(taus) == 0:
        raise ValueError("threshold grid is empty")
    res = [threshold_inference_probs(probs, labels, ExitPolicy(float(t), measure), table) for t in taus]
    return sorted(res, key=lambda r: r.mean_flops)


def budget_curve(net: ExitNetwork, x, labels, taus: Sequence[float],
                 measure: str = "max_prob") -> list[tuple[float, float]]:
    res = budget_curve_probs(net.predict_proba(x), labels, taus, flops_of(net), measure)
    return [(r.mean_flops, r.accuracy) for r in res]


def dynamic_accuracy_at_budget(curve: Sequence[ThresholdResult], table: FlopsTable,
                               budget: float) -> float:
    """Best thresholded accuracy whose mean cost fits the budget (nan if none)."""
    limit = budget * table.total
    fits = [r.accuracy for r in curve if r.mean_flops <= limit]
    return max(fits) if fits else float("nan")


@dataclass
class BudgetReport:
    flops: FlopsTable
    exit_accuracy: list[float]
    static: dict[float, float | None]
    dynamic: dict[float, float]
    sweep: list[ThresholdResult]  # in tau order


def evaluate(net: ExitNetwork, x, labels, taus: Sequence[float] = DEFAULT_TAUS,
             budgets: Sequence[float] = DEFAULT_BUDGETS, measure: str = "max_prob") -> BudgetReport:
    probs = net.predict_proba(x)
    table = flops_of(net)
    static = {}
    for b in budgets:
        try:
            static[b] = accuracy_at_budget_probs(probs, labels, table, b)
        except BudgetError:
            static[b] = None
    sweep = [threshold_inference_probs(probs, labels, ExitPolicy(float(t), measure), table)
             for t in taus]
    curve = sorted(sweep, key=lambda r: r.mean_flops)
    dynamic = {b: dynamic_accuracy_at_budget(curve, table, b) for b in budgets}
    return BudgetReport(table, exit_accuracies(probs, labels), static, dynamic, sweep)


# -- CSV emitters -------------------------------------------------------------


def budget_header(budgets: Sequence[float]) -> list[str]:
    return [f"acc@{round(100 * b):d}%" for b in budgets]


def write_exit_ratios(path: str | Path, report: BudgetReport) -> None:
    M = len(report.flops.flops)
    header = ["tau"] + [f"exit_{m}" for m in range(1, M + 1)] + [f"count_{m}" for m in range(1, M + 1)]
    header += ["accuracy", "mean_flops"]
    rows = [[r.tau, *r.ratios, *r.counts, r.accuracy, r.mean_flops] for r in report.sweep]
    write_csv(path, header, rows)


def write_budget_curve(path: str | Path, report: BudgetReport) -> None:
    curve = sorted(report.sweep, key=lambda r: r.mean_flops)
    write_csv(path, ["mean_flops", "accuracy", "tau"], [[r.mean_flops, r.accuracy, r.tau] for r in curve])


def write_flops_table(path: str | Path, table: FlopsTable) -> None:
    rows = [[m, a, b, f, f / table.total]
            for m, (a, b, f) in enumerate(zip(table.macs, table.bias_adds, table.flops), start=1)]
    write_csv(path, ["exit", "macs", "bias_adds", "flops", "fraction"], rows)
