"""Losses and forgetting regularisers for sequential exit training."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .artifacts import fmt
from .model import ExitNetwork, ParamId, ParamSnapshot
from .tensor import LOG_EPS, Tape, Tensor, log, mean_batch, mul, pick, reduce_sum, scale


class ScopeError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Gate ``s`` picks the regulariser: 1 -> EWC weighted by ``lam``, 0 -> LwF by ``rho``."""

    s: int
    lam: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        if self.s not in (0, 1):
            raise ValueError(f"s must be 0 or 1, got {self.s!r}")
        if self.lam < 0 or self.rho < 0:
            raise ValueError("lam and rho must be non-negative")


def _labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        bad = y[(y < 0) | (y >= num_classes)][0]
        raise ValueError(f"label {bad} outside 0..{num_classes - 1}")
    return y


def cross_entropy(pred: Tensor, labels) -> Tensor:
    """Batch mean of ``-log max(p_true, 1e-12)``."""
    y = _labels(labels, pred.shape[-1])
    return scale(mean_batch(log(pick(pred, y))), -1.0)


def cross_entropy_np(probs: np.ndarray, labels) -> float:
    y = _labels(labels, probs.shape[-1])
    p = probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.maximum(p, LOG_EPS))))


def kl_divergence(p, q) -> np.ndarray | float:
    """KL(p || q) over the last axis with clamped logs; ``0 log 0`` is 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    terms = p * (np.log(np.maximum(p, LOG_EPS)) - np.log(np.maximum(q, LOG_EPS)))
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Fisher information
# ---------------------------------------------------------------------------


def empirical_fisher(net: ExitNetwork, x: np.ndarray, labels, exit_index: int
                     ) -> dict[ParamId, np.ndarray]:
    """Diagonal empirical Fisher of exit ``exit_index`` at the current parameters.

    Per-sample squared gradients of the true-class log-probability, averaged
    over the samples.  Covers exactly the parameters on the path to that exit.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empirical Fisher needs at least one sample")
    y = _labels(labels, net.spec.num_classes)
    w_ids, b_ids = net.exit_chain(exit_index)
    wsq, bsq = _kernels.fisher_diag(
        x, y, [net.params[p] for p in w_ids], [net.params[p] for p in b_ids]
    )
    out = {}
    for pid, v in zip(w_ids, wsq):
        out[pid] = v
    for pid, v in zip(b_ids, bsq):
        out[pid] = v
    return {pid: out[pid] for pid in net.params if pid in out}


@dataclass
class FisherStore:
    """Per-exit diagonal Fisher values, summed on demand over earlier exits."""

    per_exit: dict[int, dict[ParamId, np.ndarray]] = field(default_factory=dict)

    def add(self, exit_index: int, values: dict[ParamId, np.ndarray]) -> None:
        if exit_index in self.per_exit:
            raise ValueError(f"Fisher for exit {exit_index} already stored")
        self.per_exit[exit_index] = {k: np.asarray(v, dtype=np.float64).copy() for k, v in values.items()}

    def accumulated(self, upto: int) -> dict[ParamId, np.ndarray]:
        """Sum of F^(nu) for nu = 1..upto, in exit order, over ids seen in any of them."""
        acc: dict[ParamId, np.ndarray] = {}
        for nu in sorted(self.per_exit):
            if nu > upto:
                break
            for pid, v in self.per_exit[nu].items():
                acc[pid] = v.copy() if pid not in acc else acc[pid] + v
        return acc

    def rows(self):
        for nu in sorted(self.per_exit):
            for pid, v in self.per_exit[nu].items():
                for off, val in enumerate(v.ravel()):
                    yield f"{pid}:{off}", nu, float(val)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param_id", "exit", "fisher_value"])
            for pid, nu, val in self.rows():
                w.writerow([pid, nu, fmt(val)])


def ewc_penalty(tape: Tape, net: ExitNetwork, snapshot: ParamSnapshot | None,
                fisher: FisherStore, stage: int) -> Tensor:
    """Sum over protected parameters of accumulated Fisher times squared drift.

    The Fisher weights and anchors enter as constants, so gradient reaches
    only the current parameter values.
    """
    if stage <= 1 or snapshot is None:
        return tape.const(0.0)
    acc = fisher.accumulated(stage - 1)
    missing = [str(pid) for pid in snapshot.values if pid not in acc]
    if missing:
        raise ScopeError(f"no Fisher values for protected parameters: {', '.join(missing[:4])}")
    total = None
    for pid, anchor in snapshot.values.items():
        d = tape.param(pid, net.params[pid]) - tape.const(anchor)
        term = reduce_sum(mul(mul(d, d), tape.const(acc[pid])))
        total = term if total is None else total + term
    return total


def ewc_value(net: ExitNetwork, snapshot: ParamSnapshot | None, fisher: FisherStore,
              stage: int) -> float:
    if stage <= 1 or snapshot is None:
        return 0.0
    acc = fisher.accumulated(stage - 1)
    return float(sum(float((acc[pid] * (net.params[pid] - a) ** 2).sum())
                     for pid, a in snapshot.values.items()))


# ---------------------------------------------------------------------------
# distillation from cached earlier-exit outputs
# ---------------------------------------------------------------------------


@dataclass
class TeacherCache:
    """Frozen distributions of earlier exits, one row per training sample."""

    probs: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, net: ExitNetwork, x: np.ndarray, exits) -> "TeacherCache":
        exits = sorted(exits)
        if not exits:
            return cls({})
        P = net.predict_proba(x, upto=exits[-1])
        return cls({nu: P[nu - 1].copy() for nu in exits})

    def rows(self, exit_index: int, idx: np.ndarray) -> np.ndarray:
        table = self.probs.get(exit_index)
        if table is None:
            raise KeyError(f"teacher cache has no rows for exit {exit_index}")
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise KeyError("teacher cache is missing rows for some sample indices")
        return table[idx]


def kl_to_teacher(p: Tensor, q: np.ndarray) -> Tensor:
    """Sum over the batch of KL(p_i || q_i); ``p`` is live, ``q`` constant."""
    tape = p.tape
    logq = np.log(np.maximum(q, LOG_EPS))
    return reduce_sum(mul(p, log(p) - tape.const(logq)))


def lwf_penalty(net: ExitNetwork, x: np.ndarray, idx, teacher: TeacherCache, stage: int,
                tape: Tape, outputs: dict[int, Tensor] | None = None) -> Tensor:
    """Batch mean of the summed KL(current || cached) over exits before ``stage``.

    ``outputs`` may carry distributions already computed on ``tape`` for this
    batch; missing ones are computed here.
    """
    if stage <= 1:
        return tape.const(0.0)
    prev = range(1, stage)
    outputs = dict(outputs or {})
    need = [nu for nu in prev if nu not in outputs]
    if need:
        outputs.update(net.forward_exits(x, need, tape))
    n = np.asarray(x).shape[0]
    total = None
    for nu in prev:
        term = kl_to_teacher(outputs[nu], teacher.rows(nu, idx))
        total = term if total is None else total + term
    return scale(total, 1.0 / n)


def total_stage_loss(ce, ewc, lwf, cfg: LossConfig):
    """``ce + s*lam*ewc + (1-s)*rho*lwf``; the gated-off term is never touched.

    Works on taped tensors and on plain floats.
    """
    if cfg.s == 1:
        return ce + (cfg.s * cfg.lam) * ewc
    return ce + ((1 - cfg.s) * cfg.rho) * lwf
