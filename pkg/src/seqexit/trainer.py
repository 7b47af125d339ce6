"""Sequential exit training: warm-up, regularised shallow-to-deep stages, baselines."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .model import ExitNetwork, ParamId, ParamSnapshot
from .objectives import (
    FisherStore,
    LossConfig,
    TeacherCache,
    cross_entropy,
    cross_entropy_np,
    empirical_fisher,
    ewc_penalty,
    ewc_value,
    kl_divergence,
    lwf_penalty,
    total_stage_loss,
)
from .rng import Rng
from .tensor import NonFiniteError, Tape

log = logging.getLogger(__name__)

PROPOSED = ("ewc", "lwf")
BASELINES = ("disjoint", "branch-wise", "separate", "joint")
REGIMES = PROPOSED + BASELINES


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, context: dict):
        super().__init__(message)
        self.context = context


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "lwf"
    lam: float = 0.0
    rho: float = 0.0
    warm_up: bool = True
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    ewc_protect_backbone: bool = True
    ewc_protect_ics: bool = True
    separate_prev_weight: float = 1.0
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5)")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")
        if self.lam < 0 or self.rho < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lam, rho must be >= 0 and momentum in [0, 1)")

    @property
    def s(self) -> int:
        return 1 if self.regime == "ewc" else 0

    def loss_config(self) -> LossConfig:
        return LossConfig(self.s, self.lam, self.rho)


@dataclass
class StageReport:
    phase: str  # "warm-up", "stage" or "joint"
    stage: int  # exit being trained; 0 for warm-up
    epochs_run: int = 0
    best_epoch: int = 0
    train_ce: dict[int, float] = field(default_factory=dict)
    val_ce: dict[int, float] = field(default_factory=dict)
    reg_trace: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    drift: dict[str, dict[str, float]] = field(default_factory=dict)
    history: list[tuple] = field(default_factory=list)  # (epoch, exit, train_ce, val_ce, reg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_ce"] = {str(k): v for k, v in self.train_ce.items()}
        d["val_ce"] = {str(k): v for k, v in self.val_ce.items()}
        d.pop("history")
        return d


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, velocity: dict) -> None:
    """Classical momentum: ``v <- momentum * v + g``, ``theta <- theta - lr * v``.

    Only ids present in ``grads`` move; callers pass trainable ids only.
    """
    for pid, g in grads.items():
        v = velocity.get(pid)
        v = g.copy() if v is None else momentum * v + g
        velocity[pid] = v
        params[pid] = params[pid] - lr * v


def _ensure_val(ds: Dataset, cfg: TrainConfig) -> Dataset:
    if (ds.split == "val").any():
        return ds
    return ds.with_validation(cfg.val_fraction, cfg.seed)


def _accuracy(probs: np.ndarray, y: np.ndarray) -> float:
    if y.size == 0:
        return float("nan")
    return float(np.mean(probs.argmax(axis=-1) == y))


def lwf_value(net: ExitNetwork, x: np.ndarray, teacher: TeacherCache, stage: int) -> float:
    if stage <= 1:
        return 0.0
    P = net.predict_proba(x, upto=stage - 1)
    idx = np.arange(x.shape[0])
    return float(sum(kl_divergence(P[nu - 1], teacher.rows(nu, idx)).sum()
                     for nu in range(1, stage)) / x.shape[0])


def _protected_scope(mu: int, cfg: TrainConfig) -> set[tuple[str, int]]:
    scope = set()
    if cfg.ewc_protect_backbone:
        scope |= {("seg", i) for i in range(1, mu)}
    if cfg.ewc_protect_ics:
        scope |= {("ic", i) for i in range(1, mu)}
    return scope


def _drift_by_quartile(net: ExitNetwork, snapshot: ParamSnapshot, fisher: FisherStore,
                       stage: int) -> dict[str, dict[str, float]]:
    acc = fisher.accumulated(stage - 1)
    F = np.concatenate([acc[pid].ravel() for pid in snapshot.values])
    D = np.concatenate([(net.params[pid] - a).ravel() for pid, a in snapshot.values.items()])
    order = np.argsort(F, kind="stable")
    out = {}
    for q, part in enumerate(np.array_split(order, 4), start=1):
        d = D[part]
        out[f"q{q}"] = {
            "count": int(d.size),
            "fisher_mean": float(F[part].mean()) if d.size else 0.0,
            "mean_sq": float(np.mean(d * d)) if d.size else 0.0,
            "norm": float(np.sqrt(np.sum(d * d))),
        }
    return out


class _Phase:
    """One optimisation phase: fixed mask, fixed loss, early stopping."""

    def __init__(self, net, ds, cfg, phase, stage, exits, monitor, loss_fn, reg_fn, stream):
        self.net = net
        self.cfg = cfg
        self.phase = phase
        self.stage = stage
        self.exits = exits  # exits whose CE is reported each epoch
        self.monitor = monitor  # exits summed into the early-stopping score
        self.loss_fn = loss_fn
        self.reg_fn = reg_fn
        self.rng = Rng(cfg.seed, stream)
        self.xtr, self.ytr = ds.part("train")
        self.xva, self.yva = ds.part("val")
        self.xte, self.yte = ds.part("test")

    def _evaluate(self, epoch, report):
        upto = max(self.exits)
        Ptr = self.net.predict_proba(self.xtr, upto)
        Pva = self.net.predict_proba(self.xva, upto)
        reg = self.reg_fn()
        score = 0.0
        for mu in self.exits:
            tr = cross_entropy_np(Ptr[mu - 1], self.ytr)
            va = cross_entropy_np(Pva[mu - 1], self.yva)
            report.history.append((epoch, mu, tr, va, reg))
            report.train_ce[mu] = tr
            report.val_ce[mu] = va
            if mu in self.monitor:
                score += va
        report.reg_trace.append(reg)
        return score

    def run(self) -> StageReport:
        cfg, net = self.cfg, self.net
        report = StageReport(self.phase, self.stage)
        live = [pid for pid, t in net.trainable.items() if t]
        best = self._evaluate(0, report)
        best_params = {pid: net.params[pid].copy() for pid in live}
        best_epoch, wait = 0, 0
        velocity: dict[ParamId, np.ndarray] = {}
        n = self.xtr.shape[0]
        for epoch in range(1, cfg.max_epochs + 1):
            order = self.rng.permutation(n)
            for step, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                tape = Tape()
                net.bind(tape, only_trainable=True)
                try:
                    loss = self.loss_fn(tape, self.xtr[idx], self.ytr[idx], idx)
                    value = float(loss.data)
                except NonFiniteError as exc:
                    value = float("nan")
                    cause = str(exc)
                else:
                    cause = "loss above threshold"
                if not np.isfinite(value) or value > cfg.divergence_threshold:
                    ctx = {"phase": self.phase, "stage": self.stage, "epoch": epoch, "step": step,
                           "loss": value if np.isfinite(value) else None}
                    raise TrainingDiverged(f"training diverged ({cause})", ctx)
                grads = tape.backward(loss)
                sgd_step(net.params, {pid: grads[pid] for pid in live}, cfg.lr, cfg.momentum, velocity)
            score = self._evaluate(epoch, report)
            report.epochs_run = epoch
            if score < best:
                best, best_epoch, wait = score, epoch, 0
                best_params = {pid: net.params[pid].copy() for pid in live}
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
        for pid in live:
            net.params[pid] = best_params[pid]
        report.best_epoch = best_epoch
        # final CE figures describe the restored parameters
        upto = max(self.exits)
        Ptr = net.predict_proba(self.xtr, upto)
        Pva = net.predict_proba(self.xva, upto)
        for mu in self.exits:
            report.train_ce[mu] = cross_entropy_np(Ptr[mu - 1], self.ytr)
            report.val_ce[mu] = cross_entropy_np(Pva[mu - 1], self.yva)
        if self.yte.size:
            Pte = net.predict_proba(self.xte)
            report.test_acc = [_accuracy(Pte[m], self.yte) for m in range(net.num_exits)]
        log.debug("%s %d: %d epochs, best %d", self.phase, self.stage, report.epochs_run, best_epoch)
        return report


def _shuffle_stream(stage: int) -> int:
    return 100 + stage


def warm_up(net: ExitNetwork, ds: Dataset, cfg: TrainConfig) -> tuple[ExitNetwork, StageReport]:
    """Train the whole backbone through the final exit only."""
    ds = _ensure_val(ds, cfg)
    M = net.num_exits
    net.set_trainable(M, "warm-up")

    def loss_fn(tape, x, y, idx):
        return cross_entropy(net.forward_to_exit(x, M, tape), y)

    rep = _Phase(net, ds, cfg, "warm-up", 0, [M], [M], loss_fn, lambda: 0.0, _shuffle_stream(0)).run()
    return net, rep


def train_stage(net: ExitNetwork, ds: Dataset, mu: int, cfg: TrainConfig,
                fisher: FisherStore | None = None, snapshot: ParamSnapshot | None = None,
                teacher: TeacherCache | None = None) -> tuple[ExitNetwork, StageReport]:
    """Train exit ``mu`` under ``cfg.regime`` (any regime except joint)."""
    if cfg.regime == "joint":
        raise ValueError("joint training has no per-exit stages; use run_baseline")
    ds = _ensure_val(ds, cfg)
    regime = cfg.regime
    net.set_trainable(mu, regime, protect_ics=cfg.ewc_protect_ics)
    lc = cfg.loss_config()
    xtr, _ = ds.part("train")

    if regime == "ewc" and mu > 1 and _protected_scope(mu, cfg):
        if fisher is None or snapshot is None:
            raise ValueError(f"stage {mu} under ewc needs a Fisher store and a parameter snapshot")
    if regime == "lwf" and mu > 1 and teacher is None:
        raise ValueError(f"stage {mu} under lwf needs a teacher cache")
    ewc_on = regime == "ewc" and mu > 1 and snapshot is not None and lc.lam > 0
    lwf_on = regime == "lwf" and mu > 1 and lc.rho > 0

    def loss_fn(tape, x, y, idx):
        if regime == "separate":
            outs = net.forward_exits(x, range(1, mu + 1), tape)
            loss = cross_entropy(outs[mu], y)
            for nu in range(1, mu):
                loss = loss + cfg.separate_prev_weight * cross_entropy(outs[nu], y)
            return loss
        if regime in ("disjoint", "branch-wise"):
            return cross_entropy(net.forward_to_exit(x, mu, tape), y)
        exits = range(1, mu + 1) if lwf_on else [mu]
        outs = net.forward_exits(x, exits, tape)
        ce = cross_entropy(outs[mu], y)
        if regime == "ewc":
            ewc = ewc_penalty(tape, net, snapshot, fisher, mu) if ewc_on else tape.const(0.0)
            return total_stage_loss(ce, ewc, None, lc)
        lwf = lwf_penalty(net, x, idx, teacher, mu, tape, outs) if lwf_on else tape.const(0.0)
        return total_stage_loss(ce, None, lwf, lc)

    if regime == "ewc":
        reg_fn = lambda: ewc_value(net, snapshot, fisher, mu)  # noqa: E731
    elif regime == "lwf" and mu > 1:
        reg_fn = lambda: lwf_value(net, xtr, teacher, mu)  # noqa: E731
    else:
        reg_fn = lambda: 0.0  # noqa: E731

    exits = list(range(1, mu + 1)) if regime in ("ewc", "lwf", "separate") else [mu]
    rep = _Phase(net, ds, cfg, "stage", mu, exits, [mu], loss_fn, reg_fn, _shuffle_stream(mu)).run()
    if regime == "ewc" and mu > 1 and snapshot is not None:
        rep.drift = _drift_by_quartile(net, snapshot, fisher, mu)
    return net, rep


def run_sequential(net: ExitNetwork, ds: Dataset, cfg: TrainConfig,
                   fisher: FisherStore | None = None) -> tuple[ExitNetwork, list[StageReport]]:
    """Optional warm-up, then stages 1..M shallow to deep.

    Under ewc the Fisher of exit ``mu`` is measured right after its stage at
    the final parameters, and ``fisher`` (if given) collects those values.
    """
    if cfg.regime not in PROPOSED:
        raise ValueError(f"run_sequential trains ewc or lwf, not {cfg.regime!r}")
    ds = _ensure_val(ds, cfg)
    xtr, ytr = ds.part("train")
    fisher = FisherStore() if fisher is None else fisher
    reports = []
    if cfg.warm_up:
        net, rep = warm_up(net, ds, cfg)
        reports.append(rep)
    for mu in range(1, net.num_exits + 1):
        snapshot = teacher = None
        if cfg.regime == "ewc" and mu > 1:
            scope = _protected_scope(mu, cfg)
            snapshot = net.snapshot_params(scope) if scope else None
        if cfg.regime == "lwf":
            teacher = TeacherCache.build(net, xtr, range(1, mu))
        net, rep = train_stage(net, ds, mu, cfg, fisher, snapshot, teacher)
        reports.append(rep)
        if cfg.regime == "ewc":
            fisher.add(mu, empirical_fisher(net, xtr, ytr, mu))
    return net, reports


def run_baseline(net: ExitNetwork, ds: Dataset, cfg: TrainConfig
                 ) -> tuple[ExitNetwork, list[StageReport]]:
    """Disjoint, branch-wise, separate or joint training.

    Disjoint always starts from a warm-up (its backbone is trained once and
    then frozen); joint never does; the other two follow ``cfg.warm_up``.
    """
    if cfg.regime not in BASELINES:
        raise ValueError(f"unknown baseline regime {cfg.regime!r}")
    ds = _ensure_val(ds, cfg)
    reports = []
    M = net.num_exits
    if cfg.regime == "joint":
        net.set_trainable(M, "joint")
        allx = list(range(1, M + 1))

        def loss_fn(tape, x, y, idx):
            outs = net.forward_exits(x, allx, tape)
            loss = cross_entropy(outs[1], y)
            for mu in allx[1:]:
                loss = loss + cross_entropy(outs[mu], y)
            return loss

        rep = _Phase(net, ds, cfg, "joint", M, allx, allx, loss_fn, lambda: 0.0,
                     _shuffle_stream(0)).run()
        return net, [rep]
    if cfg.regime == "disjoint" or cfg.warm_up:
        net, rep = warm_up(net, ds, cfg)
        reports.append(rep)
    for mu in range(1, M + 1):
        net, rep = train_stage(net, ds, mu, cfg)
        reports.append(rep)
    return net, reports


def run_regime(net: ExitNetwork, ds: Dataset, cfg: TrainConfig,
               fisher: FisherStore | None = None) -> tuple[ExitNetwork, list[StageReport]]:
    if cfg.regime in PROPOSED:
        return run_sequential(net, ds, cfg, fisher)
    return run_baseline(net, ds, cfg)


def forgetting(reports: list[StageReport], nu: int, mu: int) -> float:
    """Exit ``nu`` test accuracy right after its own stage minus after stage ``mu``."""
    by_stage = {r.stage: r for r in reports if r.phase == "stage"}
    return by_stage[nu].test_acc[nu - 1] - by_stage[mu].test_acc[nu - 1]


def with_regime(cfg: TrainConfig, regime: str, **kw) -> TrainConfig:
    return replace(cfg, regime=regime, **kw)
