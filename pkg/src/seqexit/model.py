"""Multi-exit dense network: M backbone segments, one internal classifier each."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import _kernels
from .rng import STREAM_INIT, Rng
from .tensor import Tape, Tensor, matmul, relu, softmax

CHECKPOINT_FORMAT = "seqexit-checkpoint"
CHECKPOINT_VERSION = 1

STAGE_REGIMES = ("ewc", "lwf", "disjoint", "branch-wise", "separate", "joint", "warm-up")
_ALIASES = {"proposed-ewc": "ewc", "proposed-lwf": "lwf"}


class ParamId(NamedTuple):
    """Address of one parameter tensor; scalars add a flat offset on top."""

    kind: str  # "seg" or "ic"
    index: int  # 1-based segment / classifier index
    layer: int
    name: str  # "weight" or "bias"

    def __str__(self):
        return f"{self.kind}{self.index}.{self.layer}.{self.name}"

    @classmethod
    def parse(cls, text: str) -> "ParamId":
        head, layer, name = text.split(".")
        kind = "seg" if head.startswith("seg") else "ic"
        return cls(kind, int(head[len(kind):]), int(layer), name)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    widths: tuple[int, ...]
    layers_per_segment: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an exit network needs at least 2 exits")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < 1 or self.layers_per_segment < 1 or min(self.widths) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def num_exits(self) -> int:
        return len(self.widths)

    def segment_shapes(self, mu: int) -> list[tuple[int, int]]:
        w = self.widths[mu - 1]
        first = self.input_dim if mu == 1 else self.widths[mu - 2]
        return [(first, w)] + [(w, w)] * (self.layers_per_segment - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _exit_ids(mu: int, spec: ModelSpec) -> list[ParamId]:
    ids = []
    for li in range(spec.layers_per_segment):
        ids += [ParamId("seg", mu, li, "weight"), ParamId("seg", mu, li, "bias")]
    return ids


class ExitNetwork:
    def __init__(self, spec: ModelSpec, params: dict[ParamId, np.ndarray]):
        self.spec = spec
        self.params = params
        self.trainable = {pid: True for pid in params}

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "ExitNetwork":
        """Glorot-uniform weights, zero biases, drawn in parameter order."""
        rng = Rng(seed, STREAM_INIT)
        params = {}
        for pid, shape in param_layout(spec):
            if pid.name == "bias":
                params[pid] = np.zeros(shape)
            else:
                fan_in, fan_out = shape
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                params[pid] = rng.uniform(-lim, lim, shape)
        return cls(spec, params)

    @property
    def num_exits(self) -> int:
        return self.spec.num_exits

    def copy(self) -> "ExitNetwork":
        net = ExitNetwork(self.spec, {k: v.copy() for k, v in self.params.items()})
        net.trainable = dict(self.trainable)
        return net

    def segment_ids(self, mu: int) -> list[ParamId]:
        return _exit_ids(mu, self.spec)

    def ic_ids(self, mu: int) -> list[ParamId]:
        return [ParamId("ic", mu, 0, "weight"), ParamId("ic", mu, 0, "bias")]

    def scope_ids(self, scope: Iterable[tuple[str, int]]) -> list[ParamId]:
        """Parameter ids for ``("seg", mu)`` / ``("ic", mu)`` tags, in model order."""
        tags = set(scope)
        return [pid for pid in self.params if (pid.kind, pid.index) in tags]

    def _check_exit(self, mu: int):
        if not 1 <= mu <= self.num_exits:
            raise ValueError(f"exit index {mu} out of range 1..{self.num_exits}")

    def _check_input(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"input must be (batch, {self.spec.input_dim}), got {x.shape}")

    # -- differentiable passes ------------------------------------------------

    def bind(self, tape: Tape, only_trainable: bool = False) -> None:
        """Register every parameter on ``tape`` before a forward pass.

        With ``only_trainable`` frozen leaves are recorded without gradient,
        so backward never descends into them.
        """
        for pid, value in self.params.items():
            tape.param(pid, value, requires_grad=self.trainable[pid] or not only_trainable)

    def forward_exits(self, x: np.ndarray, exits: Iterable[int], tape: Tape | None = None
                      ) -> dict[int, Tensor]:
        """One shared backbone pass; distributions for each requested exit."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        wanted = sorted(set(exits))
        for mu in wanted:
            self._check_exit(mu)
        tape = tape or Tape()
        p = lambda pid: tape.param(pid, self.params[pid])  # noqa: E731
        h = tape.const(x)
        out = {}
        for mu in range(1, wanted[-1] + 1):
            for li in range(self.spec.layers_per_segment):
                h = relu(matmul(h, p(ParamId("seg", mu, li, "weight"))) + p(ParamId("seg", mu, li, "bias")))
            if mu in wanted:
                logits = matmul(h, p(ParamId("ic", mu, 0, "weight"))) + p(ParamId("ic", mu, 0, "bias"))
                out[mu] = softmax(logits)
        return out

    def forward_to_exit(self, x: np.ndarray, mu: int, tape: Tape | None = None) -> Tensor:
        self._check_exit(mu)
        return self.forward_exits(x, [mu], tape)[mu]

    def forward_all_exits(self, x: np.ndarray, tape: Tape | None = None) -> list[Tensor]:
        out = self.forward_exits(x, range(1, self.num_exits + 1), tape)
        return [out[mu] for mu in range(1, self.num_exits + 1)]

    # -- plain numpy inference --------------------------------------------------

    def predict_proba(self, x: np.ndarray, upto: int | None = None) -> np.ndarray:
        """Distributions of exits 1..upto, shape (upto, batch, C).

        Same arithmetic as the taped pass, so results agree bit for bit.
        """
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        upto = upto or self.num_exits
        self._check_exit(upto)
        P = self.params
        out = np.empty((upto, x.shape[0], self.spec.num_classes))
        h = x
        for mu in range(1, upto + 1):
            for li in range(self.spec.layers_per_segment):
                h = np.maximum(h @ P[ParamId("seg", mu, li, "weight")] + P[ParamId("seg", mu, li, "bias")], 0.0)
            z = h @ P[ParamId("ic", mu, 0, "weight")] + P[ParamId("ic", mu, 0, "bias")]
            out[mu - 1] = _kernels.softmax_rows(np.ascontiguousarray(z))
        return out

    def exit_chain(self, mu: int) -> tuple[list[ParamId], list[ParamId]]:
        """(weight ids, bias ids) of the dense chain that produces exit ``mu``."""
        self._check_exit(mu)
        ws, bs = [], []
        for s in range(1, mu + 1):
            for li in range(self.spec.layers_per_segment):
                ws.append(ParamId("seg", s, li, "weight"))
                bs.append(ParamId("seg", s, li, "bias"))
        ws.append(ParamId("ic", mu, 0, "weight"))
        bs.append(ParamId("ic", mu, 0, "bias"))
        return ws, bs

    # -- stage bookkeeping ------------------------------------------------------

    def snapshot_params(self, scope: Iterable[tuple[str, int]]) -> "ParamSnapshot":
        ids = self.scope_ids(scope)
        if not ids:
            raise ValueError("snapshot scope is empty")
        return ParamSnapshot({pid: self.params[pid].copy() for pid in ids})

    def set_trainable(self, mu: int, regime: str, protect_ics: bool = True) -> None:
        """Apply the trainability mask for stage ``mu`` of ``regime``.

        ``protect_ics`` only matters for ewc: earlier classifiers stay
        trainable (and penalised) when set, frozen otherwise.
        """
        regime = _ALIASES.get(regime, regime)
        if regime not in STAGE_REGIMES:
            raise ValueError(f"unknown regime {regime!r}")
        M = self.num_exits
        self._check_exit(mu)
        if regime == "warm-up":
            live = {("seg", i) for i in range(1, M + 1)} | {("ic", M)}
        elif regime == "joint":
            live = {(k, i) for k in ("seg", "ic") for i in range(1, M + 1)}
        elif regime == "disjoint":
            live = {("ic", mu)}
        elif regime == "branch-wise":
            live = {("seg", mu), ("ic", mu)}
        else:
            live = {("seg", i) for i in range(1, mu + 1)} | {("ic", mu)}
            if regime in ("lwf", "separate") or (regime == "ewc" and protect_ics):
                live |= {("ic", i) for i in range(1, mu)}
        self.trainable = {pid: (pid.kind, pid.index) in live for pid in self.params}


@dataclass
class ParamSnapshot:
    """Anchor values keyed by parameter id (deep copies)."""

    values: dict[ParamId, np.ndarray] = field(default_factory=dict)

    def ids(self) -> list[ParamId]:
        return list(self.values)


def param_layout(spec: ModelSpec) -> list[tuple[ParamId, tuple[int, ...]]]:
    """Every parameter id and shape, segment then classifier for each exit."""
    out = []
    for mu in range(1, spec.num_exits + 1):
        for li, (fi, fo) in enumerate(spec.segment_shapes(mu)):
            out.append((ParamId("seg", mu, li, "weight"), (fi, fo)))
            out.append((ParamId("seg", mu, li, "bias"), (fo,)))
        w = spec.widths[mu - 1]
        out.append((ParamId("ic", mu, 0, "weight"), (w, spec.num_classes)))
        out.append((ParamId("ic", mu, 0, "bias"), (spec.num_classes,)))
    return out


def save_checkpoint(net: ExitNetwork, path: str | Path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "params": [
            {"id": str(pid), "shape": list(v.shape), "data": [float(t) for t in v.ravel()]}
            for pid, v in net.params.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> ExitNetwork:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    spec = ModelSpec(**doc["spec"])
    layout = param_layout(spec)
    entries = doc["params"]
    if [e["id"] for e in entries] != [str(pid) for pid, _ in layout]:
        raise ValueError(f"{path}: parameter list does not match the model spec")
    params = {}
    for (pid, shape), e in zip(layout, entries):
        if tuple(e["shape"]) != shape:
            raise ValueError(f"{path}: {pid} has shape {e['shape']}, expected {list(shape)}")
        params[pid] = np.array(e["data"], dtype=np.float64).reshape(shape)
    return ExitNetwork(spec, params)
