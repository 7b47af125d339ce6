import numpy as np
import pytest

from seqexit.model import ExitNetwork, ModelSpec, ParamId
from seqexit.rng import Rng
from seqexit.tensor import Tape

FD_STEP = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / den


def relu_pattern(net: ExitNetwork, x: np.ndarray) -> np.ndarray:
    """Sign pattern of every hidden pre-activation; used to spot kink crossings."""
    P = net.params
    h = x
    signs = []
    for mu in range(1, net.num_exits + 1):
        for li in range(net.spec.layers_per_segment):
            z = h @ P[ParamId("seg", mu, li, "weight")] + P[ParamId("seg", mu, li, "bias")]
            signs.append((z > 0).ravel())
            h = np.maximum(z, 0.0)
    return np.concatenate(signs)


def fd_check(net: ExitNetwork, x: np.ndarray, loss_fn, ids=None, step=FD_STEP, sample=None, seed=0):
    """Compare tape gradients with central differences of ``loss_fn``.

    ``loss_fn(net, tape)`` returns a scalar Tensor.  Coordinates whose
    perturbation flips a relu sign are skipped.  ``sample`` checks only that
    many coordinates, drawn with ``seed``.  Returns (max rel err, n checked).
    """
    tape = Tape()
    net.bind(tape)
    grads = tape.backward(loss_fn(net, tape))

    def value():
        t = Tape()
        net.bind(t)
        return float(loss_fn(net, t).data)

    coords = [(pid, k) for pid in (ids or list(net.params)) for k in range(net.params[pid].size)]
    if sample is not None and sample < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst, checked = 0.0, 0
    for pid, k in coords:
        flat = net.params[pid].reshape(-1)
        old = flat[k]
        flat[k] = old + step
        fp, sp = value(), relu_pattern(net, x)
        flat[k] = old - step
        fm, sm = value(), relu_pattern(net, x)
        flat[k] = old
        if not np.array_equal(sp, sm):
            continue
        fd = (fp - fm) / (2 * step)
        worst = max(worst, float(rel_err(grads[pid].reshape(-1)[k], fd)))
        checked += 1
    return worst, checked


def random_net(seed: int, max_width: int = 16, max_exits: int = 3, dim=None, classes=None):
    rng = Rng(seed, 77)
    u = rng.random(8)
    M = 2 + int(u[0] * (max_exits - 1))
    widths = tuple(2 + int(v * (max_width - 1)) for v in rng.random(M))
    spec = ModelSpec(
        input_dim=dim or 2 + int(u[1] * 4),
        num_classes=classes or 2 + int(u[2] * 3),
        widths=widths,
        layers_per_segment=1 + int(u[3] * 2),
    )
    net = ExitNetwork.init(spec, seed)
    # nonzero biases so the graph is not symmetric around the origin
    for pid, v in net.params.items():
        if pid.name == "bias":
            net.params[pid] = 0.1 * rng.normal(v.shape)
    return net


def random_batch(seed: int, net: ExitNetwork, n: int):
    rng = Rng(seed, 78)
    x = rng.normal((n, net.spec.input_dim))
    y = (rng.random(n) * net.spec.num_classes).astype(np.int64)
    return x, y


@pytest.fixture
def tiny_net():
    spec = ModelSpec(input_dim=3, num_classes=3, widths=(4, 5, 3), layers_per_segment=1)
    return ExitNetwork.init(spec, 7)


# -- frozen synthetic benchmark -----------------------------------------------------

BENCH_SEEDS = range(5)


class BenchmarkRuns:
    """Every benchmark run the behavioural checks need, trained once per session.

    ``runs[(regime, weight, warm_up, seed)]`` holds a RunResult.  The
    unregularised reference is ``("ewc", 0.0, True, seed)``.
    """

    def __init__(self):
        from seqexit.config import BENCHMARK, BENCHMARK_LAMBDAS, BENCHMARK_RHOS
        self.cfg = BENCHMARK
        self.lambdas, self.rhos = BENCHMARK_LAMBDAS, BENCHMARK_RHOS
        self.runs = {}
        self.seconds = 0.0
        self._data = {}

    def dataset(self, seed):
        from seqexit.config import build_dataset
        if seed not in self._data:
            self._data[seed] = build_dataset(self.cfg.with_seed(seed))
        return self._data[seed]

    def get(self, regime, weight, warm_up=True, seed=0):
        import time
        from dataclasses import replace

        from seqexit.runner import train_and_evaluate
        key = (regime, float(weight), bool(warm_up), seed)
        if key not in self.runs:
            cfg = self.cfg.with_seed(seed)
            kw = {"lam": float(weight)} if regime == "ewc" else {"rho": float(weight)}
            t0 = time.perf_counter()
            self.runs[key] = train_and_evaluate(cfg, replace(cfg.train, regime=regime, warm_up=warm_up, **kw),
                                                self.dataset(seed))
            self.seconds += time.perf_counter() - t0
        return self.runs[key]

    def reference(self, seed):
        return self.get("ewc", 0.0, True, seed)

    def best(self, regime):
        """Grid point with the highest validation score averaged over seeds."""
        grid = self.lambdas if regime == "ewc" else self.rhos
        score = {w: np.mean([self.get(regime, w, True, s).selection_score for s in BENCH_SEEDS]) for w in grid}
        return max(grid, key=lambda w: (score[w], -w))


@pytest.fixture(scope="session")
def bench():
    return BenchmarkRuns()
