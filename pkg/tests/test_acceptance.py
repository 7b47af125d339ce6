"""Acceptance suite: one test per numbered acceptance criterion.

Criteria 4 to 6 train on the frozen synthetic benchmark (``seqexit.config.BENCHMARK``)
over seeds 0..4 and share those runs through the session ``bench`` fixture.
"""

import csv
import json
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

import seqexit._kernels as K
from seqexit.cli import main as cli
from seqexit.config import BENCHMARK
from seqexit.evaluator import ExitPolicy, flops_of, threshold_inference
from seqexit.model import ExitNetwork, ModelSpec
from seqexit.objectives import (
    FisherStore, LossConfig, TeacherCache, cross_entropy, empirical_fisher, ewc_penalty, ewc_value,
    kl_divergence, lwf_penalty, total_stage_loss,
)
from seqexit.rng import Rng
from seqexit.tensor import Tape, log, pick
from seqexit.trainer import TrainConfig, run_baseline, warm_up

from conftest import BENCH_SEEDS, fd_check, random_batch, random_net, rel_err

# -- shared helpers -------------------------------------------------------------------


def perturbed_setup(seed):
    """A random net with a Fisher store, snapshot and teacher for its last stage."""
    net = random_net(seed, max_width=16, max_exits=3)
    x, y = random_batch(seed, net, 5)
    M = net.num_exits
    store = FisherStore()
    for nu in range(1, M):
        store.add(nu, empirical_fisher(net, x, y, nu))
    snap = net.snapshot_params({(k, i) for k in ("seg", "ic") for i in range(1, M)})
    teacher = TeacherCache.build(net, x, range(1, M))
    rng = Rng(seed, 5)
    for pid in net.params:
        net.params[pid] = net.params[pid] + 0.2 * rng.normal(net.params[pid].shape)
    return net, x, y, store, snap, teacher


def brute_force_fisher(net, x, y, nu):
    acc = {}
    for i in range(x.shape[0]):
        tape = Tape()
        net.bind(tape)
        g = tape.backward(log(pick(net.forward_to_exit(x[i:i + 1], nu, tape), y[i:i + 1])))
        for pid, v in g.items():
            acc[pid] = acc.get(pid, 0.0) + v * v
    return {pid: v / x.shape[0] for pid, v in acc.items()}


def snapshot(net):
    return {pid: v.copy() for pid, v in net.params.items()}


def bits_equal(a, net, ids):
    return all(a[p].tobytes() == net.params[p].tobytes() for p in ids)


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def small_doc(**train):
    doc = BENCHMARK.to_dict()
    doc["train"].update({"max_epochs": 3, "patience": 2, **train})
    return doc


# -- 1 ----------------------------------------------------------------------------------


def test_01_gradient_correctness():
    t0 = time.perf_counter()
    worst, checked = {}, {}
    for seed in range(100):
        net, x, y, store, snap, teacher = perturbed_setup(seed)
        M = net.num_exits
        idx = np.arange(x.shape[0])
        mu = 1 + seed % M
        losses = {
            "ce": lambda nt, t: cross_entropy(nt.forward_to_exit(x, mu, t), y),
            "ewc": lambda nt, t: ewc_penalty(t, nt, snap, store, M),
            "lwf": lambda nt, t: lwf_penalty(nt, x, idx, teacher, M, t),
            "total_ewc": lambda nt, t: total_stage_loss(
                cross_entropy(nt.forward_to_exit(x, M, t), y), ewc_penalty(t, nt, snap, store, M),
                None, LossConfig(1, lam=3.0)),
            "total_lwf": lambda nt, t: total_stage_loss(
                cross_entropy(nt.forward_to_exit(x, M, t), y), None,
                lwf_penalty(nt, x, idx, teacher, M, t), LossConfig(0, rho=0.5)),
        }
        for name, fn in losses.items():
            # the EWC term is exactly quadratic, so a wide step has no truncation
            # error and avoids cancellation on its near-zero (~1e-10) coordinates
            step = 1e-3 if "ewc" in name else 1e-5
            w, n = fd_check(net, x, fn, sample=24, seed=seed, step=step)
            worst[name] = max(worst.get(name, 0.0), w)
            checked[name] = checked.get(name, 0) + n
    elapsed = time.perf_counter() - t0
    assert all(n >= 1000 for n in checked.values()), checked
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 60, f"{elapsed:.1f}s"


# -- 2 ----------------------------------------------------------------------------------


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_02_fisher_matches_brute_force_oracle(backend, monkeypatch):
    if backend == "numba" and not K.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(K, "fisher_diag", K.np_fisher_diag if backend == "numpy" else K.nb_fisher_diag)
    t0 = time.perf_counter()
    nets = 0
    for seed in range(200):
        net = random_net(seed, max_width=8)
        if sum(v.size for v in net.params.values()) > 200:
            continue
        nets += 1
        x, y = random_batch(seed, net, 1 + seed % 32)
        for nu in range(1, net.num_exits + 1):
            F = empirical_fisher(net, x, y, nu)
            for pid, v in brute_force_fisher(net, x, y, nu).items():
                assert np.abs(F.get(pid, np.zeros_like(v)) - v).max() <= 1e-10, (seed, nu, pid)
    assert nets >= 30
    assert time.perf_counter() - t0 < 10


# -- 3 ----------------------------------------------------------------------------------


def test_03_regulariser_identities():
    rng = np.random.default_rng(0)
    for seed in range(20):
        net = random_net(seed)
        x, y = random_batch(seed, net, 6)
        M = net.num_exits
        store = FisherStore()
        for nu in range(1, M):
            store.add(nu, empirical_fisher(net, x, y, nu))
        snap = net.snapshot_params({(k, i) for k in ("seg", "ic") for i in range(1, M)})
        # EWC is exactly zero at the anchor
        assert float(ewc_penalty(Tape(), net, snap, store, M).data) == 0.0
        assert ewc_value(net, snap, store, M) == 0.0
        # KL(p||p) is zero to 1e-12
        p = rng.dirichlet(np.ones(5), size=50)
        assert np.abs(kl_divergence(p, p)).max() <= 1e-12
        # LwF over an empty set of earlier exits is exactly zero
        teacher = TeacherCache.build(net, x, range(1, M))
        assert float(lwf_penalty(net, x, np.arange(6), teacher, 1, Tape()).data) == 0.0
    # the gate ignores the inactive regulariser bit for bit, whatever its value
    for ce, active, junk in [(0.7, 2.5, 9.0), (1.3, 0.25, float("inf")), (0.1, 3.0, float("nan"))]:
        for s, kw in ((1, {"lam": 2.0, "rho": 5.0}), (0, {"lam": 5.0, "rho": 2.0})):
            pair = (active, junk) if s == 1 else (junk, active)
            clean = (active, 0.0) if s == 1 else (0.0, active)
            got = total_stage_loss(ce, *pair, LossConfig(s, **kw))
            assert got.hex() == total_stage_loss(ce, *clean, LossConfig(s, **kw)).hex() == (ce + 2.0 * active).hex()
    tape = Tape()
    ce = tape.const(0.5)
    out = total_stage_loss(ce, None, tape.const(2.0), LossConfig(0, lam=3.0, rho=0.25))
    assert float(out.data) == 1.0


# -- 4 ----------------------------------------------------------------------------------


def test_04_forgetting_mitigation(bench):
    M = bench.cfg.model.num_exits
    key = f"1->{M}"
    lam, rho = bench.best("ewc"), bench.best("lwf")
    base = [bench.reference(s) for s in BENCH_SEEDS]
    ewc = [bench.get("ewc", lam, True, s) for s in BENCH_SEEDS]
    lwf = [bench.get("lwf", rho, True, s) for s in BENCH_SEEDS]
    F = {name: np.mean([r.forgetting()[key] for r in runs]) for name, runs in
         (("base", base), ("ewc", ewc), ("lwf", lwf))}
    acc1 = {name: np.mean([r.report.exit_accuracy[0] for r in runs]) for name, runs in
            (("base", base), ("ewc", ewc), ("lwf", lwf))}
    summary = f"lam*={lam} rho*={rho} forget={F} exit1={acc1} train={bench.seconds:.0f}s"
    assert F["base"] >= 0.05, summary
    assert F["ewc"] < F["base"] and F["lwf"] < F["base"], summary
    assert acc1["ewc"] - acc1["base"] >= 0.02 and acc1["lwf"] - acc1["base"] >= 0.02, summary
    assert bench.seconds < 600, summary


# -- 5 ----------------------------------------------------------------------------------


def test_05_ewc_selectivity(bench):
    violations = []
    for lam in bench.lambdas:
        assert lam > 0
        for s in BENCH_SEEDS:
            for rep in bench.get("ewc", lam, True, s).stages:
                if rep.drift:
                    top, bottom = rep.drift["q4"]["mean_sq"], rep.drift["q1"]["mean_sq"]
                    if top > bottom:
                        violations.append((lam, s, rep.stage, top, bottom))
    assert not violations, violations


# -- 6 ----------------------------------------------------------------------------------


@pytest.mark.parametrize("regime", ["ewc", "lwf"])
def test_06_warm_up_ablation(bench, regime):
    w = bench.best(regime)
    diffs = [bench.get(regime, w, True, s).report.exit_accuracy[-1]
             - bench.get(regime, w, False, s).report.exit_accuracy[-1] for s in BENCH_SEEDS]
    assert sum(d >= 0 for d in diffs) >= 4, f"weight={w} final-exit gain from warm-up per seed: {diffs}"


# -- 7 ----------------------------------------------------------------------------------


def test_07_threshold_monotonicity(bench):
    taus = [round(0.05 * k, 2) for k in range(21)]
    nets = [bench.get("lwf", bench.best("lwf"), True, 0).net, bench.reference(0).net]
    x, y = bench.dataset(0).part("test")
    cases = [(n, x, y) for n in nets]
    seed = 0
    while len(cases) < 22:
        net, seed = random_net(seed, max_exits=4), seed + 1
        try:
            flops_of(net)
        except ValueError:
            # a deeper exit cheaper than a shallower one is refused at evaluation
            continue
        cases.append((net, *random_batch(seed, net, 64)))
    for net, xs, ys in cases:
        res = [threshold_inference(net, xs, ys, ExitPolicy(t)) for t in taus]
        N, M = len(ys), net.num_exits
        for a, b in zip(res, res[1:]):
            assert (b.exit_index >= a.exit_index).all()
            ca, cb = np.cumsum(a.counts), np.cumsum(b.counts)
            assert all(cb[k] <= ca[k] for k in range(M))
        for r in res:
            assert sum(r.counts) == N
            assert sum(Fraction(c, N) for c in r.counts) == 1
            assert all(q == c / N for q, c in zip(r.ratios, r.counts))


# -- 8 ----------------------------------------------------------------------------------


def test_08_flops_accounting(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(small_doc(regime="lwf", rho=0.5)))
    assert cli(["compare", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "c")]) == 0
    checked = 0
    for sub in sorted((tmp_path / "c").iterdir()):
        if not sub.is_dir():
            continue
        flops = [int(r["flops"]) for r in csv.DictReader(open(sub / "flops.csv"))]
        assert all(b > a for a, b in zip(flops, flops[1:]))
        assert flops == list(flops_of(BENCHMARK.model).flops)
        for row in csv.DictReader(open(sub / "exit_ratios.csv")):
            total = 0.0
            for m, f in enumerate(flops, start=1):
                total += float(row[f"exit_{m}"]) * f
            assert repr(total) == row["mean_flops"]
            checked += 1
    assert checked == 6 * len(BENCHMARK.eval.taus)
    rng = Rng(8)
    for _ in range(300):
        u = rng.random(6)
        widths = tuple(1 + int(v * 32) for v in rng.random(2 + int(u[0] * 6)))
        spec = ModelSpec(1 + int(u[1] * 40), 2 + int(u[2] * 20), widths, 1 + int(u[3] * 3))
        try:
            t = flops_of(spec)
        except ValueError:
            continue
        assert all(b > a for a, b in zip(t.flops, t.flops[1:]))


# -- 9 ----------------------------------------------------------------------------------


def test_09_determinism(tmp_path):
    grid = small_doc(regime="ewc")
    grid["grid"] = {"lam": [1.0, 10.0], "warm_up": [True, False]}
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    (tmp_path / "cmp.json").write_text(json.dumps(small_doc(regime="lwf", rho=0.5, lam=3.0)))
    for run in ("a", "b"):
        assert cli(["train", "--config", str(tmp_path / "grid.json"), "--out", str(tmp_path / run / "train")]) == 0
        assert cli(["compare", "--config", str(tmp_path / "cmp.json"), "--out", str(tmp_path / run / "cmp")]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert len(a) > 100 and a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


# -- 10 ---------------------------------------------------------------------------------


SPEC10 = ModelSpec(input_dim=5, num_classes=4, widths=(6, 7, 8), layers_per_segment=2)
CFG10 = TrainConfig(lr=0.05, max_epochs=4, patience=2, batch_size=16)


def data10(seed=0):
    from seqexit.data import synth_blobs
    return synth_blobs(seed, 4, 5, 40, 0.8, coarse_groups=2, n_test_per_class=10).with_validation(0.1, seed)


def test_10_baseline_semantics(monkeypatch):
    import seqexit.trainer as T
    ds = data10()
    # disjoint: the backbone keeps its post-warm-up bits through every stage
    net, reps = run_baseline(ExitNetwork.init(SPEC10, 0), ds, replace(CFG10, regime="disjoint"))
    warmed, _ = warm_up(ExitNetwork.init(SPEC10, 0), ds, replace(CFG10, regime="disjoint"))
    seg = [p for p in net.params if p.kind == "seg"]
    assert bits_equal(snapshot(warmed), net, seg)
    assert any(not np.array_equal(warmed.params[p], net.params[p]) for p in net.params if p.kind == "ic")

    # branch-wise: every earlier segment and classifier is bit-identical across each stage
    real = T.train_stage
    seen = []

    def spy(net, ds, mu, cfg, *a, **k):
        before = snapshot(net)
        out = real(net, ds, mu, cfg, *a, **k)
        earlier = [p for p in net.params if p.index < mu]
        seen.append((mu, bits_equal(before, out[0], earlier), bits_equal(before, out[0], net.params)))
        return out

    monkeypatch.setattr(T, "train_stage", spy)
    T.run_baseline(ExitNetwork.init(SPEC10, 1), ds, replace(CFG10, regime="branch-wise"))
    assert [s[:2] for s in seen] == [(1, True), (2, True), (3, True)]
    assert not any(s[2] for s in seen)

    # joint: gradient of the summed loss is the sum of per-exit gradients and matches finite differences
    net = ExitNetwork.init(ModelSpec(3, 3, (4, 4, 3)), 5)
    for pid in net.params:
        if pid.name == "bias":
            net.params[pid] = net.params[pid] + 0.1
    x, y = random_batch(3, net, 6)

    def joint(nt, t):
        outs = nt.forward_exits(x, [1, 2, 3], t)
        return cross_entropy(outs[1], y) + cross_entropy(outs[2], y) + cross_entropy(outs[3], y)

    tape = Tape()
    net.bind(tape)
    g = tape.backward(joint(net, tape))
    parts = []
    for mu in (1, 2, 3):
        t = Tape()
        net.bind(t)
        parts.append(t.backward(cross_entropy(net.forward_to_exit(x, mu, t), y)))
    for pid in g:
        assert rel_err(g[pid], parts[0][pid] + parts[1][pid] + parts[2][pid]).max() < 1e-12
    worst, n = fd_check(net, x, joint)
    assert n > 40 and worst < 1e-6, worst
