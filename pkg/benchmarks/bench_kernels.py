"""Time each kernel under numba and under the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1]

Both implementations are imported side by side, so the result does not depend
on SEQEXIT_BACKEND.  Numba compile time is excluded by one warm-up call.
"""

import argparse
import timeit

import numpy as np

from seqexit import _kernels as K


def cases(scale: int):
    rng = np.random.default_rng(0)
    n = 256 * scale
    x = rng.normal(size=(n, 32))
    y = rng.integers(0, 8, n)
    widths = [32, 12, 12, 12, 12, 8]
    ws = [rng.normal(size=(a, b)) * 0.3 for a, b in zip(widths, widths[1:])]
    bs = [rng.normal(size=b) * 0.1 for b in widths[1:]]
    z = rng.normal(size=(n * 4, 8)) * 5
    conf = rng.random((n * 4, 4))
    tau = np.array([0.6, 0.6, 0.6, 0.0])
    u = rng.random(n * 4)
    out = np.empty(n * 4, np.uint64)

    def fill(fn):
        return lambda: fn(np.array([1, 2, 3, 4], np.uint64), out)

    return [
        ("xoshiro_fill", fill(K.np_xoshiro_fill), fill(K.nb_xoshiro_fill)),
        ("fisher_yates", lambda: K.np_fisher_yates(u), lambda: K.nb_fisher_yates(u)),
        ("softmax_rows", lambda: K.np_softmax_rows(z), lambda: K.nb_softmax_rows(z)),
        ("first_exit", lambda: K.np_first_exit(conf, tau), lambda: K.nb_first_exit(conf, tau)),
        ("fisher_diag", lambda: K.np_fisher_diag(x, y, ws, bs), lambda: K.nb_fisher_diag(x, y, ws, bs)),
    ]


def best_of(fn, repeat: int) -> float:
    fn()
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=int, default=1, help="multiplies every problem size")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<14}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, np_fn, nb_fn in cases(args.scale):
        a, b = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:<14}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{a / b:>9.1f}x")


if __name__ == "__main__":
    main()
