"""Hot inner loops, each with a numba and a pure-numpy/Python implementation.

The public names at the bottom of this module are bound once at import time.
Set ``SEQEXIT_BACKEND=numpy`` to force the fallback path; otherwise numba is
used when it imports cleanly.  Both implementations of every kernel are kept
importable (``np_*`` / ``nb_*``) so tests and the benchmark can compare them
side by side regardless of the selected backend.
"""

from __future__ import annotations

import math
import os

import numpy as np

LOG_EPS = 1e-12
_MASK64 = (1 << 64) - 1

try:
    import numba as _numba
    from numba.typed import List as _TypedList

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    _TypedList = None
    HAVE_NUMBA = False

_requested = os.environ.get("SEQEXIT_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"SEQEXIT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


# ---------------------------------------------------------------------------
# xoshiro256** stream
# ---------------------------------------------------------------------------


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def np_xoshiro_fill(state: np.ndarray, out: np.ndarray) -> None:
    """Fill ``out`` (uint64) with successive outputs and advance ``state`` in place."""
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(out.shape[0]):
        out[i] = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


def np_fisher_yates(u: np.ndarray) -> np.ndarray:
    """Permutation of ``len(u) + 1`` items driven by uniforms ``u`` in [0, 1)."""
    n = u.shape[0] + 1
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(math.floor(u[n - 1 - i] * (i + 1)))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# ---------------------------------------------------------------------------
# dense numerics
# ---------------------------------------------------------------------------


def np_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def np_first_exit(conf: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Index of the first column whose confidence reaches its threshold.

    The last column always accepts.
    """
    hit = conf >= tau[None, :]
    hit[:, -1] = True
    return np.argmax(hit, axis=1).astype(np.int64)


def np_fisher_diag(x, y, weights, biases):
    """Mean over samples of squared per-sample gradients of log p(true class).

    The chain is ``len(weights)`` dense layers, relu after all but the last,
    softmax on the last.  Per-sample weight gradients are outer products
    ``a_in ⊗ delta``, so their squares sum to ``(a_in**2).T @ delta**2``.
    Samples whose true-class probability is at or below ``LOG_EPS`` contribute
    zero, matching the clamped log.
    """
    n = x.shape[0]
    acts = [x]
    pre = []
    h = x
    last = len(weights) - 1
    for li, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if li < last else z
        if li < last:
            acts.append(h)
    p = np_softmax_rows(pre[-1])
    rows = np.arange(n)
    live = p[rows, y] > LOG_EPS
    delta = -p
    delta[rows, y] += 1.0
    delta[~live] = 0.0
    wsq = [None] * len(weights)
    bsq = [None] * len(weights)
    for li in range(last, -1, -1):
        d2 = delta * delta
        wsq[li] = (acts[li] * acts[li]).T @ d2 / n
        bsq[li] = d2.sum(axis=0) / n
        if li > 0:
            delta = (delta @ weights[li].T) * (pre[li - 1] > 0.0)
    return wsq, bsq


# ---------------------------------------------------------------------------
# numba twins
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _njit = _numba.njit(cache=True, nogil=True)

    @_njit
    def nb_xoshiro_fill(state, out):
        s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
        for i in range(out.shape[0]):
            r = s1 * np.uint64(5)
            r = (r << np.uint64(7)) | (r >> np.uint64(57))
            out[i] = r * np.uint64(9)
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        state[0] = s0
        state[1] = s1
        state[2] = s2
        state[3] = s3

    @_njit
    def nb_fisher_yates(u):
        n = u.shape[0] + 1
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(math.floor(u[n - 1 - i] * (i + 1)))
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        return perm

    @_njit
    def nb_softmax_rows(z):
        out = np.empty_like(z)
        m, c = z.shape
        for i in range(m):
            mx = z[i, 0]
            for j in range(1, c):
                if z[i, j] > mx:
                    mx = z[i, j]
            s = 0.0
            for j in range(c):
                out[i, j] = math.exp(z[i, j] - mx)
                s += out[i, j]
            for j in range(c):
                out[i, j] /= s
        return out

    @_njit
    def nb_first_exit(conf, tau):
        n, m = conf.shape
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            k = m - 1
            for j in range(m - 1):
                if conf[i, j] >= tau[j]:
                    k = j
                    break
            idx[i] = k
        return idx

    @_njit
    def _nb_fisher_diag(x, y, weights, biases, wsq, bsq):
        n = x.shape[0]
        nl = len(weights)
        width = x.shape[1]
        for w in weights:
            if w.shape[1] > width:
                width = w.shape[1]
        acts = np.zeros((nl, width))
        pre = np.zeros((nl, width))
        delta = np.zeros(width)
        nxt = np.zeros(width)
        for s in range(n):
            # forward, keeping the input to each layer and every pre-activation
            for j in range(x.shape[1]):
                acts[0, j] = x[s, j]
            for li in range(nl):
                w = weights[li]
                b = biases[li]
                din, dout = w.shape
                for j in range(dout):
                    pre[li, j] = b[j]
                for k in range(din):
                    a = acts[li, k]
                    for j in range(dout):
                        pre[li, j] += a * w[k, j]
                if li + 1 < nl:
                    for j in range(dout):
                        acts[li + 1, j] = pre[li, j] if pre[li, j] > 0.0 else 0.0
            c = weights[nl - 1].shape[1]
            mx = pre[nl - 1, 0]
            for j in range(1, c):
                if pre[nl - 1, j] > mx:
                    mx = pre[nl - 1, j]
            tot = 0.0
            for j in range(c):
                delta[j] = math.exp(pre[nl - 1, j] - mx)
                tot += delta[j]
            for j in range(c):
                delta[j] = -delta[j] / tot
            if -delta[y[s]] <= LOG_EPS:
                continue
            delta[y[s]] += 1.0
            # backward, squaring per-sample gradients as they appear
            for li in range(nl - 1, -1, -1):
                w = weights[li]
                din, dout = w.shape
                gw = wsq[li]
                gb = bsq[li]
                for j in range(dout):
                    gb[j] += delta[j] * delta[j]
                for k in range(din):
                    a2 = acts[li, k] * acts[li, k]
                    for j in range(dout):
                        gw[k, j] += a2 * (delta[j] * delta[j])
                if li > 0:
                    for k in range(din):
                        acc = 0.0
                        for j in range(dout):
                            acc += w[k, j] * delta[j]
                        nxt[k] = acc if pre[li - 1, k] > 0.0 else 0.0
                    for k in range(din):
                        delta[k] = nxt[k]
        for li in range(nl):
            wsq[li] /= n
            bsq[li] /= n

    def nb_fisher_diag(x, y, weights, biases):
        tw = _TypedList()
        tb = _TypedList()
        ow = _TypedList()
        ob = _TypedList()
        for w, b in zip(weights, biases):
            tw.append(np.ascontiguousarray(w, dtype=np.float64))
            tb.append(np.ascontiguousarray(b, dtype=np.float64))
            ow.append(np.zeros(w.shape))
            ob.append(np.zeros(b.shape))
        _nb_fisher_diag(
            np.ascontiguousarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64), tw, tb, ow, ob
        )
        return list(ow), list(ob)

else:  # pragma: no cover
    nb_xoshiro_fill = nb_fisher_yates = nb_softmax_rows = nb_first_exit = nb_fisher_diag = None


if BACKEND == "numba":
    xoshiro_fill = nb_xoshiro_fill
    fisher_yates = nb_fisher_yates
    softmax_rows = nb_softmax_rows
    first_exit = nb_first_exit
    fisher_diag = nb_fisher_diag
else:
    xoshiro_fill = np_xoshiro_fill
    fisher_yates = np_fisher_yates
    softmax_rows = np_softmax_rows
    first_exit = np_first_exit
    fisher_diag = np_fisher_diag
