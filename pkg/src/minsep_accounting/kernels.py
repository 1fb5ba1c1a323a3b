"""Hot inner loops.

Each kernel has a scalar-loop form compiled by numba and a numpy twin that
vectorizes across rows (Monte Carlo samples or examples) and loops over time.
The public wrappers pick one according to :data:`_accel.USE_NUMBA`; pass
``use_numba=`` explicitly to force a path (tests and the benchmark do).

All row-major inputs are ``(rows, n)`` float64/int64 arrays.
"""

import math

import numpy as np

from . import _accel

NEG_INF = -np.inf


# Above this many rows numpy's SIMD logaddexp beats the scalar jitted loop
# for the log-domain recursion (see benchmarks/bench_kernels.py).
RECURSION_ROW_CROSSOVER = 64


def _pick(use_numba):
    if use_numba is None:
        return _accel.USE_NUMBA
    return bool(use_numba) and _accel.NUMBA_AVAILABLE


# --------------------------------------------------------------------------
# sliding dot products: out[r, i] = sum_k coeffs[k] * Y[r, i + k]  (zero pad)

def _sliding_dots_loop(coeffs, Y, out):
    rows, n = Y.shape
    b = coeffs.shape[0]
    for r in range(rows):
        for i in range(n):
            acc = 0.0
            kmax = min(b, n - i)
            for k in range(kmax):
                acc += coeffs[k] * Y[r, i + k]
            out[r, i] = acc
    return out


def _sliding_dots_numpy(coeffs, Y, out):
    n = Y.shape[1]
    out[:] = 0.0
    for k in range(min(coeffs.shape[0], n)):
        out[:, : n - k] += coeffs[k] * Y[:, k:]
    return out


_sliding_dots_jit = _accel.jit(_sliding_dots_loop)


def sliding_dots_naive(coeffs, Y, use_numba=None):
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    Y = np.ascontiguousarray(np.atleast_2d(Y), dtype=np.float64)
    out = np.empty_like(Y)
    if _pick(use_numba):
        return _sliding_dots_jit(coeffs, Y, out)
    return _sliding_dots_numpy(coeffs, Y, out)


# --------------------------------------------------------------------------
# backward log-domain recursion
#   logf[i] = logaddexp(log_stay + logf[i+1], T[i] + logf[i+step]),
#   logf[j] = 0 for j >= n.

def _log_recursion_loop(T, log_stay, step, out):
    rows, n = T.shape
    for r in range(rows):
        for i in range(n - 1, -1, -1):
            a = log_stay
            if i + 1 < n:
                a += out[r, i + 1]
            c = T[r, i]
            if i + step < n:
                c += out[r, i + step]
            if a == -np.inf and c == -np.inf:
                out[r, i] = -np.inf
            elif a >= c:
                out[r, i] = a + math.log1p(math.exp(c - a))
            else:
                out[r, i] = c + math.log1p(math.exp(a - c))
    return out


def _log_recursion_numpy(T, log_stay, step, out):
    rows, n = T.shape
    padded = np.zeros((rows, n + step), dtype=np.float64)
    for i in range(n - 1, -1, -1):
        a = log_stay + padded[:, i + 1]
        c = T[:, i] + padded[:, i + step]
        padded[:, i] = np.logaddexp(a, c)
    out[:] = padded[:, :n]
    return out


_log_recursion_jit = _accel.jit(_log_recursion_loop)


def log_recursion(T, log_stay, step, use_numba=None):
    """Run the two-branch backward recursion on every row of ``T``.

    ``T[r, i]`` is the log-weight of the "participate at i" branch (sampling
    log-probability already folded in); ``log_stay`` is the log-probability of
    skipping iteration i; ``step`` is how far a participation jumps ahead.
    Returns ``logf`` with the same shape as ``T``. By default the jitted
    loop handles small batches and numpy large ones.
    """
    T = np.ascontiguousarray(np.atleast_2d(T), dtype=np.float64)
    if step < 1:
        raise ValueError("step must be >= 1")
    out = np.empty_like(T)
    if use_numba is None and T.shape[0] >= RECURSION_ROW_CROSSOVER:
        use_numba = False
    with np.errstate(invalid="ignore"):
        if _pick(use_numba):
            return _log_recursion_jit(T, float(log_stay), int(step), out)
        return _log_recursion_numpy(T, float(log_stay), int(step), out)


# --------------------------------------------------------------------------
# min-separation filter: turns per-iteration draws into a participation
# pattern where every nonzero entry blocks the next b - 1 iterations.

def _minsep_filter_loop(draws, b, init_block, out):
    rows, n = draws.shape
    for r in range(rows):
        blocked = init_block[r]
        for i in range(n):
            if blocked > 0:
                out[r, i] = 0
                blocked -= 1
            else:
                d = draws[r, i]
                out[r, i] = d
                if d > 0:
                    blocked = b - 1
    return out


def _minsep_filter_numpy(draws, b, init_block, out):
    n = draws.shape[1]
    blocked = init_block.copy()
    for i in range(n):
        free = blocked <= 0
        col = np.where(free, draws[:, i], 0)
        out[:, i] = col
        blocked = np.where(free & (col > 0), b - 1, np.maximum(blocked - 1, 0))
    return out


_minsep_filter_jit = _accel.jit(_minsep_filter_loop)


def minsep_filter(draws, b, init_block=None, use_numba=None):
    """Apply the b-min-sep availability chain to raw per-iteration draws.

    ``draws[r, i] > 0`` means row r would participate (with that count) at
    iteration i if available. ``init_block[r]`` is how many leading iterations
    row r is barred for (0 for a cold start).
    """
    draws = np.ascontiguousarray(np.atleast_2d(draws), dtype=np.int64)
    rows = draws.shape[0]
    if init_block is None:
        init_block = np.zeros(rows, dtype=np.int64)
    init_block = np.ascontiguousarray(init_block, dtype=np.int64)
    out = np.empty_like(draws)
    if _pick(use_numba):
        return _minsep_filter_jit(draws, int(b), init_block, out)
    return _minsep_filter_numpy(draws, int(b), init_block, out)


# --------------------------------------------------------------------------
# multi-attribution sampler over a CSR neighbourhood graph.
#   coins[i, e]: interim sample indicator of example e at iteration i.
#   by_coins=True blocks neighbours of every coin (S_j); False blocks
#   neighbours of realised participants (B_j) only.

def _multiattr_loop(coins, indptr, indices, b, by_coins, out):
    n_iter, m = coins.shape
    blocked_until = np.full(m, -1, dtype=np.int64)
    for i in range(n_iter):
        for e in range(m):
            out[i, e] = coins[i, e] and blocked_until[e] < i
        if b > 1:
            for e in range(m):
                src = coins[i, e] if by_coins else out[i, e]
                if src:
                    until = i + b - 1
                    for k in range(indptr[e], indptr[e + 1]):
                        nb = indices[k]
                        if blocked_until[nb] < until:
                            blocked_until[nb] = until
    return out


def _multiattr_numpy(coins, indptr, indices, b, by_coins, out):
    n_iter, m = coins.shape
    blocked_until = np.full(m, -1, dtype=np.int64)
    owner = np.repeat(np.arange(m), np.diff(indptr))
    for i in range(n_iter):
        out[i] = coins[i] & (blocked_until < i)
        if b > 1:
            src = coins[i] if by_coins else out[i]
            hit = indices[src[owner]]
            if hit.size:
                blocked_until[hit] = np.maximum(blocked_until[hit], i + b - 1)
    return out


_multiattr_jit = _accel.jit(_multiattr_loop)


def multiattr_batches(coins, indptr, indices, b, by_coins, use_numba=None):
    coins = np.ascontiguousarray(coins, dtype=np.bool_)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    out = np.zeros_like(coins)
    if _pick(use_numba):
        return _multiattr_jit(coins, indptr, indices, int(b), bool(by_coins), out)
    return _multiattr_numpy(coins, indptr, indices, int(b), bool(by_coins), out)
