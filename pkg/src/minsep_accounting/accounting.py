"""Likelihood ratios and Monte Carlo hockey-stick estimates.

The mechanism seen by the accountant is ``y = C x + z`` (hypothesis P) versus
``y = z`` (hypothesis Q), with ``z ~ N(0, sigma^2 I)`` and ``x`` the random
participation vector of one example (or the per-iteration counts of one
user). Every routine works on ``log P(y)/Q(y)``.

A single Gaussian factor is ``exp((<c_i, y> - ||c_i||^2 / 2) / sigma^2)``; for
min-separated participation these factors chain through a two-branch
backward recursion (see :func:`minsep_accounting.kernels.log_recursion`).
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import io
import json
import math
from typing import Sequence

import numpy as np
from scipy import signal, special, stats
from scipy.stats import qmc

from . import kernels, rng as rng_mod, sampling
from .strategy import (GeneralLowerTriangular, StrategyMatrix, ToeplitzBanded,
                       column_squared_norms, fft_threshold, sliding_dot_products)

KINDS = ("poisson", "bminsep_cold", "bminsep_warm", "cyclic_poisson", "balls_in_bins",
         "multiattr", "multiattr_participation", "rminsep")
DIRECTIONS = ("P_vs_Q", "Q_vs_P")
MAX_BRUTE_N = 14
MAX_BRUTE_COINS = 16
MC_CELLS_PER_BLOCK = 2**20


class UnprovenSchemeError(ValueError):
    """Accounting was requested for a sampler whose analysis is only conjectured."""


@dataclasses.dataclass(frozen=True)
class Scheme:
    """What the accountant needs to know about a sampler.

    ``b`` is the minimum separation (cycle length for cyclic Poisson, epoch
    length ``T`` for balls-in-bins, ``r`` for the r-min-sep bound); ``p`` is
    the per-iteration probability the sampler actually uses.
    """

    kind: str
    b: int = 1
    p: float = 0.0
    k_u: int = 1
    unproven_conjecture: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}; expected one of {KINDS}")
        if self.b < 1:
            raise ValueError("b must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.k_u < 1:
            raise ValueError("k_u must be >= 1")
        if self.kind == "poisson" and self.b != 1:
            raise ValueError("Poisson sampling has b = 1")
        if self.kind == "multiattr_participation" and not self.unproven_conjecture:
            raise UnprovenSchemeError(
                "participation-based multi-attribution sampling has no proven accounting; "
                "pass unproven_conjecture=True (CLI: --unproven-conjecture) to proceed")

    @property
    def certified(self) -> bool:
        return self.kind != "multiattr_participation"

    @property
    def sampling_kind(self) -> str | None:
        """Matching single-example scheme in :mod:`sampling`, if any."""
        if self.kind in sampling.SCHEMES:
            return self.kind
        return "bminsep_cold" if self.kind == "rminsep" else None

    def horizon(self, n: int) -> int:
        """Number of iterations the accountant sees (balls-in-bins drops a partial epoch)."""
        if self.kind == "balls_in_bins":
            if self.b > n:
                raise ValueError(f"epoch length {self.b} exceeds n={n}")
            return (n // self.b) * self.b
        return n

    def label(self) -> str:
        extra = f",k_u={self.k_u}" if self.k_u != 1 else ""
        return f"{self.kind}(b={self.b},p={self.p:.6g}{extra})"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_rate(cls, kind: str, b: int, p0: float, k_u: int = 1, **kw) -> "Scheme":
        """Scheme with average participation rate ``p0`` per example."""
        if kind == "poisson":
            return cls(kind, 1, p0, k_u, **kw)
        if kind == "balls_in_bins":
            return cls(kind, b, 1.0, k_u, **kw)
        if kind == "cyclic_poisson":
            if b * p0 > 1 + 1e-12:
                raise ValueError(f"cyclic Poisson needs b * p0 <= 1, got {b * p0}")
            return cls(kind, b, min(1.0, b * p0), k_u, **kw)
        return cls(kind, b, sampling.convert_rate(p0, b), k_u, **kw)


# --------------------------------------------------------------------------
# validation helpers

def _as_rows(y, n: int) -> np.ndarray:
    Y = np.asarray(y, dtype=np.float64)
    if Y.shape[-1] != n or Y.ndim not in (1, 2):
        raise ValueError(f"expected y of length {n}, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("y contains non-finite entries")
    return np.atleast_2d(Y)


def _check_sigma(sigma):
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def _log1m(p: float) -> float:
    return math.log1p(-p) if p < 1 else -math.inf


def _require_band(m: StrategyMatrix, sep: int, what: str):
    if not isinstance(m, ToeplitzBanded):
        raise TypeError(f"{what} needs a banded Toeplitz matrix; use lr_rminsep_upper for dense C")
    if m.b > sep:
        raise ValueError(f"{what}: matrix has {m.b} bands but separation is only {sep}; "
                         "the exact recursion needs bands <= separation")


def truncate(m: StrategyMatrix, n: int) -> StrategyMatrix:
    """Leading ``n x n`` block of ``m``."""
    if n == m.n:
        return m
    if isinstance(m, ToeplitzBanded):
        return ToeplitzBanded(n, m.coeffs[:n])
    return GeneralLowerTriangular(m.entries[:n, :n])


def column_dots(m: StrategyMatrix, Y: np.ndarray) -> np.ndarray:
    """``out[r, i] = <c_i, y_r>`` over the full column ``c_i``."""
    if isinstance(m, ToeplitzBanded):
        return np.atleast_2d(sliding_dot_products(m.coeffs, Y))
    return np.atleast_2d(Y) @ m.entries


def log_gaussian_terms(m: StrategyMatrix, sigma: float, Y: np.ndarray) -> np.ndarray:
    """``(<c_i, y> - ||c_i||^2 / 2) / sigma^2`` for every row and column."""
    return (column_dots(m, Y) - 0.5 * column_squared_norms(m)) / sigma**2


def apply_rows(m: StrategyMatrix, X: np.ndarray) -> np.ndarray:
    """``C x`` for every row ``x`` of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not isinstance(m, ToeplitzBanded):
        return X @ m.entries.T
    n = X.shape[1]
    if m.b > fft_threshold(n):
        return signal.fftconvolve(X, m.coeffs[None, :], mode="full", axes=1)[:, :n]
    out = m.coeffs[0] * X
    for k in range(1, m.b):
        out[:, k:] += m.coeffs[k] * X[:, : n - k]
    return out


# --------------------------------------------------------------------------
# likelihood ratios

@dataclasses.dataclass(frozen=True, eq=False)
class LikelihoodProfile:
    """Suffix log-ratios ``log f_1 .. log f_n`` and the scheme's final ratio."""

    log_f: np.ndarray
    log_combined: float

    @property
    def f(self) -> np.ndarray:
        return np.exp(self.log_f)

    @property
    def combined(self) -> float:
        return math.exp(self.log_combined)


def _minsep_log_f(m, p, sigma, Y, step):
    T = log_gaussian_terms(m, sigma, Y) + _log(p)
    return kernels.log_recursion(T, _log1m(p), step)


def _warm_combine_rows(log_f: np.ndarray, p: float, b: int) -> np.ndarray:
    log_f = np.atleast_2d(log_f)
    if b > log_f.shape[1]:
        raise ValueError(f"b={b} exceeds profile length {log_f.shape[1]}")
    if b == 1:
        return log_f[:, 0].copy()
    parts = np.concatenate([log_f[:, :1], _log(p) + log_f[:, 1:b]], axis=1)
    return special.logsumexp(parts, axis=1) - math.log1p((b - 1) * p)


def lr_bminsep(m: ToeplitzBanded, p: float, sigma: float, y, min_sep: int | None = None
               ) -> LikelihoodProfile:
    """Cold-start b-min-sep likelihood profile; ``combined`` is ``f_1``.

    ``min_sep`` defaults to the band count of ``m`` and may exceed it.
    """
    _check_sigma(sigma)
    sep = m.b if min_sep is None else int(min_sep)
    _require_band(m, sep, "lr_bminsep")
    log_f = _minsep_log_f(m, p, sigma, _as_rows(y, m.n), sep)[0]
    return LikelihoodProfile(log_f, float(log_f[0]))


def lr_warm_combine(profile: LikelihoodProfile, p: float, b: int) -> float:
    """Warm-start ratio ``(f_1 + p * sum_{i=2..b} f_i) / (1 + (b - 1) p)``."""
    return math.exp(float(_warm_combine_rows(profile.log_f, p, b)[0]))


def lr_balls_in_bins(m: StrategyMatrix, T: int, sigma: float, y) -> float:
    return math.exp(float(_log_lr_bib(m, T, sigma, _as_rows(y, m.n))[0]))


def _log_lr_bib(m, T, sigma, Y):
    if not 1 <= T <= m.n:
        raise ValueError(f"need 1 <= T <= n, got T={T}")
    n_eff = (m.n // T) * T
    mt = truncate(m, n_eff)
    Y = Y[:, :n_eff]
    dots = column_dots(mt, Y)
    logs = np.empty((Y.shape[0], T))
    for o in range(T):
        x = np.zeros(n_eff)
        x[o::T] = 1.0
        cx = apply_rows(mt, x)[0]
        logs[:, o] = (dots[:, o::T].sum(axis=1) - 0.5 * float(cx @ cx)) / sigma**2
    return special.logsumexp(logs, axis=1) - math.log(T)


def lr_cyclic_poisson(m: ToeplitzBanded, p_cyc: float, sigma: float, y, b: int | None = None) -> float:
    """Fixed-phase cyclic Poisson: the example may join iterations 1, b+1, ...
    each with probability ``p_cyc``. ``b`` defaults to the band count."""
    _check_sigma(sigma)
    b = m.b if b is None else int(b)
    return math.exp(float(_log_lr_cyclic(m, p_cyc, sigma, _as_rows(y, m.n), b)[0]))


def _log_lr_cyclic(m, p, sigma, Y, b):
    _require_band(m, b, "lr_cyclic_poisson")
    T = log_gaussian_terms(m, sigma, Y)[:, ::b]
    with np.errstate(divide="ignore"):
        return np.logaddexp(_log1m(p), _log(p) + T).sum(axis=1)


def _multiattr_terms(m, p, k_u, sigma, Y):
    dots = column_dots(m, Y)
    norms = column_squared_norms(m)
    j = np.arange(1, k_u + 1, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logw = stats.binom.logpmf(j, k_u, p)
    terms = (dots[..., None] * j - 0.5 * norms[None, :, None] * j**2) / sigma**2 + logw
    return special.logsumexp(terms, axis=-1)


def lr_multiattr(m: ToeplitzBanded, p: float, k_u: int, sigma: float, y,
                 min_sep: int | None = None) -> LikelihoodProfile:
    """User-level recursion: at an available iteration the user contributes
    ``Binomial(k_u, p)`` examples, and any positive count bars the next
    ``b - 1`` iterations."""
    _check_sigma(sigma)
    if k_u < 1:
        raise ValueError("k_u must be >= 1")
    sep = m.b if min_sep is None else int(min_sep)
    _require_band(m, sep, "lr_multiattr")
    Y = _as_rows(y, m.n)
    log_f = kernels.log_recursion(_multiattr_terms(m, p, k_u, sigma, Y), k_u * _log1m(p), sep)[0]
    return LikelihoodProfile(log_f, float(log_f[0]))


def lr_rminsep_upper(m: StrategyMatrix, p: float, r: int, sigma: float, y) -> float:
    """Upper bound on the ratio for r-min-sep sampling with any non-negative
    lower-triangular ``C``; each participation uses its full column."""
    _check_sigma(sigma)
    if r < 1:
        raise ValueError("r must be >= 1")
    return math.exp(float(_minsep_log_f(m, p, sigma, _as_rows(y, m.n), r)[0, 0]))


def log_lr(scheme: Scheme, m: StrategyMatrix, sigma: float, Y) -> np.ndarray:
    """``log P(y)/Q(y)`` (an upper bound for ``rminsep``) for each row of ``Y``."""
    _check_sigma(sigma)
    n = scheme.horizon(m.n)
    if scheme.kind == "balls_in_bins":
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        return _log_lr_bib(m, scheme.b, sigma, _as_rows(Y[:, :n], n))
    Y = _as_rows(Y, n)
    k = scheme.kind
    if k == "rminsep":
        return _minsep_log_f(m, scheme.p, sigma, Y, scheme.b)[:, 0]
    if k == "cyclic_poisson":
        return _log_lr_cyclic(m, scheme.p, sigma, Y, scheme.b)
    _require_band(m, scheme.b, k)
    if k in ("poisson", "bminsep_cold"):
        return _minsep_log_f(m, scheme.p, sigma, Y, scheme.b)[:, 0]
    if k == "bminsep_warm":
        return _warm_combine_rows(_minsep_log_f(m, scheme.p, sigma, Y, scheme.b), scheme.p, scheme.b)
    T = _multiattr_terms(m, scheme.p, scheme.k_u, sigma, Y)
    return kernels.log_recursion(T, scheme.k_u * _log1m(scheme.p), scheme.b)[:, 0]


# --------------------------------------------------------------------------
# brute force

def _enumerate_minsep(n, b, p, init_block=0):
    """All vectors reachable by the availability chain, with log-probabilities."""
    lp, lq = _log(p), _log1m(p)
    states = [((), init_block, 0.0)]
    for _ in range(n):
        nxt = []
        for xs, blocked, w in states:
            if blocked > 0:
                nxt.append((xs + (0,), blocked - 1, w))
                continue
            if lq > -math.inf:
                nxt.append((xs + (0,), 0, w + lq))
            if lp > -math.inf:
                nxt.append((xs + (1,), b - 1, w + lp))
        states = nxt
    X = np.array([s[0] for s in states], dtype=np.int64).reshape(len(states), n)
    return X, np.array([s[2] for s in states])


def _coin_matrices(n, k_u, p):
    total = n * k_u
    if total > MAX_BRUTE_COINS:
        raise ValueError(f"coin enumeration capped at n*k_u <= {MAX_BRUTE_COINS}, got {total}")
    codes = np.arange(2**total, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(total)) & 1
    coins = bits.reshape(-1, n, k_u)
    ones = bits.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(ones > 0, ones * _log(p), 0.0) + \
            np.where(total - ones > 0, (total - ones) * _log1m(p), 0.0)
    return coins, logp


def coin_counts(coins: np.ndarray, b: int, semantics: str = "availability") -> np.ndarray:
    """Per-iteration user counts from ``(rows, n, k_u)`` interim coins.

    ``availability``: coins only count while the user is not barred, and a
    positive count bars the next ``b - 1`` iterations. ``coins``: the coin-based
    exclusion rule on a single-user dataset; any coin, used or not, bars the
    next ``b - 1`` iterations.
    """
    raw = coins.sum(axis=2)
    if semantics == "availability":
        return kernels.minsep_filter(raw, b)
    if semantics == "coins":
        any_coin = raw > 0
        barred = np.zeros_like(any_coin)
        for lag in range(1, b):
            barred[:, lag:] |= any_coin[:, :-lag]
        return np.where(barred, 0, raw)
    raise ValueError(f"unknown semantics {semantics!r}")


def enumerate_participation(scheme: Scheme, n: int):
    """Every participation vector of the scheme on ``n`` iterations with its
    exact log-probability. Duplicated vectors are allowed."""
    k = scheme.kind
    p, b = scheme.p, scheme.b
    if k in ("multiattr", "multiattr_participation"):
        coins, logp = _coin_matrices(n, scheme.k_u, p)
        return coin_counts(coins, b), logp
    if n > MAX_BRUTE_N:
        raise ValueError(f"brute force is capped at n <= {MAX_BRUTE_N}, got {n}")
    if k in ("poisson", "bminsep_cold", "rminsep"):
        return _enumerate_minsep(n, b, p)
    if k == "bminsep_warm":
        Xs, Ls = [], []
        denom = math.log1p((b - 1) * p)
        for s in range(b):
            w = (0.0 if s == 0 else _log(p)) - denom
            if w == -math.inf:
                continue
            X, L = _enumerate_minsep(n, b, p, init_block=0 if s == 0 else b - s)
            Xs.append(X)
            Ls.append(L + w)
        return np.concatenate(Xs), np.concatenate(Ls)
    if k == "cyclic_poisson":
        slots = np.arange(0, n, b)
        codes = np.arange(2**slots.size)
        bits = (codes[:, None] >> np.arange(slots.size)) & 1
        X = np.zeros((codes.size, n), dtype=np.int64)
        X[:, slots] = bits
        ones = bits.sum(axis=1)
        with np.errstate(invalid="ignore"):
            L = np.where(ones > 0, ones * _log(p), 0.0) + \
                np.where(slots.size - ones > 0, (slots.size - ones) * _log1m(p), 0.0)
        return X, L
    if k == "balls_in_bins":
        X = np.zeros((b, n), dtype=np.int64)
        for o in range(b):
            X[o, o::b] = 1
        return X, np.full(b, -math.log(b))
    raise ValueError(f"no enumeration for {k!r}")


def brute_force_log_lr(scheme: Scheme, m: StrategyMatrix, sigma: float, Y) -> np.ndarray:
    _check_sigma(sigma)
    n = scheme.horizon(m.n)
    mt = truncate(m, n)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))[:, :n]
    Y = _as_rows(Y, n)
    X, logp = enumerate_participation(scheme, n)
    keep = logp > -math.inf
    X, logp = X[keep], logp[keep]
    CX = apply_rows(mt, X)
    ll = (Y @ CX.T - 0.5 * np.einsum("ij,ij->i", CX, CX)) / sigma**2
    return special.logsumexp(ll + logp, axis=1)


def brute_force_lr(scheme: Scheme, m: StrategyMatrix, sigma: float, y) -> float:
    """Exact ratio by summing over every participation vector (small n only).

    For multi-attribution the sum runs over all interim coin matrices of the
    single-user dataset under the availability rule (see :func:`coin_counts`).
    """
    return math.exp(float(brute_force_log_lr(scheme, m, sigma, y)[0]))


# --------------------------------------------------------------------------
# sampling outputs

@dataclasses.dataclass(frozen=True, eq=False)
class MechanismOutput:
    y: np.ndarray
    direction: str  # "P" or "Q"
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)
        if self.direction not in ("P", "Q"):
            raise ValueError("direction must be 'P' or 'Q'")


def sample_participation(scheme: Scheme, n: int, rng: np.random.Generator, rows: int) -> np.ndarray:
    """``(rows, horizon)`` participation vectors as seen by the accountant.

    Cyclic Poisson uses the fixed phase (iterations 1, b+1, ...) to match
    :func:`lr_cyclic_poisson`. Multi-attribution rows are user counts drawn
    from the availability rule.
    """
    k = scheme.kind
    if k in ("multiattr", "multiattr_participation"):
        draws = rng.binomial(scheme.k_u, scheme.p, size=(rows, n))
        return kernels.minsep_filter(draws, scheme.b)
    return sampling.sample_participation_vector(scheme.sampling_kind, n, scheme.b, scheme.p, rng,
                                                size=rows, fixed_phase=True)


def sample_rows(scheme: Scheme, m: StrategyMatrix, sigma: float, under: str,
                rng: np.random.Generator, rows: int) -> np.ndarray:
    n = scheme.horizon(m.n)
    if under == "P":
        X = sample_participation(scheme, m.n, rng, rows)[:, :n]
        Y = apply_rows(truncate(m, n), X)
    elif under == "Q":
        Y = np.zeros((rows, n))
    else:
        raise ValueError("under must be 'P' or 'Q'")
    Y += sigma * rng.standard_normal((rows, n))
    return Y


def sample_output(scheme: Scheme, m: StrategyMatrix, sigma: float, under: str,
                  rng: np.random.Generator) -> MechanismOutput:
    _check_sigma(sigma)
    return MechanismOutput(sample_rows(scheme, m, sigma, under, rng, 1)[0], under, float(sigma))


# --------------------------------------------------------------------------
# Monte Carlo

@dataclasses.dataclass(frozen=True)
class DeltaEstimate:
    epsilon: float
    delta_hat: float
    s: int
    std_err: float
    direction: str
    scheme: str = ""
    n: int = 0
    b: int = 0
    p: float = 0.0
    sigma: float = 0.0
    seed: int = 0

    FIELDS = ("scheme", "n", "b", "p", "sigma", "epsilon", "s", "delta_hat", "std_err",
              "direction", "seed")

    def to_record(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def to_csv(cls, estimates: Sequence["DeltaEstimate"]) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cls.FIELDS, lineterminator="\n")
        w.writeheader()
        for e in estimates:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in e.to_record().items()})
        return buf.getvalue()


def block_rows(n: int) -> int:
    """Rows per Monte Carlo block; depends on n only, never on worker count."""
    return max(1, min(4096, MC_CELLS_PER_BLOCK // max(n, 1)))


def hockey_terms(log_ratio: np.ndarray, epsilon: float, direction: str) -> np.ndarray:
    """Per-sample integrand. ``log_ratio`` is log P/Q of the drawn outputs."""
    if direction == "P_vs_Q":
        expo = epsilon - log_ratio
    elif direction == "Q_vs_P":
        expo = epsilon + log_ratio
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    return np.maximum(-np.expm1(expo), 0.0)


def _block_sums(scheme, m, sigma, epsilons, under, direction, seed, block, rows):
    g = rng_mod.substream(seed, rng_mod.MC_BLOCK, block)
    Y = sample_rows(scheme, m, sigma, under, g, rows)
    L = log_lr(scheme, m, sigma, Y)
    out = []
    for eps in epsilons:
        t = hockey_terms(L, eps, direction)
        out.append((float(t.sum()), float(np.dot(t, t))))
    return out


def estimate_delta(scheme: Scheme, m: StrategyMatrix, sigma: float, epsilon, s: int, seed: int,
                   direction: str = "P_vs_Q", workers: int = 1):
    """Monte Carlo estimate of ``H_{e^eps}`` in the requested direction.

    Samples are drawn in fixed-size blocks, block ``k`` from substream
    ``(seed, MC_BLOCK, k)``, and block sums are merged in block order, so the
    result does not depend on ``workers``. ``epsilon`` may be a sequence, in
    which case a list of estimates sharing one sample set is returned.
    """
    _check_sigma(sigma)
    if s < 1:
        raise ValueError("sample count must be >= 1")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if scheme.kind == "rminsep" and direction == "Q_vs_P":
        raise ValueError("the r-min-sep ratio is only an upper bound, which is conservative "
                         "for P_vs_Q only")
    seed = rng_mod.normalize_seed(seed)
    many = np.ndim(epsilon) > 0
    epsilons = [float(e) for e in np.atleast_1d(epsilon)]
    under = "P" if direction == "P_vs_Q" else "Q"
    n = scheme.horizon(m.n)
    per = block_rows(n)
    nblocks = -(-s // per)
    sizes = [min(per, s - k * per) for k in range(nblocks)]

    def job(k):
        return _block_sums(scheme, m, sigma, epsilons, under, direction, seed, k, sizes[k])

    if workers > 1 and nblocks > 1:
        with cf.ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(job, range(nblocks)))
    else:
        results = [job(k) for k in range(nblocks)]

    out = []
    for j, eps in enumerate(epsilons):
        tot = math.fsum(r[j][0] for r in results)
        sq = math.fsum(r[j][1] for r in results)
        mean = tot / s
        var = max(sq - s * mean * mean, 0.0) / (s - 1) if s > 1 else 0.0
        out.append(DeltaEstimate(eps, min(max(mean, 0.0), 1.0), int(s), math.sqrt(var / s),
                                 direction, scheme.label(), n, scheme.b, scheme.p, float(sigma),
                                 seed))
    return out if many else out[0]


def estimate_delta_max(scheme, m, sigma, epsilon, s, seed, workers=1):
    """Both directions on independent substreams; returns ``(max, [P_vs_Q, Q_vs_P])``."""
    dirs = DIRECTIONS if scheme.kind != "rminsep" else DIRECTIONS[:1]
    ests = [estimate_delta(scheme, m, sigma, epsilon, s, rng_mod.derive_seed(seed, i), d, workers)
            for i, d in enumerate(dirs)]
    return max(e.delta_hat for e in ests), ests


# --------------------------------------------------------------------------
# exact small-instance delta

def exact_delta_qmc(scheme: Scheme, m: StrategyMatrix, sigma: float, epsilon,
                    direction: str = "P_vs_Q", log2_points: int = 20, seed: int = 0) -> float:
    """High-resolution integral of the hockey-stick integrand for tiny ``n``.

    Integrates each mixture component of the sampled distribution with a
    scrambled Sobol point set pushed through the normal quantile, and
    evaluates the ratio with the brute-force mixture. Meant as an oracle
    for ``n`` up to about 8.
    """
    _check_sigma(sigma)
    n = scheme.horizon(m.n)
    mt = truncate(m, n)
    X, logp = enumerate_participation(scheme, n)
    keep = logp > -math.inf
    X, logp = X[keep], logp[keep]
    CX = apply_rows(mt, X)
    uniq, inv = np.unique(CX.round(14), axis=0, return_inverse=True)
    w_means = np.zeros(uniq.shape[0])
    np.add.at(w_means, inv.ravel(), np.exp(logp))
    ll_norm = 0.5 * np.einsum("ij,ij->i", uniq, uniq)
    log_w = np.log(w_means)
    sob = qmc.Sobol(d=n, scramble=True, seed=seed)
    Z = stats.norm.ppf(sob.random_base2(log2_points))

    def log_ratio(Yc):
        ll = (Yc @ uniq.T - ll_norm) / sigma**2
        return special.logsumexp(ll + log_w, axis=1)

    eps = np.atleast_1d(np.asarray(epsilon, dtype=np.float64))
    total = np.zeros(eps.size)
    if direction == "Q_vs_P":
        L = log_ratio(sigma * Z)
        total += [hockey_terms(L, e, direction).mean() for e in eps]
    else:
        for mu, w in zip(uniq, w_means):
            L = log_ratio(mu + sigma * Z)
            total += w * np.array([hockey_terms(L, e, direction).mean() for e in eps])
    return total if np.ndim(epsilon) else float(total[0])
