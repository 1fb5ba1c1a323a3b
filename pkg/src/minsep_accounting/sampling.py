"""Batch schedules and single-example participation vectors.

Supported schemes: Poisson, cyclic Poisson, balls-in-bins, and cold/warm
b-min-sep subsampling. Examples participate independently of one another
under all of them, so a schedule over ``m`` examples is just ``m``
independent participation rows; row ``j`` is drawn from the substream
``(seed, EXAMPLE, j)``. This makes schedules reproducible and independent of
the order in which examples are generated.

Every row consumes uniforms the same way: ``u[0]`` fixes the initial
state/phase/offset and ``u[1:]`` drive the per-iteration coins. Sharing a seed
therefore couples schemes; warm b-min-sep with ``p = 1`` and balls-in-bins
with ``T = b`` produce identical schedules.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from . import kernels, rng as rng_mod

SCHEMES = ("poisson", "cyclic_poisson", "balls_in_bins", "bminsep_cold", "bminsep_warm")


@dataclasses.dataclass(frozen=True)
class SamplingConfig:
    """Parameters of a schedule sampler.

    ``p`` is the per-iteration inclusion probability actually used by the
    sampler (for cyclic Poisson that is the within-partition probability
    ``b * p0``). For balls-in-bins ``b`` is the epoch length ``T`` and ``p``
    is ignored.
    """

    scheme: str
    n: int
    b: int
    p: float
    m: int
    seed: int
    fixed_phase: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 1 <= self.b <= self.n:
            raise ValueError(f"need 1 <= b <= n, got b={self.b}, n={self.n}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.m < 1:
            raise ValueError("dataset size must be positive")
        object.__setattr__(self, "seed", rng_mod.normalize_seed(self.seed))

    @property
    def schedule_length(self) -> int:
        if self.scheme == "balls_in_bins":
            return (self.n // self.b) * self.b
        return self.n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class BatchSchedule:
    batches: list
    config: SamplingConfig | None = None

    @property
    def n(self) -> int:
        return len(self.batches)

    def to_jsonl(self) -> str:
        lines = []
        for i, batch in enumerate(self.batches):
            rec = {"iteration": i + 1, "examples": [int(e) for e in batch]}
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "BatchSchedule":
        batches = []
        with open(path) as fh:
            for expected, line in enumerate(filter(str.strip, fh), start=1):
                rec = json.loads(line)
                if rec["iteration"] != expected:
                    raise ValueError(f"out-of-order record at iteration {rec['iteration']}")
                batches.append(np.asarray(rec["examples"], dtype=np.int64))
        return cls(batches)


# --------------------------------------------------------------------------
# rates

def convert_rate(p0: float, b: int) -> float:
    """Per-iteration probability giving average participation rate ``p0``."""
    if b < 1:
        raise ValueError("b must be >= 1")
    if not 0 < p0 <= 1.0 / b * (1 + 1e-12):
        raise ValueError(f"average rate p0={p0} infeasible for min-sep b={b}: need 0 < p0 <= 1/b")
    return min(1.0, p0 / (1.0 - p0 * (b - 1)))


def average_rate(p: float, b: int) -> float:
    """Inverse of :func:`convert_rate`."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    return p / (1.0 + p * (b - 1))


def stationary_available_probability(p: float, b: int) -> float:
    return 1.0 / (1.0 + (b - 1) * p)


def config_for_rate(scheme: str, n: int, b: int, p0: float, m: int, seed: int, **kw) -> SamplingConfig:
    """Build a config whose expected batch size is ``m * p0``."""
    if scheme == "poisson":
        p = p0
    elif scheme == "cyclic_poisson":
        if b * p0 > 1 + 1e-12:
            raise ValueError(f"cyclic Poisson needs b * p0 <= 1, got {b * p0}")
        p = min(1.0, b * p0)
    elif scheme == "balls_in_bins":
        p = 1.0
    else:
        p = convert_rate(p0, b)
    return SamplingConfig(scheme, n, b, p, m, seed, **kw)


# --------------------------------------------------------------------------
# participation rows

def _initial_block(u0, p, b):
    """Warm-start barred-iteration count from the first uniform of each row."""
    if b == 1:
        return np.zeros(u0.shape, dtype=np.int64)
    pi0 = stationary_available_probability(p, b)
    busy = u0 >= pi0
    frac = np.where(busy, (u0 - pi0) / max(1.0 - pi0, 1e-300), 0.0)
    state = np.minimum(1 + np.floor(frac * (b - 1)).astype(np.int64), b - 1)
    # state s: participated in virtual iteration 1 - s, barred for b - s more
    return np.where(busy, b - state, 0).astype(np.int64)


def rows_from_uniforms(scheme: str, n: int, b: int, p: float, U: np.ndarray,
                       fixed_phase: bool = False) -> np.ndarray:
    """Map a ``(rows, n + 1)`` uniform matrix to participation rows."""
    U = np.atleast_2d(U)
    rows = U.shape[0]
    u0, coins_u = U[:, 0], U[:, 1: n + 1]
    if scheme == "poisson":
        return (coins_u < p).astype(np.int64)
    if scheme == "bminsep_cold":
        return kernels.minsep_filter(coins_u < p, b)
    if scheme == "bminsep_warm":
        return kernels.minsep_filter(coins_u < p, b, _initial_block(u0, p, b))
    it = np.arange(n)
    if scheme == "cyclic_poisson":
        phase = np.zeros(rows, dtype=np.int64) if fixed_phase else \
            np.minimum(np.floor(u0 * b).astype(np.int64), b - 1)
        eligible = (it[None, :] % b) == phase[:, None]
        return (eligible & (coins_u < p)).astype(np.int64)
    if scheme == "balls_in_bins":
        n_eff = (n // b) * b
        # same map as the warm start at p = 1: offset = barred iterations
        offset = _initial_block(u0, 1.0, b)
        x = ((it[None, :] % b) == offset[:, None]).astype(np.int64)
        x[:, n_eff:] = 0
        return x[:, :n_eff]
    raise ValueError(f"unknown scheme {scheme!r}")


def sample_participation_vector(scheme: str, n: int, b: int, p: float, rng: np.random.Generator,
                                size: int | None = None, fixed_phase: bool = False) -> np.ndarray:
    """Single-example participation vector(s); ``size`` rows when given."""
    rows = 1 if size is None else int(size)
    U = rng.random((rows, n + 1))
    x = rows_from_uniforms(scheme, n, b, p, U, fixed_phase=fixed_phase)
    return x[0] if size is None else x


def _example_rows(config: SamplingConfig) -> np.ndarray:
    n = config.n
    U = np.empty((config.m, n + 1))
    for j in range(config.m):
        U[j] = rng_mod.substream(config.seed, rng_mod.EXAMPLE, j).random(n + 1)
    return rows_from_uniforms(config.scheme, n, config.b, config.p, U, config.fixed_phase)


def schedule_from_rows(X: np.ndarray, config: SamplingConfig | None = None) -> BatchSchedule:
    X = np.asarray(X)
    batches = [np.flatnonzero(X[:, i]).astype(np.int64) for i in range(X.shape[1])]
    return BatchSchedule(batches, config)


def _require(config: SamplingConfig, scheme: str):
    if config.scheme != scheme:
        raise ValueError(f"config scheme is {config.scheme!r}, expected {scheme!r}")


def sample_schedule(config: SamplingConfig) -> BatchSchedule:
    return schedule_from_rows(_example_rows(config), config)


def sample_poisson(config: SamplingConfig) -> BatchSchedule:
    _require(config, "poisson")
    return sample_schedule(config)


def sample_bminsep_cold(config: SamplingConfig) -> BatchSchedule:
    """Every iteration Poisson-samples the examples not used in the last b - 1 batches."""
    _require(config, "bminsep_cold")
    return sample_schedule(config)


def sample_bminsep_warm(config: SamplingConfig) -> BatchSchedule:
    """Like the cold start, but each example begins in the stationary state
    of its availability chain (a virtual history that is never emitted)."""
    _require(config, "bminsep_warm")
    return sample_schedule(config)


def sample_cyclic_poisson(config: SamplingConfig) -> BatchSchedule:
    _require(config, "cyclic_poisson")
    return sample_schedule(config)


def sample_balls_in_bins(config: SamplingConfig) -> BatchSchedule:
    """One uniform offset per example, repeated every ``T = config.b``
    iterations; a trailing partial epoch is dropped."""
    _require(config, "balls_in_bins")
    return sample_schedule(config)


# --------------------------------------------------------------------------
# statistics

@dataclasses.dataclass
class ScheduleStats:
    batch_sizes: np.ndarray
    example_counts: np.ndarray
    violations: list  # (example, earlier iteration, later iteration), 1-based
    min_sep: int

    @property
    def mean_batch_size(self) -> float:
        return float(self.batch_sizes.mean()) if self.batch_sizes.size else 0.0


def schedule_stats(s: BatchSchedule, m: int | None = None, min_sep: int | None = None) -> ScheduleStats:
    """Exact per-iteration sizes, per-example counts and min-sep violations.

    ``min_sep`` defaults to the config's ``b`` for schemes that promise a
    separation (everything except Poisson) and 1 otherwise.
    """
    cfg = s.config
    if m is None:
        m = cfg.m if cfg is not None else (
            1 + max((int(bt.max()) for bt in s.batches if len(bt)), default=-1))
    if min_sep is None:
        min_sep = 1 if cfg is None or cfg.scheme == "poisson" else cfg.b
    sizes = np.array([len(bt) for bt in s.batches], dtype=np.int64)
    counts = np.zeros(m, dtype=np.int64)
    last = np.full(m, -(10**18), dtype=np.int64)
    violations = []
    for i, bt in enumerate(s.batches):
        bt = np.asarray(bt, dtype=np.int64)
        counts[bt] += 1
        close = bt[i - last[bt] < min_sep]
        for e in close:
            violations.append((int(e), int(last[e]) + 1, i + 1))
        last[bt] = i
    return ScheduleStats(sizes, counts, violations, int(min_sep))


def gaps_between_participations(x: np.ndarray) -> np.ndarray:
    """Gaps between consecutive 1-entries of every row, concatenated."""
    x = np.atleast_2d(x)
    out = []
    for row in x:
        idx = np.flatnonzero(row)
        if idx.size > 1:
            out.append(np.diff(idx))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def expected_variance_cyclic(n: int, b: int, p0: float) -> float:
    return n * p0 * (1 - b * p0)


def expected_variance_bminsep(n: int, b: int, p0: float) -> float:
    return expected_variance_cyclic(n, b, p0) * (1 - p0 * (b - 1))


def mean_return_time(p: float, b: int) -> float:
    return (b - 1) + 1.0 / p if p > 0 else math.inf
