"""Statistical checks of the samplers against closed-form targets.

Each check simulates single-example participation rows in fixed-size chunks
(chunk ``k`` drawn from substream ``(seed, k)``) and compares a statistic to
its closed form with a z-score.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import rng as rng_mod, sampling

Z_LIMIT = 3.0
CHUNK_CELLS = 2**22


@dataclasses.dataclass(frozen=True)
class CheckResult:
    check: str
    statistic: float
    expected: float
    std_err: float
    z: float
    passed: bool
    trials: int
    detail: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _rows_in_chunks(scheme, n, b, p, trials, seed, fixed_phase=False):
    per = max(1, CHUNK_CELLS // (n + 1))
    done = 0
    k = 0
    while done < trials:
        rows = min(per, trials - done)
        g = rng_mod.substream(seed, k)
        yield sampling.sample_participation_vector(scheme, n, b, p, g, size=rows,
                                                   fixed_phase=fixed_phase)
        done += rows
        k += 1


def _z(stat, expected, se):
    if se == 0:
        return 0.0 if stat == expected else math.copysign(math.inf, stat - expected)
    return float((stat - expected) / se)


def _variance_check(name, scheme, n, b, p, expected, trials, seed):
    counts = np.concatenate([x.sum(axis=1) for x in _rows_in_chunks(scheme, n, b, p, trials, seed)])
    counts = counts.astype(np.float64)
    dev2 = (counts - counts.mean()) ** 2
    var = float(dev2.sum() / (trials - 1))
    se = float(dev2.std(ddof=1) / math.sqrt(trials))
    z = _z(var, expected, se)
    return CheckResult(name, var, expected, se, z, abs(z) <= Z_LIMIT, trials)


def variance_cyclic(n, b, p0, trials, seed, p_scale=1.0) -> CheckResult:
    """Participation-count variance of random-phase cyclic Poisson."""
    p = min(1.0, b * p0 * p_scale)
    return _variance_check("variance_cyclic", "cyclic_poisson", n, b, p,
                           sampling.expected_variance_cyclic(n, b, p0), trials, seed)


def variance_bminsep(n, b, p0, trials, seed, p_scale=1.0) -> CheckResult:
    """Participation-count variance of warm-start b-min-sep."""
    p = min(1.0, sampling.convert_rate(p0, b) * p_scale)
    return _variance_check("variance_bminsep", "bminsep_warm", n, b, p,
                           sampling.expected_variance_bminsep(n, b, p0), trials, seed)


def marginal_mixture(scheme, n, b, p0, trials, seed, p_scale=1.0, coord=None) -> list:
    """``Pr[(Cx)_i = c_j] = p0`` for every offset ``j < b`` at one coordinate ``i >= b``.

    For 0/1 rows with minimum separation ``b`` and a ``b``-banded C, the
    event ``(Cx)_i = c_j`` is exactly ``x_{i-j} = 1``, which is what is
    counted (this avoids comparing floats and holds even with repeated
    band values).
    """
    if scheme == "cyclic_poisson":
        p = min(1.0, b * p0 * p_scale)
    else:
        p = min(1.0, sampling.convert_rate(p0, b) * p_scale)
    i = n - 1 if coord is None else int(coord)
    if i < b - 1:
        raise ValueError("coordinate must satisfy i >= b (1-based)")
    hits = np.zeros(b, dtype=np.int64)
    for x in _rows_in_chunks(scheme, n, b, p, trials, seed):
        hits += x[:, i - np.arange(b)].sum(axis=0)
    se = math.sqrt(p0 * (1 - p0) / trials)
    out = []
    for j in range(b):
        ph = hits[j] / trials
        z = _z(ph, p0, se)
        out.append(CheckResult(f"marginal_{scheme}_j{j}", float(ph), p0, se, z,
                               abs(z) <= Z_LIMIT, trials, f"coordinate {i + 1}"))
    return out


def _eligible_counts(x, b):
    """Returns (returns, eligible slots) after each row's first participation.

    A slot is eligible when none of the ``b - 1`` slots before it holds a
    participation; under warm b-min-sep each eligible slot participates
    independently with probability ``p``.
    """
    x = x.astype(np.int64)
    n = x.shape[1]
    csum = np.concatenate([np.zeros((x.shape[0], 1), np.int64), np.cumsum(x, axis=1)], axis=1)
    lo = np.maximum(np.arange(n) - (b - 1), 0)
    recent = csum[:, np.arange(n)] - csum[:, lo]
    started = csum[:, :n] > 0  # strictly after the first participation
    eligible = (recent == 0) & started
    return int(np.sum(x * started)), int(np.sum(eligible))


def mean_return_time(n, b, p0, trials, seed, p_scale=1.0, rel_tol=0.01) -> CheckResult:
    """Mean gap between participations against ``(b - 1) + 1/p`` (relative tolerance).

    Averaging only the gaps that close inside the window under-weights long
    gaps (they are more often cut off by the horizon), which biases the raw
    mean low by O(1/n). Instead the censored tail is kept: the per-slot
    return rate is estimated over all eligible slots and mapped back to a
    mean gap.
    """
    p_nom = sampling.convert_rate(p0, b)
    p = min(1.0, p_nom * p_scale)
    hits = slots = 0
    for x in _rows_in_chunks("bminsep_warm", n, b, p, trials, seed):
        h, s = _eligible_counts(x, b)
        hits += h
        slots += s
    expected = sampling.mean_return_time(p_nom, b)
    if hits < 2:
        return CheckResult("mean_return_time", math.nan, expected, math.nan, math.nan, False,
                           trials, "too few returns")
    rate = hits / slots
    mean = (b - 1) + 1 / rate
    se = math.sqrt(rate * (1 - rate) / slots) / rate**2
    return CheckResult("mean_return_time", mean, expected, se, _z(mean, expected, se),
                       abs(mean / expected - 1) <= rel_tol, trials,
                       f"{hits} returns over {slots} eligible slots")


def min_separation(n, b, p0, trials, seed) -> CheckResult:
    """Smallest observed gap under cold and warm b-min-sep must be >= b."""
    p = sampling.convert_rate(p0, b)
    smallest = math.inf
    for scheme in ("bminsep_cold", "bminsep_warm"):
        for x in _rows_in_chunks(scheme, n, b, p, trials, rng_mod.derive_seed(seed, len(scheme))):
            g = sampling.gaps_between_participations(x)
            if g.size:
                smallest = min(smallest, int(g.min()))
    stat = float(smallest) if smallest != math.inf else float(n)
    return CheckResult("min_separation", stat, float(b), 0.0, 0.0, stat >= b, trials,
                       "smallest gap over cold and warm rows")


def balls_in_bins_epochs(n, T, trials, seed) -> CheckResult:
    """Every row participates exactly once per length-T epoch."""
    bad = 0
    for x in _rows_in_chunks("balls_in_bins", n, T, 1.0, trials, seed):
        per_epoch = x.reshape(x.shape[0], -1, T).sum(axis=2)
        bad += int(np.count_nonzero(per_epoch != 1))
    return CheckResult("balls_in_bins_epochs", float(bad), 0.0, 0.0, 0.0, bad == 0, trials,
                       "epochs with participation count != 1")


def _worst(name, results) -> CheckResult:
    w = max(results, key=lambda r: abs(r.z))
    return CheckResult(name, w.statistic, w.expected, w.std_err, w.z,
                       all(r.passed for r in results), w.trials,
                       f"worst of {len(results)} offsets: {w.check}")


CHECKS = ("variance_cyclic", "variance_bminsep", "marginal_bminsep_warm", "marginal_cyclic_poisson",
          "mean_return_time", "min_separation", "balls_in_bins_epochs")


def run_all(n, b, p0, trials, seed, p_scale=1.0) -> list:
    """One result per entry of :data:`CHECKS` for an (n, b, p0) cell."""
    s = lambda i: rng_mod.derive_seed(seed, i)  # noqa: E731
    out = [variance_cyclic(n, b, p0, trials, s(0), p_scale),
           variance_bminsep(n, b, p0, trials, s(1), p_scale)]
    for k, scheme in ((2, "bminsep_warm"), (3, "cyclic_poisson")):
        out.append(_worst(f"marginal_{scheme}",
                          marginal_mixture(scheme, n, b, p0, trials, s(k), p_scale)))
    out.append(mean_return_time(n, b, p0, trials, s(4), p_scale))
    out.append(min_separation(n, b, p0, min(trials, 1000), s(5)))
    out.append(balls_in_bins_epochs(n, b, min(trials, 1000), s(6)))
    return out
