"""Noise calibration: the Gaussian anchor, verifier failure bounds and the
estimate-verify-release (EVR) ladder.

A ladder ``sigma_1 < ... < sigma_k`` ends at a sigma that is private by a
closed-form argument (a Gaussian mechanism that dominates the subsampled
one). Each lower rung is released only if a Monte Carlo verifier, run on
fresh randomness, reports a divergence at most ``delta'`` in both
directions. If the verifier accepts a rung whose true divergence exceeds
``delta`` with probability at most ``q``, the released mechanism is
``(eps, delta + q (1 - delta))``-DP.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special

from . import accounting, rng as rng_mod
from .strategy import StrategyMatrix, ToeplitzBanded, column_squared_norms

BOUND_KINDS = ("hoeffding", "bernstein")
MODES = ("certified", "optimistic")
DEFAULT_RATIO = 1.01
NON_PRIVATE_WARNING = ("WARNING: optimistic mode treats Monte Carlo estimates as exact; "
                       "the reported noise multiplier carries NO formal privacy guarantee.")


# --------------------------------------------------------------------------
# Gaussian mechanism

def gaussian_delta(sensitivity: float, sigma: float, epsilon: float) -> float:
    """Tight delta of the Gaussian mechanism with l2 sensitivity ``sensitivity``."""
    if sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if sensitivity == 0:
        return 0.0
    a = sensitivity / (2 * sigma)
    c = epsilon * sigma / sensitivity
    val = special.ndtr(a - c) - math.exp(epsilon + special.log_ndtr(-a - c))
    return max(float(val), 0.0)


def calibrate_gaussian_sigma(sensitivity: float, epsilon: float, delta: float,
                             rtol: float = 1e-7) -> float:
    """Smallest sigma (to relative tolerance ``rtol``) with delta(sigma) <= ``delta``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    lo = hi = float(sensitivity)
    while gaussian_delta(sensitivity, hi, epsilon) > delta:
        hi *= 2.0
    while gaussian_delta(sensitivity, lo, epsilon) <= delta:
        lo /= 2.0
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if gaussian_delta(sensitivity, mid, epsilon) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def dominating_sensitivity(m: StrategyMatrix, b: int | None = None, k_u: int = 1) -> float:
    """Norm of ``C x`` for deterministic participation in 1, b+1, 2b+1, ...

    Exact when ``C`` is Toeplitz with at most ``b`` bands (disjoint column
    supports; tail columns truncated). Otherwise a safe bound
    ``||C||_2 * sqrt(ceil(n / b))`` is returned. ``k_u`` scales the result
    for user-level counts.
    """
    if b is None:
        if not isinstance(m, ToeplitzBanded):
            raise ValueError("b is required for a general matrix")
        b = m.b
    if b < 1 or k_u < 1:
        raise ValueError("b and k_u must be >= 1")
    if isinstance(m, ToeplitzBanded) and m.b <= b:
        return k_u * math.sqrt(float(column_squared_norms(m)[::b].sum()))
    if isinstance(m, ToeplitzBanded):
        op_norm = float(m.coeffs.sum())  # Young: ||c * x|| <= ||c||_1 ||x||
    else:
        op_norm = float(np.linalg.norm(m.entries, 2))
    return k_u * op_norm * math.sqrt(math.ceil(m.n / b))


def scheme_sensitivity(scheme: accounting.Scheme, m: StrategyMatrix) -> float:
    """Dominating sensitivity for the horizon and separation of ``scheme``."""
    mt = accounting.truncate(m, scheme.horizon(m.n))
    return dominating_sensitivity(mt, scheme.b, scheme.k_u)


def calibrate_sigma_anchor(m: StrategyMatrix, epsilon: float, delta: float,
                           scheme: accounting.Scheme | None = None) -> float:
    """sigma_k: calibrated for the dominating Gaussian mechanism."""
    sens = dominating_sensitivity(m) if scheme is None else scheme_sensitivity(scheme, m)
    return calibrate_gaussian_sigma(sens, epsilon, delta)


# --------------------------------------------------------------------------
# verifier failure probability

def mc_failure_bound(delta: float, delta_prime: float, s: int, kind: str = "bernstein") -> float:
    """Bound on Pr[mean of s iid [0,1] samples <= delta'] when the true mean is > delta."""
    if not 0 < delta_prime < delta < 1:
        raise ValueError(f"need 0 < delta' < delta < 1, got delta'={delta_prime}, delta={delta}")
    if s < 1:
        raise ValueError("s must be >= 1")
    gap = delta - delta_prime
    if kind == "hoeffding":
        return math.exp(-2.0 * s * gap * gap)
    if kind == "bernstein":
        return math.exp(-s * gap * gap / (2 * delta * (1 - delta) + (2.0 / 3.0) * gap))
    raise ValueError(f"bound kind must be one of {BOUND_KINDS}")


def delta_o(delta: float, delta_prime: float, s: int, kind: str) -> float:
    return delta + mc_failure_bound(delta, delta_prime, s, kind) * (1 - delta)


def minimize_delta_o(delta_prime: float, s: int, kind: str) -> tuple[float, float]:
    """``(min_delta delta_o, argmin)`` over delta in (delta', 1)."""
    f = lambda d: delta_o(d, delta_prime, s, kind)  # noqa: E731
    gaps = np.geomspace(1e-15, (1 - delta_prime) * (1 - 1e-12), 600)
    vals = np.array([f(delta_prime + g) for g in gaps])
    k = int(np.argmin(vals))
    lo = delta_prime + gaps[max(k - 1, 0)]
    hi = delta_prime + gaps[min(k + 1, gaps.size - 1)]
    best_d, best_v = delta_prime + gaps[k], float(vals[k])
    if hi > lo:
        res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-16 + 1e-10 * lo})
        if res.fun < best_v:
            best_d, best_v = float(res.x), float(res.fun)
    return best_v, best_d


def optimize_sample_count(delta_target: float, delta_prime: float | None = None,
                          kind: str = "bernstein") -> tuple[int, float]:
    """Smallest ``s`` with ``min_delta delta_o(delta, delta', s) <= delta_target``.

    Doubles ``s`` until feasible, then bisects. Returns ``(s, delta)``.
    """
    if delta_prime is None:
        delta_prime = delta_target / 2
    if not 0 < delta_prime < delta_target < 1:
        raise ValueError("need 0 < delta' < delta_target < 1")

    def ok(s):
        return minimize_delta_o(delta_prime, s, kind)[0] <= delta_target

    s = 1
    while not ok(s):
        s *= 2
        if s > 2**62:
            raise RuntimeError("no feasible sample count")
    lo, hi = s // 2, s
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi, minimize_delta_o(delta_prime, hi, kind)[1]


# --------------------------------------------------------------------------
# EVR

@dataclasses.dataclass(frozen=True)
class NoiseLadder:
    sigmas: tuple
    ratio: float = DEFAULT_RATIO

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigmas)
        if not s:
            raise ValueError("ladder needs at least one rung")
        if any(v <= 0 for v in s) or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("ladder must be positive and strictly increasing")
        object.__setattr__(self, "sigmas", s)

    @property
    def k(self) -> int:
        return len(self.sigmas)

    @classmethod
    def geometric(cls, sigma_low: float, sigma_high: float, ratio: float = DEFAULT_RATIO
                  ) -> "NoiseLadder":
        """Rungs ``sigma_high * ratio**(i - k)``; the lowest is at most ``sigma_low``."""
        if ratio <= 1:
            raise ValueError("ratio must exceed 1")
        if sigma_low >= sigma_high:
            return cls((sigma_high,), ratio)
        steps = math.ceil(math.log(sigma_high / sigma_low) / math.log(ratio))
        return cls(tuple(sigma_high * ratio ** (i - steps) for i in range(steps + 1)), ratio)


@dataclasses.dataclass(frozen=True)
class VerifierConfig:
    epsilon: float
    delta_target: float
    delta_internal: float
    delta_prime: float
    s: int
    bound_kind: str = "bernstein"

    def __post_init__(self):
        if not 0 < self.delta_prime < self.delta_internal < 1:
            raise ValueError("need 0 < delta' < delta < 1")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.bound_kind not in BOUND_KINDS:
            raise ValueError(f"bound kind must be one of {BOUND_KINDS}")

    @property
    def q(self) -> float:
        return mc_failure_bound(self.delta_internal, self.delta_prime, self.s, self.bound_kind)

    @property
    def delta_o(self) -> float:
        return self.delta_internal + self.q * (1 - self.delta_internal)

    @classmethod
    def optimized(cls, epsilon: float, delta_target: float, kind: str = "bernstein",
                  delta_prime: float | None = None, joint: bool = False) -> "VerifierConfig":
        """Fewest samples meeting ``delta_target``; ``joint`` also searches delta'."""
        if joint and delta_prime is None:
            best = None
            for frac in np.linspace(0.05, 0.95, 19):
                s, d = optimize_sample_count(delta_target, frac * delta_target, kind)
                if best is None or s < best[0]:
                    best = (s, d, frac * delta_target)
            s, d, dp = best
            return cls(epsilon, delta_target, d, dp, s, kind)
        dp = delta_target / 2 if delta_prime is None else delta_prime
        s, d = optimize_sample_count(delta_target, dp, kind)
        return cls(epsilon, delta_target, d, dp, s, kind)

    @classmethod
    def with_samples(cls, epsilon: float, delta_target: float, s: int, kind: str = "bernstein",
                     delta_prime: float | None = None) -> "VerifierConfig":
        """Fixed ``s``; delta minimizes delta_o (which may then exceed the target)."""
        dp = delta_target / 2 if delta_prime is None else delta_prime
        _, d = minimize_delta_o(dp, s, kind)
        return cls(epsilon, delta_target, d, dp, s, kind)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.update(q=self.q, delta_o=self.delta_o)
        return out


@dataclasses.dataclass
class CalibrationResult:
    sigma_star: float
    index: int  # 1-based ladder index i*
    sigmas: list
    verdicts: list  # 1 / 0 per rung, None where the verifier was not run
    mode: str
    epsilon: float
    delta_target: float
    scheme: dict
    seed: int
    verifier: dict | None = None
    guarantee: tuple | None = None
    certified: bool = False
    estimates: list = dataclasses.field(default_factory=list)
    warning: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def select_index(verdicts: Sequence) -> int:
    """``min{i : v_j = 1 for all j >= i}`` (1-based); the last rung counts as accepted."""
    v = list(verdicts)
    if not v:
        raise ValueError("empty verdict vector")
    v[-1] = 1
    i_star = len(v)
    for j in range(len(v) - 1, 0, -1):
        if v[j - 1]:
            i_star = j
        else:
            break
    return i_star


def default_sigma_low(m: StrategyMatrix, scheme: accounting.Scheme, epsilon: float,
                      delta: float) -> float:
    """Half the sigma that makes a single participation (sensitivity ``k_u ||c_1||``) private."""
    c1 = scheme.k_u * math.sqrt(float(column_squared_norms(m)[0]))
    return 0.5 * calibrate_gaussian_sigma(c1, epsilon, delta)


def evr_calibrate(scheme: accounting.Scheme, m: StrategyMatrix, epsilon: float,
                  delta_target: float, seed: int, mode: str = "certified", *,
                  ladder: NoiseLadder | None = None, sigma_low: float | None = None,
                  ratio: float = DEFAULT_RATIO, verifier: VerifierConfig | None = None,
                  bound_kind: str = "bernstein", optimistic_samples: int = 10**6,
                  verdict_fn: Callable[[int, float], bool] | None = None,
                  evaluate_all: bool = False, pilot_samples: int | None = 2**14,
                  workers: int = 1) -> CalibrationResult:
    """Pick the smallest safe rung of the noise ladder.

    ``certified`` walks the ladder downward from ``sigma_k`` and stops at the
    first rejection; the answer equals ``select_index`` on the full verdict
    vector (set ``evaluate_all`` to fill it in anyway). Rung ``j`` uses its
    own substreams ``(seed, RUNG, j)``. ``optimistic`` bisects over ladder
    indices for the smallest rung whose estimate is at most ``delta_target``,
    using one shared substream for every rung. A pilot search with
    ``pilot_samples`` locates the answer first; full-size estimates then
    bracket and bisect around it, so the result still satisfies "accepted at
    i*, rejected at i* - 1" at the full sample count.

    ``verdict_fn(j, sigma)`` replaces the Monte Carlo verifier (testing).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    seed = rng_mod.normalize_seed(seed)
    if ladder is None:
        high = calibrate_sigma_anchor(m, epsilon, delta_target, scheme)
        low = default_sigma_low(m, scheme, epsilon, delta_target) if sigma_low is None else sigma_low
        ladder = NoiseLadder.geometric(low, high, ratio)
    k = ladder.k
    verdicts: list = [None] * k
    verdicts[-1] = 1
    estimates = []

    if mode == "certified":
        if verifier is None and verdict_fn is None:
            verifier = VerifierConfig.optimized(epsilon, delta_target, bound_kind)

        def judge(j):
            sigma = ladder.sigmas[j - 1]
            if verdict_fn is not None:
                return int(bool(verdict_fn(j, sigma)))
            worst, ests = accounting.estimate_delta_max(
                scheme, m, sigma, epsilon, verifier.s,
                rng_mod.derive_seed(seed, rng_mod.RUNG, j), workers)
            estimates.append({"rung": j, "sigma": sigma,
                              "estimates": [e.to_record() for e in ests]})
            return int(worst <= verifier.delta_prime)

        for j in range(k - 1, 0, -1):
            verdicts[j - 1] = judge(j)
            if not verdicts[j - 1] and not evaluate_all:
                break
        i_star = _trailing_ones(verdicts)
        certified = scheme.certified and verdict_fn is None
        vdict = verifier.to_dict() if verifier is not None else None
        guarantee = (float(epsilon), verifier.delta_o) if certified else None
        warning = "" if scheme.certified else (
            "WARNING: this sampler's accounting is conjectural; the result is not certified.")
    else:
        s = int(optimistic_samples)
        crn = rng_mod.derive_seed(seed, rng_mod.SEARCH)

        def probe(j, samples, stream, record):
            if j == k:
                return True
            sigma = ladder.sigmas[j - 1]
            if verdict_fn is not None:
                ok = bool(verdict_fn(j, sigma))
            else:
                worst, ests = accounting.estimate_delta_max(scheme, m, sigma, epsilon, samples,
                                                            stream, workers)
                if record:
                    estimates.append({"rung": j, "sigma": sigma,
                                      "estimates": [e.to_record() for e in ests]})
                ok = worst <= delta_target
            if record:
                verdicts[j - 1] = int(ok)
            return ok

        cache = {}

        def accept(j):
            if j not in cache:
                cache[j] = probe(j, s, crn, True)
            return cache[j]

        lo, hi = 0, k
        use_pilot = verdict_fn is None and pilot_samples and pilot_samples < s and k > 8
        if use_pilot:
            # cheap bisection first, then bracket its answer at full sample count
            pilot = rng_mod.derive_seed(seed, rng_mod.SEARCH, 1)
            hi = _bisect(0, k, lambda j: probe(j, pilot_samples, pilot, False))
            step = 1
            while hi < k and not accept(hi):
                lo, hi = hi, min(k, hi + step)
                step *= 2
            step = 1
            while lo == 0 and hi > 1:
                cand = max(hi - step, 1)
                if accept(cand):
                    hi = cand
                    step *= 2
                else:
                    lo = cand
                if cand == 1:
                    break
        i_star = _bisect(lo, hi, accept)
        certified, guarantee, vdict = False, None, {"s": s}
        warning = NON_PRIVATE_WARNING

    estimates.sort(key=lambda r: r["rung"])
    return CalibrationResult(
        sigma_star=ladder.sigmas[i_star - 1], index=i_star, sigmas=list(ladder.sigmas),
        verdicts=verdicts, mode=mode, epsilon=float(epsilon), delta_target=float(delta_target),
        scheme=scheme.to_dict(), seed=seed, verifier=vdict, guarantee=guarantee,
        certified=certified, estimates=estimates, warning=warning)


def _bisect(lo: int, hi: int, accept) -> int:
    """Smallest index in (lo, hi] accepted, given hi accepted and lo rejected (or 0)."""
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if accept(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _trailing_ones(verdicts) -> int:
    i_star = len(verdicts)
    for j in range(len(verdicts) - 1, 0, -1):
        if verdicts[j - 1] == 1:
            i_star = j
        else:
            break
    return i_star
