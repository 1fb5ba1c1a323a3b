"""Strategy matrices for the banded matrix mechanism.

Two concrete types: :class:`ToeplitzBanded` (a lower-triangular Toeplitz
matrix stored as its ``b`` first-column band values) and
:class:`GeneralLowerTriangular` (dense, for non-banded strategies). Both are
immutable; every operation here is a pure function.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np
from scipy import linalg, signal

from . import kernels

MAX_DENSE_N = 2**16


class CoefficientFileError(ValueError):
    """The coefficient file could not be parsed."""


class NegativeCoefficientError(ValueError):
    """A band coefficient is negative."""


class ZeroLeadingCoefficientError(ValueError):
    """The diagonal coefficient is not positive, so C is not invertible."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True, eq=False)
class ToeplitzBanded:
    """``n x n`` lower-triangular Toeplitz matrix with ``b`` nonzero bands.

    ``coeffs[k]`` is the value on the k-th subdiagonal (``coeffs[0]`` is the
    diagonal).
    """

    n: int
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.atleast_1d(np.asarray(self.coeffs, dtype=np.float64))
        if coeffs.ndim != 1 or coeffs.size == 0:
            raise ValueError("coeffs must be a non-empty vector")
        if int(self.n) < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if coeffs.size > int(self.n):
            raise ValueError(f"band count {coeffs.size} exceeds n={self.n}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coeffs must be finite")
        if np.any(coeffs < 0):
            raise NegativeCoefficientError(
                f"coefficients must be non-negative, got min {coeffs.min()}")
        if coeffs[0] <= 0:
            raise ZeroLeadingCoefficientError(
                "leading coefficient must be positive for C to be invertible")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "coeffs", _frozen(coeffs))

    @property
    def b(self) -> int:
        return int(self.coeffs.size)

    def padded(self, width: int) -> np.ndarray:
        """Band values right-padded with zeros to ``width`` entries."""
        out = np.zeros(max(width, self.b))
        out[: self.b] = self.coeffs
        return out[:width]

    def to_dense(self) -> np.ndarray:
        col = np.zeros(self.n)
        col[: self.b] = self.coeffs
        return linalg.toeplitz(col, np.zeros(self.n))

    def __repr__(self):
        return f"ToeplitzBanded(n={self.n}, b={self.b}, coeffs={self.coeffs.tolist()!r})"


@dataclasses.dataclass(frozen=True, eq=False)
class GeneralLowerTriangular:
    """Dense lower-triangular, entry-wise non-negative strategy matrix."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("entries must be a square matrix")
        if a.shape[0] > MAX_DENSE_N:
            raise ValueError(f"dense matrices are capped at n={MAX_DENSE_N}")
        if np.any(np.triu(a, 1) != 0):
            raise ValueError("entries must be lower triangular")
        if np.any(a < 0):
            raise NegativeCoefficientError("entries must be non-negative")
        if np.any(np.diag(a) <= 0):
            raise ZeroLeadingCoefficientError("diagonal must be positive")
        object.__setattr__(self, "entries", _frozen(a))

    @property
    def n(self) -> int:
        return int(self.entries.shape[0])

    def to_dense(self) -> np.ndarray:
        return np.array(self.entries)

    @classmethod
    def from_banded_inverse(cls, band, n: int) -> "GeneralLowerTriangular":
        """Dense C whose inverse is the lower-triangular Toeplitz ``band``."""
        col = np.zeros(n)
        band = np.asarray(band, dtype=np.float64)[:n]
        col[: band.size] = band
        inv = linalg.toeplitz(col, np.zeros(n))
        c = linalg.solve_triangular(inv, np.eye(n), lower=True)
        c[np.abs(c) < 1e-300] = 0.0
        return cls(np.tril(c))


StrategyMatrix = ToeplitzBanded | GeneralLowerTriangular


def identity(n: int) -> ToeplitzBanded:
    return ToeplitzBanded(n, [1.0])


def bsr_coefficients(b: int) -> np.ndarray:
    """First ``b`` Taylor coefficients of ``(1 - x) ** -0.5``.

    These are the bands of the lower-triangular Toeplitz square root of the
    all-ones lower-triangular matrix.
    """
    if int(b) < 1:
        raise ValueError(f"band count must be >= 1, got {b}")
    c = np.empty(int(b))
    c[0] = 1.0
    for k in range(1, int(b)):
        c[k] = c[k - 1] * (2 * k - 1) / (2 * k)
    return c


def bsr(n: int, b: int) -> ToeplitzBanded:
    return ToeplitzBanded(n, bsr_coefficients(min(b, n)))


# --------------------------------------------------------------------------
# coefficient files
#
#   # optional comment lines
#   n <int>
#   b <int>
#   <b whitespace-separated decimals>

def save_coefficients(m: ToeplitzBanded, path) -> None:
    lines = [f"n {m.n}", f"b {m.b}", " ".join(repr(float(c)) for c in m.coeffs)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_coefficients(path) -> ToeplitzBanded:
    """Read a banded Toeplitz strategy from a coefficient file.

    Raises :class:`CoefficientFileError` on malformed content,
    :class:`NegativeCoefficientError` and :class:`ZeroLeadingCoefficientError`
    on invariant violations.
    """
    if not os.path.exists(path):
        raise CoefficientFileError(f"no such coefficient file: {path}")
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    header = {}
    i = 0
    while i < len(tokens) and tokens[i] in ("n", "b"):
        if i + 1 >= len(tokens):
            raise CoefficientFileError(f"missing value for header field {tokens[i]!r}")
        try:
            header[tokens[i]] = int(tokens[i + 1])
        except ValueError:
            raise CoefficientFileError(
                f"header field {tokens[i]!r} is not an integer: {tokens[i + 1]!r}") from None
        i += 2
    if set(header) != {"n", "b"}:
        raise CoefficientFileError("header must define both n and b")
    try:
        coeffs = [float(t) for t in tokens[i:]]
    except ValueError as exc:
        raise CoefficientFileError(f"bad coefficient value: {exc}") from None
    if len(coeffs) != header["b"]:
        raise CoefficientFileError(
            f"header declares b={header['b']} but file has {len(coeffs)} coefficients")
    if header["b"] < 1 or header["n"] < header["b"]:
        raise CoefficientFileError(f"need 1 <= b <= n, got n={header['n']}, b={header['b']}")
    if any(not math.isfinite(c) for c in coeffs):
        raise CoefficientFileError("coefficients must be finite")
    return ToeplitzBanded(header["n"], coeffs)


# --------------------------------------------------------------------------
# derived quantities

def column_squared_norms(m: StrategyMatrix) -> np.ndarray:
    """Squared l2 norm of every column; tail columns of a banded matrix are
    truncated at row n."""
    if isinstance(m, ToeplitzBanded):
        csum = np.cumsum(m.coeffs**2)
        lengths = np.minimum(m.b, m.n - np.arange(m.n))
        return csum[lengths - 1]
    return np.einsum("ij,ij->j", m.entries, m.entries)


def apply(m: StrategyMatrix, x) -> np.ndarray:
    """Exact ``C @ x``; sparse in x for the banded type."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.n,):
        raise ValueError(f"expected vector of length {m.n}, got shape {x.shape}")
    if isinstance(m, GeneralLowerTriangular):
        return m.entries @ x
    out = np.zeros(m.n)
    for j in np.flatnonzero(x):
        k = min(m.b, m.n - j)
        out[j: j + k] += x[j] * m.coeffs[:k]
    return out


def apply_inverse(m: StrategyMatrix, y) -> np.ndarray:
    """``C^{-1} y`` by forward substitution (columnwise for a 2-D ``y``)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != m.n:
        raise ValueError(f"expected leading dimension {m.n}, got shape {y.shape}")
    if isinstance(m, GeneralLowerTriangular):
        return linalg.solve_triangular(m.entries, y, lower=True)
    # the banded recurrence is an all-pole filter with denominator = coeffs
    return signal.lfilter([1.0], m.coeffs, y, axis=0)


def inverse_first_column(m: ToeplitzBanded) -> np.ndarray:
    e1 = np.zeros(m.n)
    e1[0] = 1.0
    return apply_inverse(m, e1)


def prefix_sum_mse(m: StrategyMatrix, sigma: float) -> float:
    """``||A C^{-1}||_F^2 * sigma^2`` with A the all-ones lower triangle."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if isinstance(m, ToeplitzBanded):
        # A C^{-1} is lower-triangular Toeplitz with first column cumsum(h)
        g = np.cumsum(inverse_first_column(m))
        frob = float(np.dot(np.arange(m.n, 0, -1), g**2))
    else:
        cinv = apply_inverse(m, np.eye(m.n))
        frob = float(np.sum(np.cumsum(cinv, axis=0) ** 2))
    return frob * float(sigma) ** 2


def fft_threshold(n: int) -> float:
    return math.log2(max(n, 2))


def sliding_dot_products(coeffs, y, method: str = "auto", threshold: float | None = None):
    """``out[..., i] = <coeffs, (y_i, ..., y_{i+b-1})>`` with zero padding past n.

    ``y`` may be a vector or a ``(rows, n)`` batch. ``method`` is ``"naive"``,
    ``"fft"`` or ``"auto"`` (FFT once ``b`` exceeds ``threshold``, default
    ``log2(n)``).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1]
    if coeffs.size > n:
        raise ValueError(f"band length {coeffs.size} exceeds n={n}")
    if method == "auto":
        limit = fft_threshold(n) if threshold is None else threshold
        method = "fft" if coeffs.size > limit else "naive"
    if method == "naive":
        out = kernels.sliding_dots_naive(coeffs, y.reshape(-1, n))
    elif method == "fft":
        y2 = y.reshape(-1, n)
        full = signal.fftconvolve(y2, coeffs[::-1][None, :], mode="full", axes=1)
        out = full[:, coeffs.size - 1: coeffs.size - 1 + n]
    else:
        raise ValueError(f"unknown method {method!r}")
    return out.reshape(y.shape)
