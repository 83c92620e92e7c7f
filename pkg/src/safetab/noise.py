"""Integer-valued noise distributions with exact samplers.

Both distributions are sampled with the rejection construction for discrete
Gaussians and discrete Laplaces built on Bernoulli(exp(-x)) coins. Every coin
is decided with integer comparisons against uniform integers, so no sample
ever depends on floating-point rounding. The CDF / inverse-CDF helpers are
numerical (float) and are meant for planning and postprocessing, never for
sampling.

``RandomSource`` wraps a PCG64 stream keyed by ``(seed, stream_id)``. It is a
reproducible, non-cryptographic generator; a production deployment would need
a CSPRNG behind the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from math import isqrt
from statistics import NormalDist
from typing import Union

import numpy as np

Rational = Union[int, Fraction, str, float]

# int64 fast path limits. Above these the scalar Python-int path is used.
_MAX_VECTOR_DENOMINATOR = 1 << 40
_MAX_VECTOR_OFFSET = 1 << 31
_STD_NORMAL = NormalDist()


def to_fraction(value: Rational) -> Fraction:
    """Converts a number to an exact ``Fraction``.

    Floats go through their shortest decimal repr, so ``0.159`` becomes
    ``159/1000`` rather than the nearest binary fraction.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"expected a finite number, got {value}")
        return Fraction(repr(value))
    if isinstance(value, str):
        return Fraction(value.strip())
    raise TypeError(f"cannot convert {type(value).__name__} to Fraction")


class RandomSource:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Distinct stream ids give statistically independent PCG64 streams (they
    are separate ``SeedSequence`` spawn keys), which is what lets population
    groups be tabulated in any order or concurrently without correlating
    their noise.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream_id={self.stream_id})"

    def spawn(self, stream_id: int) -> "RandomSource":
        """Returns the independent stream ``stream_id`` under the same seed."""
        return RandomSource(self.seed, stream_id)

    def randbelow(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` for arbitrarily large ``n``."""
        if n <= 0:
            raise ValueError(f"expected a positive bound, got {n}")
        if n < (1 << 62):
            return int(self.generator.integers(n))
        k = n.bit_length()
        words = (k + 63) // 64
        while True:
            raw = 0
            for w in self.generator.bit_generator.random_raw(words):
                raw = (raw << 64) | int(w)
            raw >>= words * 64 - k
            if raw < n:
                return raw

    def draw(self, dist: "DiscreteGaussian | TwoSidedGeometric", size: int) -> np.ndarray:
        """Draws ``size`` iid samples from ``dist`` as an int64 array."""
        return dist.sample_array(size, self)


# ---------------------------------------------------------------------------
# Scalar exact coins (Python ints, unbounded precision)


def _bern_exp1(num: int, den: int, rng: RandomSource) -> bool:
    # Bernoulli(exp(-num/den)) for 0 <= num <= den.
    k = 1
    while rng.randbelow(den * k) < num:
        k += 1
    return bool(k & 1)


def _bern_exp(num: int, den: int, rng: RandomSource) -> bool:
    while num > den:
        if not _bern_exp1(1, 1, rng):
            return False
        num -= den
    return _bern_exp1(num, den, rng)


def _geometric_exp1(rng: RandomSource) -> int:
    # Geometric with failure probability exp(-1): counts Bernoulli(exp(-1)) successes.
    k = 0
    while _bern_exp1(1, 1, rng):
        k += 1
    return k


def _discrete_laplace_scalar(num: int, den: int, rng: RandomSource) -> int:
    # pmf proportional to exp(-|x| * num / den).
    while True:
        while True:
            u = rng.randbelow(den)
            if _bern_exp(u, den, rng):
                break
        v = _geometric_exp1(rng)
        magnitude = (v * den + u) // num
        negative = rng.randbelow(2) == 1
        if negative and magnitude == 0:
            continue
        return -magnitude if negative else magnitude


def _dgauss_scalar(num: int, den: int, t: int, rng: RandomSource) -> int:
    # sigma^2 = num/den, Laplace proposal with integer scale t = floor(sigma) + 1.
    qd = 2 * den * t * t * num
    while True:
        y = _discrete_laplace_scalar(1, t, rng)
        a = abs(y) * den * t - num
        if _bern_exp(a * a, qd, rng):
            return y


# ---------------------------------------------------------------------------
# Vectorised exact coins (int64, same algorithms)


def _bern_exp1_vec(num: np.ndarray, den: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    n = num.shape[0]
    k = np.ones(n, dtype=np.int64)
    idx = np.arange(n)
    while idx.size:
        high = den[idx] * k[idx]
        if high.size and int(high.max()) >= (1 << 62):
            raise OverflowError("Bernoulli-exp loop exceeded int64 range")
        cont = gen.integers(0, high) < num[idx]
        idx = idx[cont]
        k[idx] += 1
    return (k & 1).astype(bool)


def _bern_exp_vec(num: np.ndarray, den: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    num = np.array(num, dtype=np.int64)
    den = np.broadcast_to(np.asarray(den, dtype=np.int64), num.shape).copy()
    out = np.ones(num.shape[0], dtype=bool)
    idx = np.nonzero(num > den)[0]
    while idx.size:
        ones = np.ones(idx.size, dtype=np.int64)
        ok = _bern_exp1_vec(ones, ones, gen)
        out[idx[~ok]] = False
        idx = idx[ok]
        num[idx] -= den[idx]
        idx = idx[num[idx] > den[idx]]
    live = np.nonzero(out)[0]
    out[live] = _bern_exp1_vec(num[live], den[live], gen)
    return out


def _geometric_exp1_vec(n: int, gen: np.random.Generator) -> np.ndarray:
    k = np.zeros(n, dtype=np.int64)
    idx = np.arange(n)
    while idx.size:
        ones = np.ones(idx.size, dtype=np.int64)
        idx = idx[_bern_exp1_vec(ones, ones, gen)]
        k[idx] += 1
    return k


def _discrete_laplace_vec(num: int, den: int, n: int, gen: np.random.Generator) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        m = n - filled
        u = gen.integers(0, den, size=m)
        u = u[_bern_exp_vec(u, np.full(m, den, dtype=np.int64), gen)]
        v = _geometric_exp1_vec(u.size, gen)
        magnitude = (v * den + u) // num
        negative = gen.integers(0, 2, size=u.size).astype(bool)
        keep = ~(negative & (magnitude == 0))
        vals = np.where(negative, -magnitude, magnitude)[keep][:m]
        out[filled:filled + vals.size] = vals
        filled += vals.size
    return out


def _dgauss_vec(num: int, den: int, t: int, n: int, rng: RandomSource) -> np.ndarray:
    gen = rng.generator
    qd = 2 * den * t * t * num
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        m = int((n - filled) * 1.4) + 8
        y = _discrete_laplace_vec(1, t, m, gen)
        mag = np.abs(y)
        small = mag * (den * t) < _MAX_VECTOR_OFFSET
        accept = np.zeros(m, dtype=bool)
        a = mag[small] * (den * t) - num
        accept[small] = _bern_exp_vec(a * a, np.full(a.size, qd, dtype=np.int64), gen)
        # Far tail proposals: decide with exact Python ints.
        for i in np.nonzero(~small)[0]:
            big = int(mag[i]) * den * t - num
            accept[i] = _bern_exp(big * big, qd, rng)
        vals = y[accept][: n - filled]
        out[filled:filled + vals.size] = vals
        filled += vals.size
    return out


# ---------------------------------------------------------------------------
# Distributions


@dataclass(frozen=True)
class DiscreteGaussian:
    """The discrete Gaussian N_Z(sigma^2) centred at zero.

    ``sigma_squared`` is stored as an exact ``Fraction``; the sampler only
    ever touches its numerator and denominator.
    """

    sigma_squared: Fraction

    def __post_init__(self) -> None:
        s2 = to_fraction(self.sigma_squared)
        if s2 <= 0:
            raise ValueError(f"sigma_squared must be positive, got {s2}")
        object.__setattr__(self, "sigma_squared", s2)

    @classmethod
    def from_rho(cls, rho: Rational) -> "DiscreteGaussian":
        """Noise for rho-zCDP at L2 sensitivity 1: sigma^2 = 1 / (2 rho)."""
        rho = to_fraction(rho)
        if rho <= 0:
            raise ValueError(f"rho must be positive, got {rho}")
        return cls(1 / (2 * rho))

    @classmethod
    def from_sigma(cls, sigma: Rational) -> "DiscreteGaussian":
        sigma = to_fraction(sigma)
        return cls(sigma * sigma)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_squared)

    @cached_property
    def window(self) -> int:
        """Half-width of the summation window, max(12 sigma, 50)."""
        return max(int(math.ceil(12 * self.sigma)), 50)

    @cached_property
    def _support(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.window
        xs = np.arange(-k, k + 1, dtype=np.int64)
        weights = np.exp(-(xs.astype(float) ** 2) / (2 * float(self.sigma_squared)))
        # Drop terms whose mass cannot matter at double precision.
        weights[weights < 1e-18 * weights.max()] = 0.0
        return xs, weights / math.fsum(weights)

    def pmf(self, x: int) -> float:
        x = abs(int(x))
        if x > self.window:
            return 0.0
        return float(self._support[1][x + self.window])

    def cdf(self, t: float) -> float:
        return dgauss_cdf(self, t)

    def variance(self) -> float:
        """Variance by truncated pmf summation over the support window."""
        xs, p = self._support
        return math.fsum(p * xs.astype(float) ** 2)

    def sample(self, rng: RandomSource) -> int:
        return dgauss_sample(self, rng)

    def sample_array(self, size: int, rng: RandomSource) -> np.ndarray:
        return dgauss_sample_array(self, size, rng)


def _floor_sqrt_fraction(q: Fraction) -> int:
    # floor(sqrt(a/b)) == isqrt(a*b) // b for positive integers a, b.
    return isqrt(q.numerator * q.denominator) // q.denominator


@dataclass(frozen=True)
class TwoSidedGeometric:
    """Two-sided geometric (discrete Laplace), pmf proportional to exp(-eps |x|).

    This is the pure-DP counting mechanism at L1 sensitivity 1.
    """

    epsilon_per_unit: Fraction

    def __post_init__(self) -> None:
        eps = to_fraction(self.epsilon_per_unit)
        if eps <= 0:
            raise ValueError(f"epsilon_per_unit must be positive, got {eps}")
        object.__setattr__(self, "epsilon_per_unit", eps)

    @property
    def ratio(self) -> float:
        """Geometric ratio q = exp(-eps)."""
        return math.exp(-float(self.epsilon_per_unit))

    def pmf(self, x: int) -> float:
        q = self.ratio
        return (1 - q) / (1 + q) * q ** abs(int(x))

    def cdf(self, t: float) -> float:
        t = math.floor(t)
        q = self.ratio
        if t >= 0:
            return 1 - q ** (t + 1) / (1 + q)
        return q ** (-t) / (1 + q)

    def invcdf(self, p: float) -> int:
        """Smallest integer ``t`` with ``cdf(t) >= p``."""
        if not 0 < p < 1:
            raise ValueError(f"p must be in (0, 1), got {p}")
        q = self.ratio
        if p >= 1 / (1 + q):
            # 1 - q^(t+1)/(1+q) >= p  <=>  t >= log((1-p)(1+q)) / log(q) - 1
            t = math.ceil(math.log((1 - p) * (1 + q)) / math.log(q) - 1)
        else:
            t = -math.floor(math.log(p * (1 + q)) / math.log(q))
        # Repair rounding at the boundary.
        while self.cdf(t - 1) >= p:
            t -= 1
        while self.cdf(t) < p:
            t += 1
        return t

    def variance(self) -> float:
        q = self.ratio
        return 2 * q / (1 - q) ** 2

    def sample(self, rng: RandomSource) -> int:
        return geometric_sample(self, rng)

    def sample_array(self, size: int, rng: RandomSource) -> np.ndarray:
        eps = self.epsilon_per_unit
        if eps.denominator < _MAX_VECTOR_DENOMINATOR and eps.numerator < _MAX_VECTOR_DENOMINATOR:
            return _discrete_laplace_vec(eps.numerator, eps.denominator, size, rng.generator)
        return np.array(
            [_discrete_laplace_scalar(eps.numerator, eps.denominator, rng) for _ in range(size)],
            dtype=np.int64,
        )


# ---------------------------------------------------------------------------
# Operations


def dgauss_sample_array(d: DiscreteGaussian, size: int, rng: RandomSource) -> np.ndarray:
    """Exact iid samples from ``d`` as an int64 array."""
    if size < 0:
        raise ValueError("size must be non-negative")
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    num, den = d.sigma_squared.numerator, d.sigma_squared.denominator
    t = _floor_sqrt_fraction(d.sigma_squared) + 1
    if 2 * den * t * t * num < _MAX_VECTOR_DENOMINATOR:
        return _dgauss_vec(num, den, t, size, rng)
    return np.array([_dgauss_scalar(num, den, t, rng) for _ in range(size)], dtype=np.int64)


def dgauss_sample(d: DiscreteGaussian, rng: RandomSource) -> int:
    """One exact sample from the discrete Gaussian ``d``.

    Terminates with probability 1: each proposal is accepted with probability
    bounded away from zero.
    """
    return int(dgauss_sample_array(d, 1, rng)[0])


def geometric_sample(g: TwoSidedGeometric, rng: RandomSource) -> int:
    """One exact sample from the two-sided geometric ``g``."""
    return int(g.sample_array(1, rng)[0])


def dgauss_cdf(d: DiscreteGaussian, t: float) -> float:
    """P[X <= t] for X ~ d.

    Computed from the smaller tail so that values near 1 keep their precision.
    """
    t = math.floor(t)
    xs, p = d._support
    k = d.window
    if t >= 0:
        upper = p[min(t + 1 + k, p.size):]
        return 1.0 - math.fsum(upper)
    lower = p[: max(t + 1 + k, 0)]
    return math.fsum(lower)


def dgauss_invcdf(d: DiscreteGaussian, p: float) -> int:
    """Smallest integer ``t`` with ``dgauss_cdf(d, t) >= p``."""
    if not 0 < p < 1:
        raise ValueError(f"p must be in (0, 1), got {p}")
    t = math.floor(_STD_NORMAL.inv_cdf(p) * d.sigma)
    while dgauss_cdf(d, t - 1) >= p:
        t -= 1
    while dgauss_cdf(d, t) < p:
        t += 1
    return t


def dgauss_tail_bound(d: DiscreteGaussian, m: int) -> float:
    """Continuous-Gaussian bound P[Y >= m - 1], Y ~ N(0, sigma^2).

    Dominates the discrete tail P[X >= m] for every m >= 1.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return 0.5 * math.erfc((m - 1) / (d.sigma * math.sqrt(2)))
