"""Small-sample test statistics in pure Python.

Student-t tails come from the regularized incomplete beta function,
evaluated with the modified Lentz continued fraction. The fraction
converges fast for x < (a + 1) / (a + b + 2); above that point the
symmetry I_x(a, b) = 1 - I_{1-x}(b, a) is used instead. Normal tails use
``math.erfc``. Target accuracy is ~1e-12 relative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 500


def log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _beta_cf(x: float, a: float, b: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - log_beta(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(x, a, b) / a
    return 1.0 - front * _beta_cf(1.0 - x, b, a) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t."""
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def t_two_sided_p(t: float, df: float) -> float:
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def normal_two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def stars(p: float) -> str:
    if p != p:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class TTestResult:
    n: int
    mean: float
    sd: float
    t: float
    df: int
    p: float
    d: float
    degenerate: bool = False

    @property
    def stars(self) -> str:
        return stars(self.p)


def sample_sd(values: Sequence[float]) -> float:
    n = len(values)
    m = math.fsum(values) / n
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (n - 1))


def one_sample_t(values: Sequence[float], mu0: float = 0.0) -> TTestResult:
    """Two-sided one-sample t-test with Cohen's d = (mean - mu0) / sd.

    Zero spread returns a result flagged ``degenerate`` with NaN statistics.
    """
    values = [float(v) for v in values]
    n = len(values)
    if n < 2:
        raise ValueError("one-sample t-test needs at least two values")
    mean = math.fsum(values) / n
    sd = sample_sd(values)
    if sd == 0.0 or sd < 1e-14 * max(1.0, abs(mean)):
        nan = float("nan")
        return TTestResult(n, mean, 0.0, nan, n - 1, nan, nan, degenerate=True)
    t = (mean - mu0) / (sd / math.sqrt(n))
    return TTestResult(n, mean, sd, t, n - 1, t_two_sided_p(t, n - 1), (mean - mu0) / sd)


@dataclass(frozen=True)
class ZTestResult:
    k: int
    n: int
    proportion: float
    z: float
    p: float

    @property
    def stars(self) -> str:
        return stars(self.p)


def proportion_z_test(k: int, n: int, p0: float = 0.5) -> ZTestResult:
    """Two-sided z-test of k successes in n trials against proportion p0."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, n], got k={k}, n={n}")
    prop = k / n
    z = (prop - p0) / math.sqrt(p0 * (1 - p0) / n)
    return ZTestResult(k, n, prop, z, normal_two_sided_p(z))
