"""Bootstrap intervals, repeated-measures ANOVA and Bonferroni correction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# chunking keeps the resample index matrix bounded for large inputs
_MAX_CELLS_PER_CHUNK = 4_000_000


def bootstrap_ci(values: Sequence[float], n_resamples: int = 10_000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``values``.

    Values are sorted before resampling so the interval does not depend on
    input order for a fixed seed.
    """
    data = np.sort(np.asarray(values, dtype=float))
    if data.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    if np.all(data == data[0]):
        c = float(data[0])
        return c, c

    rng = np.random.default_rng(seed)
    n = data.size
    chunk = max(1, _MAX_CELLS_PER_CHUNK // n)
    means = np.empty(n_resamples)
    done = 0
    while done < n_resamples:
        size = min(chunk, n_resamples - done)
        idx = rng.integers(0, n, size=(size, n))
        means[done:done + size] = data[idx].mean(axis=1)
        done += size

    tail = (1.0 - level) / 2.0
    low, high = np.quantile(means, [tail, 1.0 - tail])
    return float(low), float(high)


# ---------------------------------------------------------------------------
# F distribution tail via the regularized incomplete beta function

def _betacf(a: float, b: float, x: float, eps: float = 1e-16, max_iter: int = 20_000) -> float:
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f_value: float, df_num: float, df_den: float) -> float:
    """Upper tail probability P(F > f_value) of the F distribution."""
    if f_value <= 0:
        return 1.0
    if math.isinf(f_value):
        return 0.0
    x = df_den / (df_den + df_num * f_value)
    return min(1.0, max(0.0, betainc_regularized(df_den / 2.0, df_num / 2.0, x)))


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnovaResult:
    f_value: float
    p_value: float
    df_num: int
    df_den: int


def rm_anova(matrix) -> AnovaResult:
    """One-way repeated-measures ANOVA.

    ``matrix`` has one row per subject (submission) and one column per
    treatment (repetition). Subject effects are removed from the error term.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2:
        raise ValueError("rm_anova expects a 2-D subjects x treatments matrix")
    n, k = x.shape
    if n < 2 or k < 2:
        raise ValueError(f"need at least 2 subjects and 2 treatments, got {n}x{k}")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix has missing or non-finite cells")

    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_total = float(((x - grand) ** 2).sum())
    ss_treat = float(n * ((col_means - grand) ** 2).sum())
    resid = x - row_means[:, None] - col_means[None, :] + grand
    ss_err = float((resid ** 2).sum())

    # rounding noise on exactly-degenerate designs must not turn into a spurious F
    noise = 1e-12 * ss_total
    if ss_treat <= noise:
        ss_treat = 0.0
    if ss_err <= noise:
        ss_err = 0.0

    df_num = k - 1
    df_den = (n - 1) * (k - 1)
    if ss_treat == 0.0:
        f_value = 0.0
    elif ss_err == 0.0:
        f_value = math.inf
    else:
        f_value = (ss_treat / df_num) / (ss_err / df_den)
    return AnovaResult(f_value=f_value, p_value=f_sf(f_value, df_num, df_den),
                       df_num=df_num, df_den=df_den)


def bonferroni_threshold(alpha: float = 0.05, m: int = 1) -> float:
    if m < 1:
        raise ValueError("Bonferroni correction needs at least one test")
    return alpha / m
