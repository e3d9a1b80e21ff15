"""Single-mode displacement operator D(beta) = exp(beta b^+ - beta^* b).

Matrix elements use the generalized-Laguerre closed form

    <m|D(beta)|n> = sqrt(n!/m!) beta^(m-n) exp(-|beta|^2/2) L_n^(m-n)(|beta|^2),  m >= n,

with the factorial ratio handled through log-gamma so that occupation
numbers in the thousands do not overflow. The m < n case follows from
<m|D(beta)|n> = conj(<n|D(-beta)|m>).
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import gammaln

from .errors import TruncationNotConverged

BLOCK = 32
HARD_CAP = 4096
TAIL_RTOL = 1e-12

_RESCALE_AT = 1e150


def _laguerre_scaled(n, alpha, x):
    """Generalized Laguerre L_n^(alpha)(x) as ``mantissa * exp(log_scale)``.

    Three-term recurrence, vectorized over broadcast ``n``, ``alpha``, ``x``.
    Entries are rescaled independently whenever they grow past 1e150.
    """
    n, alpha, x = np.broadcast_arrays(
        np.asarray(n, dtype=np.int64), np.asarray(alpha, dtype=float), np.asarray(x, dtype=float)
    )
    if np.any(n < 0):
        raise ValueError("Laguerre degree must be nonnegative")
    shape = n.shape
    n, alpha, x = n.ravel(), alpha.ravel(), x.ravel()
    out = np.ones(n.shape)
    log_scale = np.zeros(n.shape)
    if n.size == 0:
        return out.reshape(shape), log_scale.reshape(shape)
    prev = np.ones(n.shape)
    cur = 1.0 + alpha - x
    out[n == 1] = cur[n == 1]
    scale = np.zeros(n.shape)
    for k in range(1, int(n.max())):
        nxt = ((2 * k + 1 + alpha - x) * cur - (k + alpha) * prev) / (k + 1)
        prev, cur = cur, nxt
        big = np.abs(cur) > _RESCALE_AT
        if big.any():
            f = np.abs(cur[big])
            cur[big] /= f
            prev[big] /= f
            scale[big] += np.log(f)
        hit = n == k + 1
        out[hit] = cur[hit]
        log_scale[hit] = scale[hit]
    return out.reshape(shape), log_scale.reshape(shape)


def laguerre(n, alpha, x):
    """Generalized Laguerre polynomial L_n^(alpha)(x); ``alpha=0`` gives L_n."""
    mant, log_scale = _laguerre_scaled(n, alpha, x)
    val = mant * np.exp(log_scale)
    return float(val) if np.ndim(val) == 0 else val


def displacement_elements(m, n, beta: complex) -> np.ndarray:
    """Vectorized <m|D(beta)|n> over broadcast integer arrays ``m``, ``n``."""
    m, n = np.broadcast_arrays(np.asarray(m, dtype=np.int64), np.asarray(n, dtype=np.int64))
    if np.any(m < 0) or np.any(n < 0):
        raise ValueError("occupation numbers must be nonnegative")
    beta = complex(beta)
    b2 = abs(beta) ** 2
    if b2 == 0.0:
        return (m == n).astype(complex)
    hi = np.maximum(m, n)
    lo = np.minimum(m, n)
    gap = hi - lo
    mant, log_scale = _laguerre_scaled(lo, gap, b2)
    with np.errstate(divide="ignore"):
        log_mag = (
            gap * np.log(abs(beta))
            + 0.5 * (gammaln(lo + 1) - gammaln(hi + 1))
            - 0.5 * b2
            + log_scale
            + np.log(np.abs(mant))
        )
    # m >= n carries beta^(m-n); m < n carries (-conj(beta))^(n-m)
    if beta.imag == 0.0:
        s = np.sign(beta.real)
        phase = np.where(m >= n, s, -s) ** gap
        val = (np.sign(mant) * phase * np.exp(log_mag)).astype(complex)
    else:
        phase_base = np.where(m >= n, np.angle(beta), np.angle(-beta.conjugate()))
        val = np.sign(mant) * np.exp(log_mag + 1j * gap * phase_base)
    return np.where(mant == 0.0, 0.0, val)


def displacement_element(m: int, n: int, beta: complex) -> complex:
    """<m|D(beta)|n> for a single pair of occupation numbers."""
    return complex(displacement_elements(m, n, beta))


def displacement_column(n: int, beta: complex, m_max: int) -> np.ndarray:
    """<m|D(beta)|n> for m = 0..m_max."""
    return displacement_elements(np.arange(m_max + 1), n, beta)


def adaptive_sum(
    terms: Callable[[np.ndarray], np.ndarray],
    peak: int,
    block: int = BLOCK,
    rtol: float = TAIL_RTOL,
    cap: int = HARD_CAP,
) -> tuple[float, int]:
    """Sum ``terms(m)`` over m = 0, 1, ... in blocks until converged.

    Blocks are added until one lying entirely past ``peak`` contributes less
    than ``rtol`` of the running total. Returns ``(total, M)`` where M is the
    last index included.
    """
    total = 0.0
    start = 0
    while True:
        stop = start + block
        if stop > cap:
            raise TruncationNotConverged(
                f"sum not converged below cutoff {cap} (running total {total!r})"
            )
        part = float(np.sum(terms(np.arange(start, stop))))
        total += part
        if start > peak and abs(part) < rtol * abs(total):
            return total, stop - 1
        start = stop


def weighted_square_sum(n: int, beta: complex, mu: float, cap: int = HARD_CAP) -> float:
    """sum_m exp(2 mu (m-n)) |<m|D(beta)|n>|^2, adaptively truncated."""
    def terms(m):
        return np.exp(2 * mu * (m - n)) * np.abs(displacement_elements(m, n, beta)) ** 2

    total, _ = adaptive_sum(terms, peak=n + int(np.ceil(4 * abs(beta) ** 2)), cap=cap)
    return total


def weighted_square_sum_closed_form(n: int, beta: complex, mu: float) -> float:
    """Closed form exp((e^{2mu}-1)|beta|^2) L_n(-|beta|^2 (e^mu - e^-mu)^2)."""
    b2 = abs(beta) ** 2
    arg = -b2 * (np.exp(mu) - np.exp(-mu)) ** 2
    mant, log_scale = _laguerre_scaled(n, 0, arg)
    return float(mant * np.exp(log_scale + (np.exp(2 * mu) - 1) * b2))


def dispsum_profile(n: int, beta: complex, mu: float, p: float, cap: int = HARD_CAP) -> float:
    """sum_m exp(mu |sqrt(n) - sqrt(m)|) |<m|D(beta)|n>|^p."""
    if not 0 < p <= 2:
        raise ValueError("p must lie in (0, 2]")

    def terms(m):
        w = np.exp(mu * np.abs(np.sqrt(n) - np.sqrt(m)))
        return w * np.abs(displacement_elements(m, n, beta)) ** p

    total, _ = adaptive_sum(terms, peak=n + int(np.ceil(4 * abs(beta) ** 2)), cap=cap)
    return total


def sqrt_metric_sum(n: int, mu: float, alpha: float, cap: int = HARD_CAP) -> float:
    """sum_m max(m, 1)^alpha exp(-mu |sqrt(m) - sqrt(n)|)."""
    if mu <= 0:
        raise ValueError("mu must be positive")

    def terms(m):
        return np.maximum(m, 1) ** float(alpha) * np.exp(-mu * np.abs(np.sqrt(m) - np.sqrt(n)))

    # the summand is maximal near m = max(n, (2 alpha / mu)^2)
    peak = max(n, int(np.ceil((2 * max(alpha, 0.0) / mu) ** 2)))
    total, _ = adaptive_sum(terms, peak=peak, cap=cap)
    return total


def growth_exponent(ns, values) -> float:
    """Least-squares slope of log(values) against log(max(n, 1))."""
    x = np.log(np.maximum(np.asarray(ns, dtype=float), 1.0))
    y = np.log(np.asarray(values, dtype=float))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
