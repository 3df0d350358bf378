"""Classic alignment and averaging baselines.

- :func:`dtw`: exact dynamic-time-warping distance with squared-Euclidean
  ground cost, an optional Sakoe-Chiba band, and deterministic path
  backtracking (diagonal preferred, then vertical).
- :func:`dba`: DTW barycenter averaging — alternate aligning every signal to
  the current average and re-estimating each coordinate as the mean of the
  samples mapped to it.
- :func:`soft_dtw`: the soft-minimum relaxation of DTW (gamma = 0 falls back
  to the hard minimum exactly).
- :func:`soft_dtw_grad` / :func:`soft_dtw_barycenter`: the exact gradient of
  the soft distance with respect to the first series, and gradient-descent
  averaging on top of it.

Multichannel series use per-timestep squared l2 ground cost.  ``Signal``
inputs with validity masks contribute their valid samples only; plain arrays
are used as-is.  The dynamic programs sweep anti-diagonals so each step is a
vectorized update over a wavefront rather than a per-cell Python loop.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import NumericalError
from .warping import Signal

__all__ = [
    "DtwResult",
    "BarycenterResult",
    "dtw",
    "dba",
    "soft_dtw",
    "soft_dtw_grad",
    "soft_dtw_barycenter",
]


@dataclass
class DtwResult:
    """Alignment cost plus the warping path as (i, j) index pairs.

    The path is monotone, runs from (0, 0) to (n-1, m-1) in steps of
    (1, 0), (0, 1), or (1, 1), and its summed ground cost equals ``cost``.
    """

    cost: float
    path: List[Tuple[int, int]]


@dataclass
class BarycenterResult:
    """An averaged signal plus the per-iteration objective trace."""

    barycenter: Signal
    objective: List[float]


def _as_series(x) -> np.ndarray:
    """Coerce a Signal or array-like to a (C, n) array of valid samples."""
    if isinstance(x, Signal):
        return x.values[:, x.mask] if x.mask is not None else x.values
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if arr.ndim != 2:
        raise ValueError("series must be 1-D or (channels, length)")
    return arr


def _pair(u, w):
    a, b = _as_series(u), _as_series(w)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("alignment requires non-empty series")
    if a.shape[0] != b.shape[0]:
        raise ValueError("series must have the same number of channels")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("series must be finite")
    return a, b


def _cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, m) squared-Euclidean cost: sum_c (a[c,i] - b[c,j])^2."""
    diff = a[:, :, None] - b[:, None, :]
    return np.einsum("cij,cij->ij", diff, diff)


def _band_mask(n: int, m: int, band: int) -> np.ndarray:
    """Sakoe-Chiba allowance: |i * m/n - j| <= band in 1-based indices."""
    i = np.arange(1, n + 1, dtype=float)[:, None]
    j = np.arange(1, m + 1, dtype=float)[None, :]
    return np.abs(i * (m / n) - j) <= band + 1e-9


def _diag_range(s: int, n: int, m: int):
    lo = max(0, s - m + 1)
    hi = min(n - 1, s)
    ii = np.arange(lo, hi + 1)
    return ii, s - ii


def _dtw_matrix(cost: np.ndarray) -> np.ndarray:
    """Hard-min DP table, filled one anti-diagonal at a time."""
    n, m = cost.shape
    table = np.full((n, m), np.inf)
    table[0, 0] = cost[0, 0]
    for s in range(1, n + m - 1):
        ii, jj = _diag_range(s, n, m)
        diag = np.where((ii > 0) & (jj > 0),
                        table[np.maximum(ii - 1, 0), np.maximum(jj - 1, 0)], np.inf)
        vert = np.where(ii > 0, table[np.maximum(ii - 1, 0), jj], np.inf)
        horz = np.where(jj > 0, table[ii, np.maximum(jj - 1, 0)], np.inf)
        table[ii, jj] = cost[ii, jj] + np.minimum(diag, np.minimum(vert, horz))
    return table


def _backtrack(table: np.ndarray) -> List[Tuple[int, int]]:
    """Greedy descent from the last cell; ties prefer diagonal, then vertical."""
    n, m = table.shape
    i, j = n - 1, m - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((table[i - 1, j - 1], 0, i - 1, j - 1))
        if i > 0:
            candidates.append((table[i - 1, j], 1, i - 1, j))
        if j > 0:
            candidates.append((table[i, j - 1], 2, i, j - 1))
        _, _, i, j = min(candidates)
        path.append((i, j))
    path.reverse()
    return path


def dtw(u, w, band: Optional[int] = None) -> DtwResult:
    """Exact DTW distance and path between two series.

    Parameters
    ----------
    u, w : Signal or array-like
        Series of shape (n,) or (channels, n); masked Signals contribute
        their valid samples.
    band : int, optional
        Sakoe-Chiba radius: cell (i, j) is admissible iff
        |i * m/n - j| <= band (1-based).  None means unconstrained.

    Raises
    ------
    ValueError
        On empty input, channel mismatch, non-finite values, or a band too
        small to admit any monotone path.
    """
    a, b = _pair(u, w)
    if band is not None:
        if int(band) != band or band < 0:
            raise ValueError("band radius must be a nonnegative integer")
    cost = _cost_matrix(a, b)
    if band is not None:
        cost = np.where(_band_mask(*cost.shape, int(band)), cost, np.inf)
    table = _dtw_matrix(cost)
    final = table[-1, -1]
    if not np.isfinite(final):
        raise ValueError("band too small to admit any warping path")
    return DtwResult(cost=float(final), path=_backtrack(table))


# ---------------------------------------------------------------------------
# DBA


def _linear_resample(values: np.ndarray, length: int) -> np.ndarray:
    """Linearly interpolate a (C, n) series onto `length` uniform samples."""
    n = values.shape[1]
    if n == 1:
        return np.repeat(values, length, axis=1)
    x = np.linspace(0.0, 1.0, length)
    xp = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(x, xp, row) for row in values])


def _barycenter_init(series: List[np.ndarray], init) -> np.ndarray:
    """Explicit init, or the mean of the inputs linearly resampled to the
    median input length."""
    if init is not None:
        return _as_series(init).astype(float).copy()
    length = int(round(float(np.median([s.shape[1] for s in series]))))
    return np.mean([_linear_resample(s, length) for s in series], axis=0)


def _check_ensemble(signals) -> List[np.ndarray]:
    series = [_as_series(s) for s in signals]
    if not series:
        raise ValueError("empty ensemble")
    channels = series[0].shape[0]
    if any(s.shape[0] != channels for s in series):
        raise ValueError("ensemble signals must share the channel count")
    return series


def dba(signals, init=None, iters: int = 10) -> BarycenterResult:
    """DTW barycenter averaging.

    Each iteration aligns every signal to the current average with
    :func:`dtw`, then replaces every average coordinate by the arithmetic
    mean of all signal samples its path entries map to.  The objective trace
    records the total DTW cost against the average at the start of each
    iteration, which is non-increasing.
    """
    series = _check_ensemble(signals)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mu = _barycenter_init(series, init)
    trace: List[float] = []
    for _ in range(iters):
        total = 0.0
        acc = np.zeros_like(mu)
        cnt = np.zeros(mu.shape[1])
        for s in series:
            result = dtw(mu, s)
            total += result.cost
            pi = np.fromiter((p[0] for p in result.path), dtype=int)
            pj = np.fromiter((p[1] for p in result.path), dtype=int)
            np.add.at(cnt, pi, 1.0)
            for c in range(mu.shape[0]):
                np.add.at(acc[c], pi, s[c, pj])
        trace.append(total)
        mu = acc / cnt  # every coordinate appears in every path, so cnt >= 1
    return BarycenterResult(barycenter=Signal(mu), objective=trace)


# ---------------------------------------------------------------------------
# SoftDTW


def _softmin3(a: np.ndarray, b: np.ndarray, c: np.ndarray, gamma: float) -> np.ndarray:
    """Stable -gamma*log(exp(-a/g) + exp(-b/g) + exp(-c/g)), elementwise."""
    lowest = np.minimum(np.minimum(a, b), c)
    shift = np.where(np.isfinite(lowest), lowest, 0.0)
    with np.errstate(invalid="ignore"):
        z = (np.where(np.isfinite(a), np.exp((shift - a) / gamma), 0.0)
             + np.where(np.isfinite(b), np.exp((shift - b) / gamma), 0.0)
             + np.where(np.isfinite(c), np.exp((shift - c) / gamma), 0.0))
    return np.where(np.isfinite(lowest), shift - gamma * np.log(np.maximum(z, 1e-300)),
                    np.inf)


def _soft_matrix(cost: np.ndarray, gamma: float) -> np.ndarray:
    """Soft-min DP table over the same wavefront as the hard version."""
    n, m = cost.shape
    table = np.full((n, m), np.inf)
    table[0, 0] = cost[0, 0]
    for s in range(1, n + m - 1):
        ii, jj = _diag_range(s, n, m)
        diag = np.where((ii > 0) & (jj > 0),
                        table[np.maximum(ii - 1, 0), np.maximum(jj - 1, 0)], np.inf)
        vert = np.where(ii > 0, table[np.maximum(ii - 1, 0), jj], np.inf)
        horz = np.where(jj > 0, table[ii, np.maximum(jj - 1, 0)], np.inf)
        table[ii, jj] = cost[ii, jj] + _softmin3(diag, vert, horz, gamma)
    return table


def _soft_backward(cost: np.ndarray, table: np.ndarray, gamma: float) -> np.ndarray:
    """d(soft cost)/d(cost[i, j]) via the reverse sweep of the soft DP."""
    n, m = cost.shape
    grad = np.zeros((n, m))
    grad[-1, -1] = 1.0

    def weight(src_i, src_j, dst_i, dst_j, valid):
        # d table[dst] / d table[src] for a single DP step.
        di = np.minimum(dst_i, n - 1)
        dj = np.minimum(dst_j, m - 1)
        expo = (table[di, dj] - cost[di, dj] - table[src_i, src_j]) / gamma
        return np.where(valid, np.exp(np.minimum(expo, 0.0)) * grad[di, dj], 0.0)

    for s in range(n + m - 3, -1, -1):
        ii, jj = _diag_range(s, n, m)
        down = weight(ii, jj, ii + 1, jj, ii + 1 <= n - 1)
        right = weight(ii, jj, ii, jj + 1, jj + 1 <= m - 1)
        diag = weight(ii, jj, ii + 1, jj + 1, (ii + 1 <= n - 1) & (jj + 1 <= m - 1))
        grad[ii, jj] = down + right + diag
    return grad


def soft_dtw(u, w, gamma: float) -> float:
    """Soft-minimum DTW distance; gamma = 0 gives the hard DTW cost exactly."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0.0:
        return dtw(u, w).cost
    a, b = _pair(u, w)
    return float(_soft_matrix(_cost_matrix(a, b), gamma)[-1, -1])


def soft_dtw_grad(u, w, gamma: float):
    """Soft DTW value and its exact gradient with respect to ``u``.

    Returns ``(value, grad)`` where grad has u's (C, n) shape.  The gradient
    comes from the standard reverse-mode sweep of the soft-min recursion.
    """
    if gamma <= 0:
        raise ValueError("the soft gradient requires gamma > 0")
    a, b = _pair(u, w)
    cost = _cost_matrix(a, b)
    table = _soft_matrix(cost, gamma)
    value = float(table[-1, -1])
    occupancy = _soft_backward(cost, table, gamma)
    grad = 2.0 * (a * occupancy.sum(axis=1)[None, :] - b @ occupancy.T)
    return value, grad


def soft_dtw_barycenter(signals, gamma: float, iters: int = 100,
                        lr: float = 0.1, init=None) -> BarycenterResult:
    """Gradient-descent averaging under the soft DTW objective.

    Minimizes sum_i soft_dtw(mu, u_i) by plain gradient descent.  The trace
    records the objective at the start of each iteration; a non-finite
    objective raises :class:`NumericalError`.
    """
    if gamma <= 0:
        raise ValueError("soft barycenters require gamma > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    series = _check_ensemble(signals)
    mu = _barycenter_init(series, init)
    trace: List[float] = []
    for _ in range(iters):
        total = 0.0
        step = np.zeros_like(mu)
        tables = []
        for s in series:
            cost = _cost_matrix(mu, s)
            table = _soft_matrix(cost, gamma)
            total += float(table[-1, -1])
            tables.append((s, cost, table))
        if not np.isfinite(total):
            raise NumericalError("soft-dtw barycenter objective diverged")
        trace.append(total)
        for s, cost, table in tables:
            occupancy = _soft_backward(cost, table, gamma)
            step += 2.0 * (mu * occupancy.sum(axis=1)[None, :] - s @ occupancy.T)
        mu = mu - lr * step
    return BarycenterResult(barycenter=Signal(mu), objective=trace)
