"""Grid generation and the differentiable linear resampler.

A signal lives on integer sample indices 0..M-1; warps live on [0, 1].  A
uniform sampling grid ties the two together: warped grid positions x are
converted to index coordinates p = x * (M - 1), and output values are
kernel sums

    v_m = sum_{m'} u_{m'} * max(0, 1 - |p_m - m'|)

i.e. linear interpolation, with positions outside [0, M-1] clamped to the
edge samples.  The backward pass returns exact (sub)gradients of this map
with respect to both the source values and the positions; at kernel kinks
(integer p) the left branch is taken, so d v / d p = u_p - u_{p-1} there.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import cpab


@dataclass
class Signal:
    """A C-channel series of length M with an optional validity mask.

    ``values`` is (C, M); ``mask`` is a length-M boolean vector marking valid
    samples (padding sits at the tail), or None for fully valid signals.
    """

    values: np.ndarray
    mask: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise ValueError("signal values must be a (C, M) matrix")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.values.shape[1],):
                raise ValueError("mask length must match signal length")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


def make_grid(n_points: int) -> np.ndarray:
    """Uniform sampling grid over [0, 1] with ``n_points`` >= 2 points."""
    if n_points < 2:
        raise ValueError("a sampling grid needs at least 2 points")
    return np.linspace(0.0, 1.0, n_points)


def _index_pairs(positions, m_in):
    """Clamped index coords -> (lo, t): v = (1-t)*u[lo] + t*u[lo+1].

    Positions within 1e-9 of an integer snap to it, so grids that are
    uniform up to roundoff reproduce the source samples exactly.  Uses
    lo = clip(ceil(p) - 1, 0, m_in - 2), which selects the left kernel
    branch at integer positions.
    """
    p = np.clip(positions, 0.0, float(m_in - 1))
    near = np.rint(p)
    p = np.where(np.abs(p - near) < 1e-9, near, p)
    lo = np.clip(np.ceil(p).astype(int) - 1, 0, m_in - 2)
    return p, lo, p - lo


def resample(u: Signal, warped_grid: np.ndarray) -> Signal:
    """Sample a signal at warped grid positions by linear interpolation.

    ``warped_grid`` holds domain positions (the warp of a uniform grid);
    they are mapped to index coordinates p = x * (M - 1) against the source
    length M.  Masks are resampled with the same kernel and re-binarized at
    0.5.  The output length equals ``len(warped_grid)``.
    """
    warped_grid = np.asarray(warped_grid, dtype=float)
    if not np.all(np.isfinite(warped_grid)):
        raise ValueError("warped grid must be finite")
    m_in = u.length
    positions = warped_grid * (m_in - 1)
    _, lo, t = _index_pairs(positions, m_in)
    values = u.values[:, lo] * (1.0 - t) + u.values[:, lo + 1] * t
    mask = None
    if u.mask is not None:
        mf = u.mask.astype(float)
        mask = mf[lo] * (1.0 - t) + mf[lo + 1] * t >= 0.5
    return Signal(values=values, mask=mask, label=u.label)


def resample_backward(u: Signal, warped_grid: np.ndarray, upstream_grad: np.ndarray):
    """Gradients of :func:`resample` w.r.t. source values and positions.

    Parameters
    ----------
    u, warped_grid : as in :func:`resample`.
    upstream_grad : (C, M_out) array
        dLoss/d(output values).

    Returns
    -------
    grad_u : (C, M) array
        dLoss/d(source values).
    grad_positions : (M_out,) array
        dLoss/d(index coordinate p_m), i.e. in index units; divide by
        (M - 1) is NOT applied here — multiply by (M - 1) to convert a
        domain-position derivative.  Zero where positions clamp outside
        [0, M - 1].  Mask resampling is treated as locally constant.
    """
    warped_grid = np.asarray(warped_grid, dtype=float)
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    m_in = u.length
    if upstream_grad.shape != (u.n_channels, warped_grid.shape[0]):
        raise ValueError("upstream grad shape must be (C, len(warped_grid))")
    positions = warped_grid * (m_in - 1)
    _, lo, t = _index_pairs(positions, m_in)
    inside = (positions >= 0.0) & (positions <= m_in - 1)
    diff = u.values[:, lo + 1] - u.values[:, lo]
    grad_positions = np.where(inside, np.sum(upstream_grad * diff, axis=0), 0.0)
    grad_u = np.empty_like(u.values)
    for c in range(u.n_channels):
        grad_u[c] = (np.bincount(lo, upstream_grad[c] * (1.0 - t), minlength=m_in)
                     + np.bincount(lo + 1, upstream_grad[c] * t, minlength=m_in))
    return grad_u, grad_positions


def warp_signal(basis: cpab.CpaBasis, theta: np.ndarray, u: Signal) -> Signal:
    """Warp a signal: resample it at T^theta applied to the uniform grid."""
    grid = make_grid(u.length)
    return resample(u, cpab.integrate_grid(basis, theta, grid))
