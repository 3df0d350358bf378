"""Diffeomorphic 1-D warps from continuous piecewise-affine velocity fields.

The unit interval is split into ``n_cells`` equal cells.  On each cell the
velocity is affine, ``v(x) = a_c * x + b_c``, and the per-cell coefficients
are constrained to be continuous across cell boundaries (plus optional
boundary conditions).  The admissible coefficient vectors form a linear
subspace; an orthonormal basis ``B`` of that subspace is computed once per
tessellation, and a warp is parametrized by coordinates ``theta`` in that
basis.  The warp itself is the time-1 flow of the velocity field,

    T(x) = phi(x, 1),   d/dt phi(x, t) = v(phi(x, t)),   phi(x, 0) = x,

which is solved exactly by hopping the trajectory from cell to cell: inside
a cell the ODE is linear and has a closed-form solution, and the time at
which the trajectory crosses into the next cell is available in closed form
as well.  The same bookkeeping yields the exact Jacobian d T(x) / d theta.

Flows of affine fields are strictly monotone in x, so every warp is an
orientation-preserving diffeomorphism of the line, with inverse given by
flowing along ``-theta``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError

_BOUNDARY_KINDS = ("free", "zero_boundary", "circular")

# |a| below this is treated as exactly zero (constant velocity inside a cell).
_EPS_A = 1e-10
# Switch to series expansions of the exp-based helpers below this argument.
_SERIES_Z = 1e-5
# A trajectory visits each cell at most once; allow a wide safety margin.
_HOP_FACTOR = 100
# Grid points this far outside [0, 1] are float noise from a previous warp
# (boundary constraints hold to machine precision only) and get snapped in.
_DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class Tessellation:
    """Uniform partition of [0, 1] into ``n_cells`` cells."""

    n_cells: int
    boundary: str
    vertices: np.ndarray  # (n_cells + 1,), vertices[0] == 0, vertices[-1] == 1

    def cell_of(self, x):
        """Index of the cell containing ``x`` (right-open; last cell closed)."""
        return np.clip((np.asarray(x) * self.n_cells).astype(int), 0, self.n_cells - 1)


@dataclass(frozen=True)
class CpaBasis:
    """Orthonormal basis of the admissible velocity-coefficient subspace.

    ``matrix`` has shape ``(2 * n_cells, d)``; column ``j`` is the j-th basis
    field, stored as interleaved per-cell coefficients (a_0, b_0, a_1, b_1, ...).
    """

    tess: Tessellation
    matrix: np.ndarray
    d: int


@dataclass(frozen=True)
class PriorCovariance:
    """Gaussian prior on theta with a smoothness-inducing covariance."""

    sigma: np.ndarray  # (d, d) covariance
    factor: np.ndarray  # lower Cholesky factor of sigma
    lambda_sigma: float
    lambda_smooth: float


def build_tessellation(n_cells: int, boundary: str = "free") -> Tessellation:
    """Create a uniform tessellation of [0, 1].

    Parameters
    ----------
    n_cells : int
        Number of cells, at least 1.
    boundary : str
        One of "free" (no constraint beyond continuity), "zero_boundary"
        (velocity vanishes at 0 and 1, so warps fix the endpoints), or
        "circular" (velocity matches at 0 and 1).

    Raises
    ------
    ValueError
        If ``n_cells < 1``, the boundary kind is unknown, or the constraints
        admit no nonzero field (n_cells == 1 with zero_boundary).
    """
    if n_cells < 1:
        raise ValueError(f"n_cells must be >= 1, got {n_cells}")
    if boundary not in _BOUNDARY_KINDS:
        raise ValueError(f"boundary must be one of {_BOUNDARY_KINDS}, got {boundary!r}")
    if n_cells == 1 and boundary == "zero_boundary":
        raise ValueError("n_cells=1 with zero_boundary admits only the zero field")
    vertices = np.linspace(0.0, 1.0, n_cells + 1)
    return Tessellation(n_cells=n_cells, boundary=boundary, vertices=vertices)


def _constraint_matrix(tess: Tessellation) -> np.ndarray:
    """Rows are linear constraints L @ coeffs == 0 on the interleaved coeffs."""
    n = tess.n_cells
    rows = []
    # Continuity at interior vertices: a_{c-1} v + b_{c-1} = a_c v + b_c.
    for c in range(1, n):
        v = tess.vertices[c]
        row = np.zeros(2 * n)
        row[2 * (c - 1)] = v
        row[2 * (c - 1) + 1] = 1.0
        row[2 * c] = -v
        row[2 * c + 1] = -1.0
        rows.append(row)
    if tess.boundary == "zero_boundary":
        row = np.zeros(2 * n)
        row[1] = 1.0  # v(0) = b_0 = 0
        rows.append(row)
        row = np.zeros(2 * n)
        row[2 * (n - 1)] = 1.0  # v(1) = a_{n-1} + b_{n-1} = 0
        row[2 * (n - 1) + 1] = 1.0
        rows.append(row)
    elif tess.boundary == "circular":
        row = np.zeros(2 * n)
        row[1] = 1.0  # v(0) = v(1)
        row[2 * (n - 1)] -= 1.0
        row[2 * (n - 1) + 1] -= 1.0
        rows.append(row)
    if not rows:
        return np.zeros((0, 2 * n))
    return np.array(rows)


def build_basis(tess: Tessellation) -> CpaBasis:
    """Orthonormal basis of the nullspace of the constraint matrix.

    The basis is deterministic: columns are ordered by the SVD (ascending
    singular value of the constraint matrix, i.e. a fixed nullspace order)
    and each column is sign-normalized so its first nonzero entry is positive.
    """
    L = _constraint_matrix(tess)
    two_n = 2 * tess.n_cells
    if L.shape[0] == 0:
        B = np.eye(two_n)
    else:
        _, s, vh = np.linalg.svd(L)
        tol = max(L.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        rank = int(np.sum(s > tol))
        B = vh[rank:].T.copy()
    for j in range(B.shape[1]):
        nz = np.nonzero(np.abs(B[:, j]) > 1e-9)[0]
        if nz.size and B[nz[0], j] < 0:
            B[:, j] = -B[:, j]
    d = B.shape[1]
    expected = {"free": tess.n_cells + 1,
                "zero_boundary": tess.n_cells - 1,
                "circular": tess.n_cells}[tess.boundary]
    if d != expected:
        raise NumericalError(f"basis dimension {d} != expected {expected}")
    return CpaBasis(tess=tess, matrix=B, d=d)


def field_coefficients(basis: CpaBasis, theta: np.ndarray) -> np.ndarray:
    """Per-cell affine coefficients for one or many theta.

    Returns shape ``(n_cells, 2)`` for a single theta of shape ``(d,)``, or
    ``(K, n_cells, 2)`` for a batch of shape ``(K, d)``.  Column 0 holds the
    slopes a_c, column 1 the offsets b_c.
    """
    theta = np.asarray(theta, dtype=float)
    flat = theta @ basis.matrix.T
    return flat.reshape(theta.shape[:-1] + (basis.tess.n_cells, 2))


def velocity(basis: CpaBasis, theta: np.ndarray, x) -> np.ndarray:
    """Evaluate the velocity field at points ``x`` in [0, 1]."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("velocity points must lie in [0, 1]")
    coeffs = field_coefficients(basis, theta)
    if coeffs.ndim != 2:
        raise ValueError("velocity expects a single theta vector")
    c = basis.tess.cell_of(x)
    return coeffs[c, 0] * x + coeffs[c, 1]


# ---------------------------------------------------------------------------
# Stable closed-form helpers for the in-cell flow f(x, s) of v(x) = a x + b.
#
#   f(x, s)    = x e^{as} + b s E(as)          E(z) = (e^z - 1)/z
#   df/da      = x s e^{as} + b s^2 G(as)      G(z) = (z e^z - e^z + 1)/z^2
#   df/db      = s E(as)
#   hit time to y:  t = ((y - x)/v(x)) * H(w),  w = a (y - x)/v(x),
#                   H(w) = log(1 + w)/w;  a boundary is reached iff w > -1.
# ---------------------------------------------------------------------------


def _exprel(z):
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _SERIES_Z
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z * (0.5 + z / 6.0), np.expm1(safe) / safe)


def _g2(z):
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _SERIES_Z
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z * (1.0 / 3.0 + z / 8.0), exact)


def _log1p_over(w):
    w = np.asarray(w, dtype=float)
    small = np.abs(w) < _SERIES_Z
    safe = np.where(small, 1.0, w)
    return np.where(small, 1.0 - w * (0.5 - w / 3.0), np.log1p(safe) / safe)


def _flow(coeffs, x, theta_idx, tess, want_grad=False, t_total=1.0):
    """Exact flow of piecewise-affine fields, vectorized over points.

    Parameters
    ----------
    coeffs : (K, n_cells, 2) array
        Per-cell (a, b) for K fields.
    x : (P,) array
        Start positions.  May lie outside [0, 1]; end cells extend affinely.
    theta_idx : (P,) int array
        Which field drives each point.
    want_grad : bool
        Also return the flow's gradient w.r.t. the interleaved coefficients,
        shape (P, 2 * n_cells), via implicit differentiation of the exact
        cell-exit times.
    t_total : float
        Integration time (1.0 gives the warp, other values are used by the
        scaling-and-squaring variant).
    """
    n = tess.n_cells
    verts = tess.vertices
    pos = np.array(x, dtype=float)
    P = pos.shape[0]
    A = coeffs[..., 0]
    Boff = coeffs[..., 1]

    cell = np.clip(np.floor(pos * n).astype(int), 0, n - 1)
    # A point sitting exactly on its cell's left vertex and moving left
    # belongs to the cell on the left.
    v_start = A[theta_idx, cell] * pos + Boff[theta_idx, cell]
    on_left = (pos == verts[cell]) & (v_start < 0.0) & (cell > 0)
    cell[on_left] -= 1

    trem = np.full(P, float(t_total))
    if want_grad:
        acc = np.zeros((P, 2 * n))
        fin_da = np.zeros(P)
        fin_db = np.zeros(P)

    hops = 0
    active = np.nonzero(trem > 0.0)[0]
    while active.size:
        hops += 1
        if hops > _HOP_FACTOR * n + 2:
            raise NumericalError("cell-hop bound exceeded; velocity field is not finite")
        c = cell[active]
        a = A[theta_idx[active], c]
        b = Boff[theta_idx[active], c]
        a = np.where(np.abs(a) < _EPS_A, 0.0, a)
        p = pos[active]
        v = a * p + b

        going_right = v > 0.0
        interior = np.where(going_right, c < n - 1, (v < 0.0) & (c > 0))
        y = np.where(going_right, verts[np.minimum(c + 1, n)], verts[c])
        vsafe = np.where(v == 0.0, 1.0, v)
        w = a * (y - p) / vsafe
        hit = interior & (v != 0.0) & (w > -1.0)
        t_hit = np.where(hit,
                         (y - p) / vsafe * _log1p_over(np.where(hit, w, 0.0)),
                         np.inf)

        finish = t_hit >= trem[active]
        s = np.where(finish, trem[active], t_hit)
        z = a * s
        ez = np.exp(z)
        newpos = np.where(finish, p * ez + b * s * _exprel(z), y)

        if want_grad:
            dfa = p * s * ez + b * s * s * _g2(z)
            dfb = s * _exprel(z)
            exit_idx = active[~finish]
            if exit_idx.size:
                vy = a[~finish] * y[~finish] + b[~finish]
                acc[exit_idx, 2 * c[~finish]] += dfa[~finish] / vy
                acc[exit_idx, 2 * c[~finish] + 1] += dfb[~finish] / vy
            fin_idx = active[finish]
            fin_da[fin_idx] = dfa[finish]
            fin_db[fin_idx] = dfb[finish]

        pos[active] = newpos
        trem[active] = np.where(finish, 0.0, trem[active] - s)
        cell[active] = np.where(finish, c, c + np.where(going_right, 1, -1))
        active = active[~finish]

    if not want_grad:
        return pos

    a_fin = A[theta_idx, cell]
    b_fin = Boff[theta_idx, cell]
    v_fin = a_fin * pos + b_fin
    grad = acc * v_fin[:, None]
    grad[np.arange(P), 2 * cell] += fin_da
    grad[np.arange(P), 2 * cell + 1] += fin_db
    return pos, grad


def _as_batch(basis: CpaBasis, theta):
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    single = theta.ndim == 1
    if single:
        theta = theta[None, :]
    if theta.shape[-1] != basis.d:
        raise ValueError(f"theta has length {theta.shape[-1]}, basis needs {basis.d}")
    return theta, single


def integrate_grid(basis: CpaBasis, theta, grid) -> np.ndarray:
    """Warp every grid point: T(grid) for one theta or a batch.

    Parameters
    ----------
    basis : CpaBasis
    theta : (d,) or (K, d) array
    grid : (M,) array of points in [0, 1]

    Returns
    -------
    (M,) or (K, M) array of warped positions.  Strictly increasing along M
    whenever ``grid`` is.
    """
    theta, single = _as_batch(basis, theta)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1:
        raise ValueError("grid must be one-dimensional")
    # Warped grids re-entering here (warp composition) carry float noise at
    # the endpoints: the basis satisfies the boundary constraints only to
    # machine precision, so T(0) can be a subnormal hair below zero.  Snap
    # such excursions onto the domain instead of rejecting them.
    if grid.size and (grid[0] < -_DOMAIN_TOL or grid[-1] > 1.0 + _DOMAIN_TOL
                      or np.any(np.diff(grid) < 0)):
        raise ValueError("grid must be nondecreasing inside [0, 1]")
    grid = np.clip(grid, 0.0, 1.0)
    K, M = theta.shape[0], grid.shape[0]
    coeffs = field_coefficients(basis, theta)
    x = np.tile(grid, K)
    idx = np.repeat(np.arange(K), M)
    out = _flow(coeffs, x, idx, basis.tess).reshape(K, M)
    return out[0] if single else out


def integrate(basis: CpaBasis, theta, x: float) -> float:
    """Warp a single point: T(x)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    return float(integrate_grid(basis, theta, np.array([x]))[..., 0])


def gradient_grid(basis: CpaBasis, theta, grid):
    """Warped grid and its exact Jacobian w.r.t. theta.

    Returns
    -------
    warped : (M,) or (K, M)
    jac : (M, d) or (K, M, d)
        ``jac[..., m, j] = d T(grid[m]) / d theta[j]``.
    """
    theta, single = _as_batch(basis, theta)
    grid = np.asarray(grid, dtype=float)
    K, M = theta.shape[0], grid.shape[0]
    coeffs = field_coefficients(basis, theta)
    x = np.tile(grid, K)
    idx = np.repeat(np.arange(K), M)
    pos, grad_ab = _flow(coeffs, x, idx, basis.tess, want_grad=True)
    jac = grad_ab @ basis.matrix
    pos = pos.reshape(K, M)
    jac = jac.reshape(K, M, basis.d)
    if single:
        return pos[0], jac[0]
    return pos, jac


def gradient(basis: CpaBasis, theta, x: float) -> np.ndarray:
    """Exact d T(x) / d theta for a single point, shape (d,)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    _, jac = gradient_grid(basis, theta, np.array([x]))
    return jac[0]


def inverse_grid(basis: CpaBasis, theta, grid) -> np.ndarray:
    """Apply the inverse warp to grid points: T^{-1} = flow along -theta."""
    theta = np.asarray(theta, dtype=float)
    return integrate_grid(basis, -theta, grid)


def inverse_point(basis: CpaBasis, theta, y: float) -> float:
    """Invert the warp at a single point.

    Under "free" and "circular" boundaries T maps [0, 1] to an interval that
    need not equal [0, 1]; the affine extension of the end cells still
    defines the flow, so any finite ``y`` is accepted.  "zero_boundary"
    warps fix the unit interval, and ``y`` must lie inside it.
    """
    theta, _ = _as_batch(basis, theta)
    if not np.isfinite(y):
        raise ValueError("y must be finite")
    if basis.tess.boundary == "zero_boundary":
        if not -_DOMAIN_TOL <= y <= 1.0 + _DOMAIN_TOL:
            raise ValueError("y must lie in [0, 1] for zero_boundary warps")
        y = min(max(float(y), 0.0), 1.0)
    coeffs = field_coefficients(basis, -theta)
    out = _flow(coeffs, np.array([float(y)]), np.zeros(1, dtype=int), basis.tess)
    return float(out[0])


def integrate_ss(basis: CpaBasis, theta, grid, n_squarings: int = 8) -> np.ndarray:
    """Approximate warp by scaling and squaring on a dense reference grid.

    The time-(2^-n_squarings) flow is computed exactly on a dense grid, then
    composed with itself ``n_squarings`` times via linear interpolation.
    This trades exactness for a fixed, branch-free composition loop; the
    result converges to :func:`integrate_grid` as the reference grid and
    ``n_squarings`` grow.
    """
    theta, single = _as_batch(basis, theta)
    grid = np.asarray(grid, dtype=float)
    K, M = theta.shape[0], grid.shape[0]
    n_ref = max(512, 8 * basis.tess.n_cells, 2 * M)
    ref = np.linspace(0.0, 1.0, n_ref)
    coeffs = field_coefficients(basis, theta)
    x = np.tile(ref, K)
    idx = np.repeat(np.arange(K), n_ref)
    f = _flow(coeffs, x, idx, basis.tess, t_total=2.0 ** (-n_squarings))
    f = f.reshape(K, n_ref)

    def interp_ext(fk, q):
        # Linear interior interpolation with linear extrapolation at the ends.
        out = np.interp(q, ref, fk)
        h = ref[1] - ref[0]
        lo = q < ref[0]
        hi = q > ref[-1]
        if np.any(lo):
            slope = (fk[1] - fk[0]) / h
            out[lo] = fk[0] + slope * (q[lo] - ref[0])
        if np.any(hi):
            slope = (fk[-1] - fk[-2]) / h
            out[hi] = fk[-1] + slope * (q[hi] - ref[-1])
        return out

    for _ in range(n_squarings):
        f = np.stack([interp_ext(f[k], f[k]) for k in range(K)])
    out = np.stack([interp_ext(f[k], grid) for k in range(K)])
    return out[0] if single else out


def build_prior(tess, lambda_sigma: float = 0.5, lambda_smooth: float = 0.5,
                jitter: float = 1e-8) -> PriorCovariance:
    """Smoothness-inducing Gaussian prior over theta.

    A squared-exponential kernel over cell centers correlates neighboring
    cells' coefficients (slopes with slopes, offsets with offsets, no
    cross-covariance); projecting through the basis gives the prior
    covariance in theta coordinates:

        Sigma = lambda_sigma^2 * B^T K B + jitter * I.

    ``lambda_sigma`` scales overall variance, ``lambda_smooth`` is the
    kernel length-scale.  The Cholesky factor is computed here; if it fails
    at the default jitter, the jitter escalates by decades up to 1e-6 before
    raising :class:`NumericalError`.
    """
    basis = tess if isinstance(tess, CpaBasis) else build_basis(tess)
    tess = basis.tess
    if lambda_sigma <= 0 or lambda_smooth <= 0:
        raise ValueError("lambda_sigma and lambda_smooth must be positive")
    centers = 0.5 * (tess.vertices[:-1] + tess.vertices[1:])
    d2 = (centers[:, None] - centers[None, :]) ** 2
    kcell = np.exp(-d2 / (2.0 * lambda_smooth ** 2))
    n = tess.n_cells
    kfull = np.zeros((2 * n, 2 * n))
    kfull[0::2, 0::2] = kcell
    kfull[1::2, 1::2] = kcell
    base = lambda_sigma ** 2 * (basis.matrix.T @ kfull @ basis.matrix)
    eye = np.eye(basis.d)
    eps = jitter
    while True:
        try:
            factor = scipy.linalg.cholesky(base + eps * eye, lower=True)
            break
        except scipy.linalg.LinAlgError:
            eps *= 10.0
            if eps > 1e-6 * 1.01:
                raise NumericalError("prior covariance is not positive definite")
    return PriorCovariance(sigma=base + eps * eye, factor=factor,
                           lambda_sigma=float(lambda_sigma),
                           lambda_smooth=float(lambda_smooth))


def sample_prior(prior: PriorCovariance, rng, size=None) -> np.ndarray:
    """Draw theta ~ N(0, Sigma).  ``rng`` is a seed or a numpy Generator."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d = prior.sigma.shape[0]
    if size is None:
        return prior.factor @ rng.standard_normal(d)
    return rng.standard_normal((size, d)) @ prior.factor.T
