"""Alignment objectives and their exact gradients.

Four loss kinds over a batch of warped signals:

- ``wcss``: within-class sum of squares around per-class centroids,
  sum_k (1/N_k) sum_{i in k} ||v_i - mu_k||^2.
- ``wcss_reg``: wcss plus the Gaussian smoothness penalty
  sum_i theta_i^T Sigma^{-1} theta_i.
- ``icae``: inverse-consistency averaging error — warp the batch, form
  class centroids, warp each centroid *back* through the signal's inverse
  warp, and penalize sum_k (1/N_k) sum_{i in k} ||mu_k o T^{-theta_i} - u_i||^2
  (squared norm).  Back-warping the average discourages the degenerate
  "squeeze everything into one flat region" solutions that plain variance
  minimization admits.
- ``icae_triplet``: icae plus a hinge separating the back-warped own-class
  centroid from the nearest other-class centroid by a margin.

Gradients are assembled by hand through the resampler and warp Jacobians;
:func:`loss_gradients` covers the single-warp case, while
:func:`alignment_terms` exposes the pieces (d loss / d aligned values plus
per-stage direct theta contributions) that the recurrent trainer chains
through its own rollout.

Variable-length batches use validity masks everywhere: class means divide
by per-timestep valid counts, and distances run over jointly valid samples.
Mask resampling is piecewise constant in theta and is treated as such (its
contribution to gradients is zero almost everywhere).
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from . import cpab
from .warping import Signal, make_grid, resample, resample_backward

LOSS_KINDS = ("wcss", "wcss_reg", "icae", "icae_triplet")


@dataclass
class LossConfig:
    kind: str = "wcss"
    lambda_sigma: float = 0.5
    lambda_smooth: float = 0.5
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("triplet margin must be nonnegative")
        if self.lambda_sigma <= 0 or self.lambda_smooth <= 0:
            raise ValueError("prior hyperparameters must be positive")

    @property
    def needs_inverse(self) -> bool:
        return self.kind in ("icae", "icae_triplet")


@dataclass
class ClassCentroids:
    classes: np.ndarray  # (K,) sorted class ids
    means: np.ndarray  # (K, C, M)
    counts: np.ndarray  # (K, M) valid contributors per timestep
    sizes: np.ndarray  # (K,) signals per class

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0


def _stack(signals: List[Signal], labels=None):
    if not signals:
        raise ValueError("empty batch")
    shape = signals[0].values.shape
    if any(s.values.shape != shape for s in signals):
        raise ValueError("signals in a batch must share (C, M) shape")
    values = np.stack([s.values for s in signals])
    any_mask = any(s.mask is not None for s in signals)
    if any_mask:
        vmask = np.stack([np.ones(shape[1]) if s.mask is None else s.mask.astype(float)
                          for s in signals])
    else:
        vmask = np.ones((len(signals), shape[1]))
    if labels is None:
        labels = [s.label for s in signals]
    labels = np.array([0 if y is None else int(y) for y in labels])
    return values, vmask, labels, any_mask


def class_means(aligned: List[Signal], labels=None) -> ClassCentroids:
    """Per-class masked mean signals.

    For each class and timestep, the mean of the class members valid there:
    mu_k[t] = sum_{i in k, valid} v_i[t] / N_valid[t].  Timesteps where no
    member is valid get count 0 and mean 0 (flagged by ``valid``).
    Accumulation runs sequentially in ascending class id then sample index.
    """
    values, vmask, labels, _ = _stack(aligned, labels)
    n, c, m = values.shape
    classes = np.unique(labels)
    means = np.zeros((classes.size, c, m))
    counts = np.zeros((classes.size, m))
    sizes = np.zeros(classes.size, dtype=int)
    for k, cls in enumerate(classes):
        idx = np.nonzero(labels == cls)[0]
        sizes[k] = idx.size
        acc = np.zeros((c, m))
        cnt = np.zeros(m)
        for i in idx:
            acc += values[i] * vmask[i]
            cnt += vmask[i]
        counts[k] = cnt
        with np.errstate(invalid="ignore"):
            means[k] = np.where(cnt > 0, acc / np.maximum(cnt, 1.0), 0.0)
    return ClassCentroids(classes=classes, means=means, counts=counts, sizes=sizes)


def wcss(aligned: List[Signal], labels=None, centroids: Optional[ClassCentroids] = None) -> float:
    """Within-class sum of squares: sum_k (1/N_k) sum_{i in k} ||v_i - mu_k||^2.

    Variable-length sums run over the signal's valid timesteps only.
    """
    values, vmask, labels, _ = _stack(aligned, labels)
    if centroids is None:
        centroids = class_means(aligned, labels)
    total = 0.0
    for k, cls in enumerate(centroids.classes):
        idx = np.nonzero(labels == cls)[0]
        if idx.size == 0:
            raise ValueError(f"class {cls} has no members in the batch")
        acc = 0.0
        for i in idx:
            diff = (values[i] - centroids.means[k]) * vmask[i]
            acc += float(np.sum(diff * diff))
        total += acc / idx.size
    return total


def cpa_regularizer(thetas, prior: cpab.PriorCovariance) -> float:
    """sum_i theta_i^T Sigma^{-1} theta_i via triangular solves."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != prior.sigma.shape[0]:
        raise ValueError("theta dimension does not match the prior")
    w = scipy.linalg.solve_triangular(prior.factor, thetas.T, lower=True)
    return float(np.sum(w * w))


def _regularizer_grad(thetas, prior: cpab.PriorCovariance) -> np.ndarray:
    """d/d theta of the quadratic form: 2 Sigma^{-1} theta, per row."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    return 2.0 * scipy.linalg.cho_solve((prior.factor, True), thetas.T).T


@dataclass
class StageData:
    """Everything one warp stage exposes to the gradient assembly."""

    thetas: np.ndarray  # (N, d)
    warped_grids: np.ndarray  # (N, M): T^{theta_i}(G)
    inv_grids: Optional[np.ndarray] = None  # (N, M): T^{-theta_i}(G)
    jac: Optional[np.ndarray] = None  # (N, M, d): d warped / d theta
    inv_jac: Optional[np.ndarray] = None  # (N, M, d): d T^{psi}(G)/d psi at psi=-theta


def make_stage(basis: cpab.CpaBasis, thetas: np.ndarray, m: int,
               want_inverse: bool, want_jac: bool) -> StageData:
    grid = make_grid(m)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if want_jac:
        warped, jac = cpab.gradient_grid(basis, thetas, grid)
    else:
        warped, jac = cpab.integrate_grid(basis, thetas, grid), None
    inv = inv_jac = None
    if want_inverse:
        if want_jac:
            inv, inv_jac = cpab.gradient_grid(basis, -thetas, grid)
        else:
            inv = cpab.integrate_grid(basis, -thetas, grid)
    return StageData(thetas=thetas, warped_grids=warped, inv_grids=inv,
                     jac=jac, inv_jac=inv_jac)


def _centroid_signal(centroids: ClassCentroids, k: int, masked: bool) -> Signal:
    return Signal(centroids.means[k],
                  mask=centroids.valid[k] if masked else None)


def _backwarp_chain(mu: Signal, stages: List[StageData], i: int):
    """Resample a centroid through the signal's inverse warps, last stage
    first, returning the result and the per-step cache for the backward pass."""
    cache = []
    current = mu
    for stage in reversed(stages):
        grid = stage.inv_grids[i]
        cache.append((current, grid))
        current = resample(current, grid)
    return current, cache


def _backwarp_chain_backward(cache, stages: List[StageData], i: int,
                             upstream: np.ndarray, stage_grads: np.ndarray):
    """Backprop through the inverse-resampling chain.

    Adds each stage's theta contribution into ``stage_grads`` (R, N, d) and
    returns d loss / d centroid values.
    """
    g = upstream
    # The forward chain resamples with the last stage's inverse grid first,
    # so cache[j] pairs with stage index len(stages)-1-j; walk it in reverse.
    for step, stage in enumerate(stages):
        src, grid = cache[len(cache) - 1 - step]
        grad_vals, grad_p = resample_backward(src, grid, g)
        # d grid / d theta = -inv_jac (the chain rule through psi = -theta);
        # grad_p is in index units, positions are x * (M_src - 1).
        stage_grads[step, i] -= stage.inv_jac[i].T @ (grad_p * (src.length - 1))
        g = grad_vals
    return g


@dataclass
class AlignmentTerms:
    loss: float
    centroids: ClassCentroids
    grad_aligned: Optional[np.ndarray] = None  # (N, C, M)
    stage_grads: Optional[np.ndarray] = None  # (R, N, d)
    triplet_value: float = 0.0


def alignment_terms(config: LossConfig, originals: List[Signal],
                    aligned: List[Signal], labels, stages: List[StageData],
                    basis: cpab.CpaBasis, prior: Optional[cpab.PriorCovariance],
                    want_grad: bool = True) -> AlignmentTerms:
    """Loss value plus the gradient pieces shared by all training paths.

    ``grad_aligned`` is d loss / d (aligned values); ``stage_grads`` holds
    the *direct* per-stage theta gradients (inverse-warp chains and the
    regularizer).  The caller owns backpropagation of ``grad_aligned``
    through its forward resampling chain.
    """
    values, vmask, labels, any_mask = _stack(aligned, labels)
    orig_values, orig_vmask, _, _ = _stack(originals, labels)
    n, c, m = values.shape
    r = len(stages)
    d = basis.d
    centroids = class_means(aligned, labels)
    cls_row = {cls: k for k, cls in enumerate(centroids.classes)}

    grad_aligned = np.zeros((n, c, m)) if want_grad else None
    stage_grads = np.zeros((r, n, d)) if want_grad else None
    grad_mu = np.zeros_like(centroids.means) if want_grad else None

    loss = 0.0
    triplet_value = 0.0

    if config.kind in ("wcss", "wcss_reg"):
        loss = wcss(aligned, labels, centroids)
        if want_grad:
            for i in range(n):
                k = cls_row[labels[i]]
                jm = vmask[i] * centroids.valid[k]
                grad_aligned[i] = (2.0 / centroids.sizes[k]) \
                    * (values[i] - centroids.means[k]) * jm
        if config.kind == "wcss_reg":
            if prior is None:
                raise ValueError("wcss_reg requires a prior")
            all_thetas = np.concatenate([s.thetas for s in stages], axis=0)
            loss += cpa_regularizer(all_thetas, prior)
            if want_grad:
                for ridx, stage in enumerate(stages):
                    stage_grads[ridx] += _regularizer_grad(stage.thetas, prior)
    else:
        # Back-warp each signal's class centroid through its inverse warps.
        backwarped = []
        caches = []
        for i in range(n):
            k = cls_row[labels[i]]
            mu = _centroid_signal(centroids, k, any_mask)
            b, cache = _backwarp_chain(mu, stages, i)
            backwarped.append(b)
            caches.append(cache)
        for i in range(n):
            k = cls_row[labels[i]]
            b = backwarped[i]
            jm = orig_vmask[i] * (np.ones(m) if b.mask is None else b.mask)
            diff = (b.values - orig_values[i]) * jm
            term = float(np.sum(diff * diff))
            loss += term / centroids.sizes[k]
            if want_grad:
                upstream = (2.0 / centroids.sizes[k]) * diff
                gm = _backwarp_chain_backward(caches[i], stages, i, upstream,
                                              stage_grads)
                grad_mu[k] += gm

        if config.kind == "icae_triplet":
            kk = centroids.classes.size
            inv_m = 1.0 / n
            for i in range(n):
                if kk < 2:
                    break
                k = cls_row[labels[i]]
                b_pos = backwarped[i]
                jm_p = orig_vmask[i] * (np.ones(m) if b_pos.mask is None
                                        else b_pos.mask)
                diff_p = (b_pos.values - orig_values[i]) * jm_p
                d_pos = float(np.sum(diff_p * diff_p))
                # Hardest negative: the other-class centroid closest to the
                # anchor after back-warping through the anchor's warp.
                best = None
                for k_neg in range(kk):
                    if k_neg == k:
                        continue
                    mu_n = _centroid_signal(centroids, k_neg, any_mask)
                    b_neg, cache_n = _backwarp_chain(mu_n, stages, i)
                    jm_n = orig_vmask[i] * (np.ones(m) if b_neg.mask is None
                                            else b_neg.mask)
                    diff_n = (b_neg.values - orig_values[i]) * jm_n
                    d_neg = float(np.sum(diff_n * diff_n))
                    if best is None or d_neg < best[0]:
                        best = (d_neg, k_neg, diff_n, cache_n)
                d_neg, k_neg, diff_n, cache_n = best
                hinge = d_pos - d_neg + config.alpha
                if hinge > 0.0:
                    triplet_value += inv_m * hinge
                    if want_grad:
                        gm = _backwarp_chain_backward(
                            caches[i], stages, i, inv_m * 2.0 * diff_p, stage_grads)
                        grad_mu[k] += gm
                        gm = _backwarp_chain_backward(
                            cache_n, stages, i, -inv_m * 2.0 * diff_n, stage_grads)
                        grad_mu[k_neg] += gm
            loss += triplet_value

        if want_grad:
            # Distribute centroid gradients to the aligned signals:
            # mu_k[t] = sum_j m_j[t] v_j[t] / count[t].
            for i in range(n):
                k = cls_row[labels[i]]
                w = np.where(centroids.counts[k] > 0,
                             vmask[i] / np.maximum(centroids.counts[k], 1.0), 0.0)
                grad_aligned[i] = grad_mu[k] * w

    return AlignmentTerms(loss=loss, centroids=centroids,
                          grad_aligned=grad_aligned, stage_grads=stage_grads,
                          triplet_value=triplet_value)


def icae(originals: List[Signal], thetas, labels=None,
         basis: Optional[cpab.CpaBasis] = None) -> float:
    """Inverse-consistency averaging error for one warp per signal."""
    if basis is None:
        raise ValueError("icae requires the warp basis")
    m = originals[0].length
    stage = make_stage(basis, thetas, m, want_inverse=True, want_jac=False)
    aligned = [resample(s, stage.warped_grids[i]) for i, s in enumerate(originals)]
    cfg = LossConfig(kind="icae")
    terms = alignment_terms(cfg, originals, aligned, labels, [stage], basis,
                            None, want_grad=False)
    return terms.loss


def icae_triplet(anchor: Signal, mu_p: Signal, mu_n: Signal, theta,
                 basis: cpab.CpaBasis, alpha: float = 1.0) -> float:
    """Single-anchor hinge: max(0, d+ - d- + alpha) with both centroids
    back-warped by the anchor's inverse warp (squared distances)."""
    if mu_p.values.shape != anchor.values.shape or mu_n.values.shape != anchor.values.shape:
        raise ValueError("centroid shapes must match the anchor")
    grid = make_grid(anchor.length)
    inv = cpab.integrate_grid(basis, -np.asarray(theta, dtype=float), grid)
    am = np.ones(anchor.length) if anchor.mask is None else anchor.mask.astype(float)

    def dist(mu):
        b = resample(mu, inv)
        jm = am * (np.ones(anchor.length) if b.mask is None else b.mask)
        diff = (b.values - anchor.values) * jm
        return float(np.sum(diff * diff))

    return max(0.0, dist(mu_p) - dist(mu_n) + alpha)


def loss_gradients(config: LossConfig, batch: List[Signal], thetas,
                   basis: cpab.CpaBasis, prior: Optional[cpab.PriorCovariance] = None,
                   labels=None):
    """Loss and exact d loss / d theta for one warp per signal.

    The chain runs: loss -> aligned values -> resampler backward (values and
    positions) -> warp Jacobian -> theta; inverse-warp and regularizer terms
    are added where the loss kind requires them.

    Returns
    -------
    grad_thetas : (N, d) array
    loss : float
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = len(batch)
    if thetas.shape[0] != n:
        raise ValueError("one theta row per signal required")
    m = batch[0].length
    stage = make_stage(basis, thetas, m, want_inverse=config.needs_inverse,
                       want_jac=True)
    aligned = [resample(s, stage.warped_grids[i]) for i, s in enumerate(batch)]
    terms = alignment_terms(config, batch, aligned, labels, [stage], basis, prior)
    grad_thetas = terms.stage_grads[0].copy()
    for i in range(n):
        _, grad_p = resample_backward(batch[i], stage.warped_grids[i],
                                      terms.grad_aligned[i])
        grad_thetas[i] += stage.jac[i].T @ (grad_p * (m - 1))
    return grad_thetas, terms.loss
