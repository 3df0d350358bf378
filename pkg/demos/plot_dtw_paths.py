# -*- coding: utf-8 -*-
"""
Dynamic time warping: exact paths and soft relaxations
======================================================

Exact DTW finds the cheapest monotone association between two sequences by
dynamic programming.  The soft variant replaces the hard minimum in the
recursion with a smoothed soft-minimum controlled by ``gamma``: at
``gamma = 0`` it reproduces exact DTW, and for ``gamma > 0`` it is a lower
bound that is differentiable in the inputs — the gradient weighs every
alignment path by its softmin occupancy.

The demo aligns two differently-warped copies of the same shape, draws the
optimal path over the pairwise cost matrix (with and without a Sakoe-Chiba
band), and shows how the soft cost approaches the exact one as gamma
shrinks.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tsalign import baselines
from tsalign.warping import Signal

###############################################################################
# Two warped variants of one bump pattern.

n = 80
t = np.linspace(0, 1, n)


def bumps(centers):
    return sum(np.exp(-0.5 * ((t - c) / 0.05) ** 2) for c in centers)


u = Signal(values=bumps([0.25, 0.6])[None, :])
w = Signal(values=bumps([0.35, 0.7])[None, :])

###############################################################################
# Exact DTW, unconstrained and banded.  The band limits how far the path
# may stray from the diagonal (in 1-based index units), which both speeds
# up the computation and regularizes the association.

full = baselines.dtw(u, w)
banded = baselines.dtw(u, w, band=8)
print(f"DTW cost: unconstrained {full.cost:.4f}, band=8 {banded.cost:.4f}")

cost = (u.values[0][:, None] - w.values[0][None, :]) ** 2

fig, axes = plt.subplots(1, 2, figsize=(11, 5))
for ax, result, title in ((axes[0], full, "unconstrained"),
                          (axes[1], banded, "Sakoe-Chiba band = 8")):
    ax.imshow(cost, origin="lower", cmap="viridis", aspect="auto")
    path = np.array(result.path)
    ax.plot(path[:, 1], path[:, 0], "r-", lw=2)
    ax.set_title(f"{title}: cost {result.cost:.3f}")
    ax.set_xlabel("index in second signal")
axes[0].set_ylabel("index in first signal")
fig.tight_layout()
fig.savefig("demo_dtw_paths.png", dpi=120)
print("saved demo_dtw_paths.png")

###############################################################################
# Soft-DTW: a differentiable lower bound converging to the exact cost.

gammas = np.logspace(0, -4, 13)
soft = [baselines.soft_dtw(u, w, gamma=g) for g in gammas]

fig2, ax = plt.subplots(figsize=(6, 4))
ax.semilogx(gammas, soft, "o-", label="soft cost")
ax.axhline(full.cost, color="k", ls="--", label="exact DTW")
ax.set_xlabel("gamma")
ax.set_ylabel("cost")
ax.invert_xaxis()
ax.legend()
ax.set_title("soft-DTW converges to exact DTW as gamma -> 0")
fig2.tight_layout()
fig2.savefig("demo_soft_dtw.png", dpi=120)
print("saved demo_soft_dtw.png")

###############################################################################
# The gradient of the soft cost with respect to the first signal's values
# is exactly what the soft barycenter iteration descends.

value, grad = baselines.soft_dtw_grad(u, w, gamma=0.1)
print(f"soft cost {value:.4f}; gradient norm {np.linalg.norm(grad):.4f}")
