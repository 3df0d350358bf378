# -*- coding: utf-8 -*-
"""
Four ways to average misaligned signals
=======================================

Averaging time series that are warped versions of a common shape is the
canonical failure case of the pointwise mean: peaks land at different
positions, so the mean smears them out.  This demo compares four averages
of one synthetic class:

* **Euclidean mean** — the pointwise average; fast and wrong under warping.
* **DBA** — iterative refinement under exact dynamic time warping; each
  round re-associates samples via DTW paths and re-averages, and its
  objective never increases.
* **Soft-DTW barycenter** — gradient descent on the smoothed (gamma > 0)
  DTW cost, which is differentiable everywhere.
* **Trained alignment network** — warp every signal to a common timing
  with a learned diffeomorphism, then take the plain mean of the aligned
  ensemble.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tsalign import baselines, cpab, data, locnet, losses

###############################################################################
# One class of warped bumps.

spec = data.SynthSpec(bases=data.default_bases(4, 128)[:1], per_class=20,
                      test_per_class=0, noise=0.03, seed=1)
dataset = data.gen_synthetic(spec)
ensemble = dataset.train
values = np.stack([s.values[0] for s in ensemble])

###############################################################################
# The three classical averages.

euclidean_mean = values.mean(axis=0)
dba_result = baselines.dba(ensemble, iters=10)
soft_result = baselines.soft_dtw_barycenter(ensemble, gamma=0.1, iters=60,
                                            lr=0.02)
print("DBA objective trace (never increases):",
      np.round(dba_result.objective, 2))

###############################################################################
# The learned average: short alignment training on this single class, then
# the pointwise mean of the aligned signals.

tess = cpab.build_tessellation(16, "zero_boundary")
basis = cpab.build_basis(tess)
model = locnet.init_model(tess, basis, locnet.ArchSpec(), seed=0,
                          channels=1, input_length=128, n_recurrences=4,
                          loss_config=losses.LossConfig(kind="icae"))
model, _ = locnet.train(model, ensemble, locnet.TrainConfig(
    epochs=60, batch_size=20, learning_rate=1e-3, seed=0))
aligned, _ = locnet.align_new(model, ensemble)
dtan_mean = np.mean([a.values[0] for a in aligned], axis=0)

###############################################################################
# Plot the ensemble behind each candidate average.

titles = ("Euclidean mean", "DBA", "Soft-DTW barycenter",
          "alignment network + mean")
curves = (euclidean_mean, dba_result.barycenter.values[0],
          soft_result.barycenter.values[0], dtan_mean)

fig, axes = plt.subplots(4, 1, figsize=(8, 11), sharex=True)
for ax, title, curve in zip(axes, titles, curves):
    for row in values:
        ax.plot(row, "k-", alpha=0.15, lw=0.6)
    ax.plot(curve, "r-", lw=2)
    ax.set_title(title)
fig.tight_layout()
fig.savefig("demo_barycenters.png", dpi=120)
print("saved demo_barycenters.png")
