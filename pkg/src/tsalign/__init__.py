"""Joint alignment and averaging of time-series ensembles.

Warps are diffeomorphisms of [0, 1] parametrized by continuous
piecewise-affine velocity fields (:mod:`tsalign.cpab`), applied to signals
by differentiable linear resampling (:mod:`tsalign.warping`).  Alignment is
learned by a convolutional localization network (:mod:`tsalign.locnet`)
trained against within-class variance or inverse-consistency losses
(:mod:`tsalign.losses`), and compared to dynamic-time-warping baselines
(:mod:`tsalign.baselines`) with the metrics in :mod:`tsalign.evaluation`.
"""

__version__ = "0.1.0"
