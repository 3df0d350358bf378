"""Shared test utilities: gradient comparison and small signal factories."""

import numpy as np

from tsalign.warping import Signal


def assert_grad_close(got, want, rtol, floor=1e-8):
    """Relative comparison with an absolute floor for near-zero entries."""
    got = np.asarray(got, float)
    want = np.asarray(want, float)
    small = np.abs(got) < floor
    err = np.abs(got - want)
    rel = err / np.maximum(np.abs(want), floor)
    ok = np.where(small, err < rtol, rel < rtol)
    assert np.all(ok), f"max rel {rel.max():.3e}, max abs {err.max():.3e}"


def smooth_batch(rng, n, m, n_classes=2, channels=1):
    """Random smooth labeled signals (sums of a few sinusoids)."""
    x = np.linspace(0.0, 1.0, m)
    out = []
    for i in range(n):
        label = i % n_classes
        vals = np.zeros((channels, m))
        for c in range(channels):
            for _ in range(3):
                f = rng.integers(1, 4)
                vals[c] += rng.normal() * np.sin(2 * np.pi * f * x + rng.uniform(0, 2 * np.pi))
        vals += 0.5 * label
        out.append(Signal(vals, label=label))
    return out
