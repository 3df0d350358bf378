"""Alignment quality metrics: NCC, PCA, variance reduction, and timing.

- :func:`ncc_evaluate`: nearest-centroid classification.  With a trained
  alignment model, train signals are aligned, per-class centroids are their
  masked means, test samples are aligned the same way, and the metric is
  Euclidean; with the ``"dba"`` / ``"softdba"`` baselines the centroids are
  barycenters and the test metric is the matching (soft) DTW cost; with
  ``"euclidean"`` everything happens on the raw signals.
- :func:`pca_aligned`: mean-centered SVD of an aligned ensemble with k-PC
  reconstructions and their unwarped (inverse-warped) counterparts.
- :func:`variance_reduction`: 1 - WCSS(aligned)/WCSS(raw), with a flag when
  alignment made things worse.
- :func:`timing_harness`: the batch-of-30 averaging protocol — wall time to
  produce the average of a fresh batch, repeated, plus one-time fit cost.

Output helpers expose the structured-text formats used by the command-line
tools: JSON metric files and comma-separated plot tables.
"""

import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import baselines, cpab, locnet, losses
from .warping import Signal, make_grid, resample

NCC_METHODS = ("euclidean", "dba", "softdba")


@dataclass
class NccReport:
    """Nearest-centroid classification outcome for a single method."""

    method: str
    accuracy: float
    classes: np.ndarray  # (K,) class ids
    centroid_distances: np.ndarray  # (N_test, K)
    confusion: np.ndarray  # (K, K) true class x predicted class counts
    predictions: np.ndarray  # (N_test,)


@dataclass
class PcaResult:
    """Centered SVD of an aligned ensemble plus reconstructions.

    ``left`` (N, r), ``singular_values`` (r,) descending, ``right`` (r, C*M)
    reconstruct the centered data matrix; ``explained`` are the squared
    singular values normalized to sum 1.  ``reconstructions`` are the k-PC
    reconstructions in aligned coordinates, ``unwarped`` the same curves
    carried back through each signal's inverse warp.
    """

    singular_values: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mean: np.ndarray  # (C, M)
    explained: np.ndarray
    k: int
    reconstructions: np.ndarray  # (N, C, M)
    unwarped: np.ndarray  # (N, C, M)


@dataclass
class VarianceReduction:
    """1 - WCSS(aligned)/WCSS(raw); ``negative`` flags a worse-than-raw fit."""

    value: float
    wcss_raw: float
    wcss_aligned: float

    @property
    def negative(self) -> bool:
        return self.value < 0.0


@dataclass
class TimingReport:
    """One-time fit cost plus repeated batch-averaging wall times."""

    method: str
    train_time: float
    inference_times: List[float]

    @property
    def inference_mean(self) -> float:
        return float(np.mean(self.inference_times))

    @property
    def inference_median(self) -> float:
        return float(np.median(self.inference_times))


def _signals_of(obj) -> List[Signal]:
    if hasattr(obj, "train"):
        return list(obj.train)
    return list(obj)


def _labels_of(signals: List[Signal]) -> np.ndarray:
    return np.array([0 if s.label is None else int(s.label) for s in signals])


def _masked_sqdist(signal: Signal, centroid: np.ndarray,
                   centroid_valid: np.ndarray) -> float:
    valid = np.ones(signal.length, dtype=bool) if signal.mask is None else signal.mask
    joint = valid & centroid_valid
    diff = (signal.values - centroid) * joint
    return float(np.sum(diff * diff))


def ncc_evaluate(method, train, test, *, gamma: float = 0.1,
                 barycenter_iters: int = 10, lr: float = 0.1,
                 n_recurrences: Optional[int] = None) -> NccReport:
    """Nearest-centroid classification of ``test`` against ``train``.

    ``method`` is a trained alignment model (Euclidean metric after
    alignment), or one of ``"euclidean"``, ``"dba"``, ``"softdba"``.
    Every class present in the test set must appear in the train set.
    """
    train = _signals_of(train)
    test = _signals_of(test)
    if not train or not test:
        raise ValueError("train and test sets must be non-empty")
    if hasattr(method, "weights"):
        aligned_train, _ = locnet.rdtan_apply(method, train, n_recurrences)
    elif method == "euclidean":
        aligned_train = train
    elif method in ("dba", "softdba"):
        aligned_train = None
    else:
        raise ValueError(f"unknown method {method!r}; expected a model or one "
                         f"of {NCC_METHODS}")

    train_labels = _labels_of(train)
    test_labels = _labels_of(test)
    classes = np.unique(train_labels)
    missing = set(test_labels) - set(classes)
    if missing:
        raise ValueError(f"test classes absent from the train set: "
                         f"{sorted(missing)}")
    k = classes.size

    if aligned_train is not None:
        centroids = losses.class_means(aligned_train, train_labels)
        if hasattr(method, "weights"):
            aligned_test, _ = locnet.rdtan_apply(method, test, n_recurrences)
        else:
            aligned_test = test
        dist = np.zeros((len(test), k))
        for i, sig in enumerate(aligned_test):
            for j in range(k):
                dist[i, j] = _masked_sqdist(sig, centroids.means[j],
                                            centroids.valid[j])
    else:
        dist = np.zeros((len(test), k))
        for j, cls in enumerate(classes):
            members = [s for s, lab in zip(train, train_labels) if lab == cls]
            if method == "dba":
                center = baselines.dba(members, iters=barycenter_iters)
                for i, sig in enumerate(test):
                    dist[i, j] = baselines.dtw(sig, center.barycenter).cost
            else:
                center = baselines.soft_dtw_barycenter(
                    members, gamma=gamma, iters=barycenter_iters, lr=lr)
                for i, sig in enumerate(test):
                    dist[i, j] = baselines.soft_dtw(sig, center.barycenter,
                                                    gamma)

    predictions = classes[np.argmin(dist, axis=1)]
    accuracy = float(np.mean(predictions == test_labels))
    confusion = np.zeros((k, k), dtype=int)
    row = {cls: idx for idx, cls in enumerate(classes)}
    for true, pred in zip(test_labels, predictions):
        confusion[row[true], row[pred]] += 1
    name = method if isinstance(method, str) else "dtan"
    return NccReport(method=name, accuracy=accuracy, classes=classes,
                     centroid_distances=dist, confusion=confusion,
                     predictions=predictions)


def _stage_thetas(thetas) -> List[np.ndarray]:
    if isinstance(thetas, (list, tuple)):
        return [np.atleast_2d(np.asarray(t, dtype=float)) for t in thetas]
    return [np.atleast_2d(np.asarray(thetas, dtype=float))]


def pca_aligned(aligned, thetas, basis: cpab.CpaBasis, k: int) -> PcaResult:
    """Principal components of an aligned ensemble, with reconstructions.

    The ensemble matrix (one flattened signal per row) is centered on its
    mean and decomposed by SVD.  The k leading components reconstruct each
    aligned signal; resampling those reconstructions through the signals'
    inverse warps (stage lists are applied in reverse order) gives models of
    the signals in their original, unaligned coordinates.
    """
    signals = _signals_of(aligned)
    n = len(signals)
    if n == 0:
        raise ValueError("empty ensemble")
    c, m = signals[0].values.shape
    x = np.stack([s.values.reshape(-1) for s in signals])
    if not 1 <= k <= min(n, x.shape[1]):
        raise ValueError(f"k must lie in [1, {min(n, x.shape[1])}]")
    mean = x.mean(axis=0)
    centered = x - mean
    left, sing, right = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(sing ** 2))
    if total == 0.0:
        raise ValueError("ensemble has zero variance around its mean")
    explained = sing ** 2 / total

    recon = (left[:, :k] * sing[:k]) @ right[:k] + mean
    recon = recon.reshape(n, c, m)

    stages = _stage_thetas(thetas)
    grid = make_grid(m)
    inv_grids = [cpab.integrate_grid(basis, -t, grid) for t in stages]
    unwarped = np.empty_like(recon)
    for i in range(n):
        current = Signal(recon[i])
        for inv in reversed(inv_grids):
            current = resample(current, inv[i])
        unwarped[i] = current.values
    return PcaResult(singular_values=sing, left=left, right=right,
                     mean=mean.reshape(c, m), explained=explained, k=k,
                     reconstructions=recon, unwarped=unwarped)


def variance_reduction(raw, aligned, labels=None) -> VarianceReduction:
    """Within-class variance removed by alignment: 1 - WCSS(aligned)/WCSS(raw)."""
    raw = _signals_of(raw)
    aligned = _signals_of(aligned)
    if len(raw) != len(aligned):
        raise ValueError("raw and aligned ensembles must match in size")
    wcss_raw = losses.wcss(raw, labels)
    if wcss_raw == 0.0:
        raise ValueError("raw ensemble has zero within-class variance")
    wcss_aligned = losses.wcss(aligned, labels)
    return VarianceReduction(value=1.0 - wcss_aligned / wcss_raw,
                             wcss_raw=wcss_raw, wcss_aligned=wcss_aligned)


def _cycle_batch(signals: List[Signal], size: int) -> List[Signal]:
    if not signals:
        raise ValueError("no signals to batch")
    return [signals[i % len(signals)] for i in range(size)]


def timing_harness(method, dataset, repeats: int = 5, *, batch_size: int = 30,
                   model=None, train_config=None, gamma: float = 0.1,
                   barycenter_iters: int = 10, lr: float = 0.1) -> TimingReport:
    """Wall-time of averaging a fresh batch, per the batch-of-30 protocol.

    Each repeat times the full production of an average for a batch of
    ``batch_size`` held-out signals (model alignment + mean, or a DBA /
    SoftDTW barycenter run).  ``"dtan"`` additionally measures its one-time
    training cost, unless a pre-trained ``model`` is supplied.  Thread
    pinning for comparable numbers is the caller's responsibility (set BLAS
    thread environment variables before importing; the CLI's --threads flag
    does this).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    held_out = dataset.test if getattr(dataset, "test", None) else None
    pool = held_out if held_out else _signals_of(dataset)
    batch = _cycle_batch(pool, batch_size)

    train_time = 0.0
    if isinstance(method, str) and method == "dtan" or hasattr(method, "weights"):
        if hasattr(method, "weights"):
            model = method
        if model is None:
            sample = pool[0]
            tess = cpab.build_tessellation(16, "zero_boundary")
            basis = cpab.build_basis(tess)
            arch = locnet.ArchSpec()
            model = locnet.init_model(tess, basis, arch, seed=0,
                                      channels=sample.n_channels,
                                      input_length=sample.length)
            config = train_config or locnet.TrainConfig(epochs=50)
            start = time.perf_counter()
            model, _ = locnet.train(model, _signals_of(dataset), config)
            train_time = time.perf_counter() - start

        def produce():
            aligned, _ = locnet.rdtan_apply(model, batch)
            return np.mean([s.values for s in aligned], axis=0)
    elif method == "dba":
        def produce():
            return baselines.dba(batch, iters=barycenter_iters)
    elif method == "softdba":
        def produce():
            return baselines.soft_dtw_barycenter(batch, gamma=gamma,
                                                 iters=barycenter_iters, lr=lr)
    else:
        raise ValueError(f"unknown timing method {method!r}")

    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        produce()
        times.append(time.perf_counter() - start)
    name = method if isinstance(method, str) else "dtan"
    return TimingReport(method=name, train_time=train_time,
                        inference_times=times)


# ---------------------------------------------------------------------------
# Structured outputs


def write_metrics(path, metrics: Dict) -> None:
    """Write a flat metrics dict as sorted-key JSON text."""

    def clean(v):
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, np.ndarray):
            return v.tolist()
        return v

    with open(path, "w") as fh:
        json.dump({k: clean(v) for k, v in metrics.items()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


def write_table(path, header: Sequence[str], rows) -> None:
    """Write a comma-separated plot table with a header line."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.9g}" if isinstance(v, float)
                              else str(v) for v in row) + "\n")
