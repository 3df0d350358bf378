"""Localization network: predicts warp parameters from signals, trains by
manual backpropagation, and composes warps recurrently.

The network is a compact temporal conv net — conv/rectifier/max-pool blocks,
an adaptive average pool to a fixed width, and a fully-connected head onto
the warp coefficients (plus an optional classification head off the same
pooled features).  The final layer is initialized near zero so the initial
warps are near the identity.

Recurrent application (R stages, shared weights) feeds each stage the
previous stage's warped signals; gradients flow through every stage,
including the resampler's position and value paths and the network's input
gradients.  The trainer is a from-scratch Adam loop with deterministic
batching, an optional validation split with best-epoch selection, and a
divergence guard.

Model files are a self-describing binary container: magic ``DTAN``, a u32
format version, a canonical JSON metadata block, then named little-endian
float64 tensors — byte-identical for identical models.
"""

import json
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import cpab, losses
from ._layers import (adaptive_avgpool_backward, adaptive_avgpool_forward,
                      conv1d_backward, conv1d_forward, cross_entropy,
                      dense_backward, dense_forward, maxpool2_backward,
                      maxpool2_forward, relu_backward, relu_forward)
from .errors import DataError, NumericalError
from .warping import Signal, resample, resample_backward

MODEL_MAGIC = b"DTAN"
MODEL_VERSION = 1


@dataclass
class ArchSpec:
    conv_channels: Sequence[int] = (32, 64, 64)
    kernel_sizes: Sequence[int] = (7, 5, 3)
    pool_width: int = 4
    n_classes: Optional[int] = None

    def __post_init__(self):
        if len(self.conv_channels) != len(self.kernel_sizes):
            raise ValueError("one kernel size per conv block required")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd (same-padding)")


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    multitask_weight: float = 0.0
    deterministic: bool = True
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")


@dataclass
class AlignmentModel:
    basis: cpab.CpaBasis
    arch: ArchSpec
    weights: dict
    channels: int
    input_length: int
    n_recurrences: int = 4
    loss_config: losses.LossConfig = field(default_factory=losses.LossConfig)
    prior: Optional[cpab.PriorCovariance] = None

    @property
    def tess(self) -> cpab.Tessellation:
        return self.basis.tess


def _weight_names(arch: ArchSpec) -> List[str]:
    names = []
    for i in range(len(arch.conv_channels)):
        names += [f"conv{i}_w", f"conv{i}_b"]
    names += ["head_w", "head_b"]
    if arch.n_classes:
        names += ["cls_w", "cls_b"]
    return names


def init_model(tess: cpab.Tessellation, basis: cpab.CpaBasis, arch: ArchSpec,
               seed: int, channels: int = 1, input_length: int = 128,
               n_recurrences: int = 4,
               loss_config: Optional[losses.LossConfig] = None,
               prior: Optional[cpab.PriorCovariance] = None) -> AlignmentModel:
    """Fresh model: fan-in-scaled hidden weights, near-zero final layer
    (variance 1e-5) so initial warps are approximately the identity.

    Hidden layers use a conservative quarter-gain fan-in scale: activations
    shrink by the gain per layer, which keeps a fresh network's recurrent
    rollout within interpolation error of the identity warp.  Adam's
    per-parameter step normalization makes training insensitive to this
    global feature scale.
    """
    if basis.tess != tess:
        raise ValueError("basis does not belong to the tessellation")
    rng = np.random.default_rng(seed)
    gain = 0.25
    weights = {}
    c_prev = channels
    for i, (c, k) in enumerate(zip(arch.conv_channels, arch.kernel_sizes)):
        weights[f"conv{i}_w"] = rng.normal(0.0, gain * (c_prev * k) ** -0.5,
                                           size=(c, c_prev, k))
        weights[f"conv{i}_b"] = np.zeros(c)
        c_prev = c
    feat = c_prev * arch.pool_width
    weights["head_w"] = rng.normal(0.0, np.sqrt(1e-5), size=(basis.d, feat))
    weights["head_b"] = np.zeros(basis.d)
    if arch.n_classes:
        weights["cls_w"] = rng.normal(0.0, feat ** -0.5, size=(arch.n_classes, feat))
        weights["cls_b"] = np.zeros(arch.n_classes)
    return AlignmentModel(basis=basis, arch=arch, weights=weights,
                          channels=channels, input_length=input_length,
                          n_recurrences=n_recurrences,
                          loss_config=loss_config or losses.LossConfig(),
                          prior=prior)


def _net_forward(model: AlignmentModel, x: np.ndarray):
    """x: (N, C, M) -> (thetas (N, d), features (N, F), logits or None, cache)."""
    w = model.weights
    caches = []
    h = x
    for i in range(len(model.arch.conv_channels)):
        h, c_conv = conv1d_forward(h, w[f"conv{i}_w"], w[f"conv{i}_b"])
        h, c_relu = relu_forward(h)
        h, c_pool = maxpool2_forward(h)
        caches.append((c_conv, c_relu, c_pool))
    h, c_avg = adaptive_avgpool_forward(h, model.arch.pool_width)
    pooled_shape = h.shape
    feats = h.reshape(h.shape[0], -1)
    thetas, c_head = dense_forward(feats, w["head_w"], w["head_b"])
    logits = None
    if model.arch.n_classes:
        logits, _ = dense_forward(feats, w["cls_w"], w["cls_b"])
    return thetas, feats, logits, (caches, c_avg, pooled_shape, c_head)


def _net_backward(model: AlignmentModel, cache, dthetas: np.ndarray,
                  grads: dict, dlogits: Optional[np.ndarray] = None) -> np.ndarray:
    """Accumulate weight gradients into ``grads``; return d loss / d input."""
    w = model.weights
    caches, c_avg, pooled_shape, c_head = cache
    dfeats, dw, db = dense_backward(dthetas, c_head, w["head_w"])
    grads["head_w"] += dw
    grads["head_b"] += db
    if dlogits is not None:
        dfeats2, dw, db = dense_backward(dlogits, c_head, w["cls_w"])
        grads["cls_w"] += dw
        grads["cls_b"] += db
        dfeats = dfeats + dfeats2
    dh = adaptive_avgpool_backward(dfeats.reshape(pooled_shape), c_avg)
    for i in reversed(range(len(model.arch.conv_channels))):
        c_conv, c_relu, c_pool = caches[i]
        dh = maxpool2_backward(dh, c_pool)
        dh = relu_backward(dh, c_relu)
        dh, dw, db = conv1d_backward(dh, c_conv)
        grads[f"conv{i}_w"] += dw
        grads[f"conv{i}_b"] += db
    return dh


def _as_signals(data) -> List[Signal]:
    if isinstance(data, Signal):
        return [data]
    if hasattr(data, "signals"):
        return list(data.signals)
    return list(data)


def _check_shapes(model: AlignmentModel, signals: List[Signal]):
    for s in signals:
        if s.n_channels != model.channels or s.length != model.input_length:
            raise ValueError(
                f"signal shape ({s.n_channels}, {s.length}) does not match the "
                f"model's ({model.channels}, {model.input_length})")


def forward(model: AlignmentModel, u):
    """Predict warp parameters: (theta, pooled features, logits or None).

    Accepts one Signal or a batch; batch inputs return stacked outputs.
    """
    signals = _as_signals(u)
    _check_shapes(model, signals)
    x = np.stack([s.values for s in signals])
    thetas, feats, logits, _ = _net_forward(model, x)
    if isinstance(u, Signal):
        return thetas[0], feats[0], None if logits is None else logits[0]
    return thetas, feats, logits


def rdtan_apply(model: AlignmentModel, u, n_recurrences: Optional[int] = None):
    """Apply the network recurrently: warp, re-predict, warp again.

    Returns (aligned, thetas) where thetas is a list with one (N, d) array
    per stage.  ``n_recurrences`` may exceed the training-time value.
    """
    signals = _as_signals(u)
    _check_shapes(model, signals)
    r = model.n_recurrences if n_recurrences is None else n_recurrences
    if r < 1:
        raise ValueError("at least one recurrence required")
    current = list(signals)
    theta_list = []
    m = model.input_length
    for _ in range(r):
        x = np.stack([s.values for s in current])
        thetas = _net_forward(model, x)[0]
        stage = losses.make_stage(model.basis, thetas, m, want_inverse=False,
                                  want_jac=False)
        current = [resample(s, stage.warped_grids[i]) for i, s in enumerate(current)]
        theta_list.append(thetas)
    if isinstance(u, Signal):
        return current[0], [t[0] for t in theta_list]
    return current, theta_list


def _labels_of(signals: List[Signal], labels=None) -> np.ndarray:
    if labels is None:
        labels = [s.label for s in signals]
    return np.array([0 if y is None else int(y) for y in labels])


def backward(model: AlignmentModel, batch, loss_config: Optional[losses.LossConfig] = None,
             prior: Optional[cpab.PriorCovariance] = None,
             multitask_weight: float = 0.0, labels=None):
    """Full-model gradients for one batch.

    Rolls the recurrence forward with caches, assembles the loss terms, and
    backpropagates through every stage: the loss gradient on aligned values
    splits at each resampler into a value path (to the previous stage) and a
    position path (through the warp Jacobian into that stage's theta), and
    each theta gradient flows through the network into the weights and the
    network's input (which joins the value path).

    Returns (grads, loss, logits).
    """
    signals = _as_signals(batch)
    _check_shapes(model, signals)
    cfg = loss_config or model.loss_config
    prior = prior if prior is not None else model.prior
    labels = _labels_of(signals, labels)
    m = model.input_length
    r = model.n_recurrences

    current = list(signals)
    stage_infos = []
    first_logits = None
    for ridx in range(r):
        x = np.stack([s.values for s in current])
        thetas, _, logits, cache = _net_forward(model, x)
        if ridx == 0:
            first_logits = logits
        stage = losses.make_stage(model.basis, thetas, m,
                                  want_inverse=cfg.needs_inverse, want_jac=True)
        stage_infos.append((current, cache, stage))
        current = [resample(s, stage.warped_grids[i]) for i, s in enumerate(current)]

    terms = losses.alignment_terms(cfg, signals, current, labels,
                                   [s for _, _, s in stage_infos],
                                   model.basis, prior)
    loss = terms.loss
    grads = {name: np.zeros_like(arr) for name, arr in model.weights.items()}
    dlogits_first = None
    if multitask_weight > 0.0:
        if first_logits is None:
            raise ValueError("multitask training requires a classifier head")
        ce, dlogits = cross_entropy(first_logits, labels)
        loss += multitask_weight * ce
        dlogits_first = multitask_weight * dlogits

    g_vals = terms.grad_aligned
    for ridx in reversed(range(r)):
        inputs, cache, stage = stage_infos[ridx]
        dthetas = terms.stage_grads[ridx].copy()
        g_prev = np.empty_like(g_vals)
        for i, s in enumerate(inputs):
            gu, gp = resample_backward(s, stage.warped_grids[i], g_vals[i])
            g_prev[i] = gu
            dthetas[i] += stage.jac[i].T @ (gp * (m - 1))
        dx = _net_backward(model, cache, dthetas, grads,
                           dlogits=dlogits_first if ridx == 0 else None)
        g_vals = g_prev + dx
    return grads, loss, first_logits


def evaluate_loss(model: AlignmentModel, signals, labels=None,
                  loss_config: Optional[losses.LossConfig] = None,
                  multitask_weight: float = 0.0) -> float:
    """Loss on a batch without gradients (used for validation tracking)."""
    signals = _as_signals(signals)
    cfg = loss_config or model.loss_config
    labels = _labels_of(signals, labels)
    aligned, theta_list = rdtan_apply(model, signals)
    m = model.input_length
    stages = [losses.make_stage(model.basis, t, m, want_inverse=cfg.needs_inverse,
                                want_jac=False) for t in theta_list]
    terms = losses.alignment_terms(cfg, signals, aligned, labels, stages,
                                   model.basis, model.prior, want_grad=False)
    loss = terms.loss
    if multitask_weight > 0.0:
        logits = _net_forward(model, np.stack([s.values for s in signals]))[2]
        loss += multitask_weight * cross_entropy(logits, labels)[0]
    return loss


def _stratified_holdout(labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Indices of a stratified validation subset (may be empty per class)."""
    val = []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        n_val = int(round(fraction * idx.size))
        if idx.size >= 2 and n_val >= 1:
            val.extend(rng.permutation(idx)[:n_val].tolist())
    return np.array(sorted(val), dtype=int)


def train(model: AlignmentModel, dataset, config: TrainConfig):
    """Adam training loop.

    Shuffles deterministically per epoch, applies :func:`backward` per
    batch, and records the mean batch loss per epoch.  With a validation
    fraction, tracks held-out loss and restores the best epoch's weights.
    Aborts with :class:`NumericalError` if the loss leaves the reals.

    Returns (model, trace) where trace = {"train": [...], "val": [...]}.
    """
    signals = _as_signals(dataset)
    if not signals:
        raise ValueError("empty training set")
    labels = _labels_of(signals)
    if config.multitask_weight > 0.0 and not model.arch.n_classes:
        raise ValueError("multitask training requires a classifier head")

    rng_split = np.random.default_rng([config.seed, 1])
    val_idx = np.array([], dtype=int)
    if config.validation_fraction > 0.0:
        val_idx = _stratified_holdout(labels, config.validation_fraction, rng_split)
    train_idx = np.setdiff1d(np.arange(len(signals)), val_idx)

    rng = np.random.default_rng([config.seed, 0])
    m1 = {k: np.zeros_like(v) for k, v in model.weights.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.weights.items()}
    t = 0
    trace = {"train": [], "val": []}
    best = (np.inf, None)
    for _ in range(config.epochs):
        order = rng.permutation(train_idx.size)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, train_idx.size, config.batch_size):
            bidx = train_idx[order[start:start + config.batch_size]]
            batch = [signals[i] for i in bidx]
            grads, loss, _ = backward(model, batch,
                                      multitask_weight=config.multitask_weight,
                                      labels=labels[bidx])
            if not np.isfinite(loss):
                raise NumericalError("training loss diverged (non-finite)")
            t += 1
            bc1 = 1.0 - config.beta1 ** t
            bc2 = 1.0 - config.beta2 ** t
            for name, w in model.weights.items():
                g = grads[name]
                m1[name] = config.beta1 * m1[name] + (1 - config.beta1) * g
                m2[name] = config.beta2 * m2[name] + (1 - config.beta2) * g * g
                w -= config.learning_rate * (m1[name] / bc1) \
                    / (np.sqrt(m2[name] / bc2) + config.eps)
            epoch_loss += loss
            n_batches += 1
        trace["train"].append(epoch_loss / max(n_batches, 1))
        if val_idx.size:
            val_loss = evaluate_loss(model, [signals[i] for i in val_idx],
                                     labels[val_idx],
                                     multitask_weight=config.multitask_weight)
            trace["val"].append(val_loss)
            if val_loss < best[0]:
                best = (val_loss, {k: v.copy() for k, v in model.weights.items()})
    if best[1] is not None:
        model.weights = best[1]
    return model, trace


def train_multitask(model: AlignmentModel, dataset, config: TrainConfig):
    """Joint alignment + classification: loss + beta * cross-entropy."""
    if config.multitask_weight <= 0.0:
        config = replace(config, multitask_weight=1.0)
    return train(model, dataset, config)


def align_new(model: AlignmentModel, signals, n_recurrences: Optional[int] = None):
    """Inference on unseen signals: returns (aligned, per-stage thetas)."""
    return rdtan_apply(model, signals, n_recurrences)


def classify(model: AlignmentModel, signals) -> np.ndarray:
    """Argmax class predictions from the classifier head."""
    if not model.arch.n_classes:
        raise ValueError("model has no classifier head")
    sigs = _as_signals(signals)
    _check_shapes(model, sigs)
    logits = _net_forward(model, np.stack([s.values for s in sigs]))[2]
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(model: AlignmentModel, path):
    """Write the model container; byte-identical for identical models.

    Layout: magic "DTAN" | u32 version | u32 metadata length | metadata JSON
    (sorted keys, compact separators) | per tensor: u32 name length, name
    bytes, u32 ndim, u32 dims, float64 little-endian data.  Tensor order is
    the canonical weight-name order recorded in the metadata.
    """
    names = _weight_names(model.arch)
    meta = {
        "arch": {
            "conv_channels": list(model.arch.conv_channels),
            "kernel_sizes": list(model.arch.kernel_sizes),
            "pool_width": model.arch.pool_width,
            "n_classes": model.arch.n_classes,
        },
        "boundary": model.tess.boundary,
        "channels": model.channels,
        "input_length": model.input_length,
        "loss": {
            "kind": model.loss_config.kind,
            "lambda_sigma": model.loss_config.lambda_sigma,
            "lambda_smooth": model.loss_config.lambda_smooth,
            "alpha": model.loss_config.alpha,
        },
        "n_cells": model.tess.n_cells,
        "n_recurrences": model.n_recurrences,
        "prior": None if model.prior is None else {
            "lambda_sigma": model.prior.lambda_sigma,
            "lambda_smooth": model.prior.lambda_smooth,
        },
        "version": MODEL_VERSION,
        "weights": names,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            arr = np.ascontiguousarray(model.weights[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_model(path) -> AlignmentModel:
    """Read a model container written by :func:`save_model`."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MODEL_MAGIC:
        raise DataError(f"{path}: not a model file (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model format version {version}")
    off = 12
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt model metadata: {exc}") from exc
    off += meta_len
    weights = {}
    for name in meta["weights"]:
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        got = data[off:off + name_len].decode("utf-8")
        off += name_len
        if got != name:
            raise DataError(f"{path}: tensor order mismatch ({got!r} != {name!r})")
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        weights[name] = arr.astype(float)
    if off != len(data):
        raise DataError(f"{path}: trailing bytes in model file")
    arch = ArchSpec(conv_channels=tuple(meta["arch"]["conv_channels"]),
                    kernel_sizes=tuple(meta["arch"]["kernel_sizes"]),
                    pool_width=meta["arch"]["pool_width"],
                    n_classes=meta["arch"]["n_classes"])
    tess = cpab.build_tessellation(meta["n_cells"], meta["boundary"])
    basis = cpab.build_basis(tess)
    prior = None
    if meta["prior"] is not None:
        prior = cpab.build_prior(tess, meta["prior"]["lambda_sigma"],
                                 meta["prior"]["lambda_smooth"])
    loss_config = losses.LossConfig(kind=meta["loss"]["kind"],
                                    lambda_sigma=meta["loss"]["lambda_sigma"],
                                    lambda_smooth=meta["loss"]["lambda_smooth"],
                                    alpha=meta["loss"]["alpha"])
    return AlignmentModel(basis=basis, arch=arch, weights=weights,
                          channels=meta["channels"],
                          input_length=meta["input_length"],
                          n_recurrences=meta["n_recurrences"],
                          loss_config=loss_config, prior=prior)
