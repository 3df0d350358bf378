"""Dataset ingestion, normalization, splitting, and synthetic misalignment.

File format (UCR-style): one sample per row, tab- or comma-separated, first
field the class label, remaining fields the values.  Variable-length samples
pad their tails with NaN tokens; the loader turns those into prefix-validity
masks.  Multichannel files start with a ``channels<sep>C`` header line and
stack C consecutive rows (same label) per sample.

Loaded signals are z-normalized per signal and channel over their valid
samples (constant channels map to zeros with a warning), and labels are
remapped to the contiguous range 0..K-1 with the mapping recorded.

The synthetic generator misaligns per-class base signals with random
monotone warps: the cumulative sums of Dirichlet draws give warp values on a
uniform knot grid, extended piecewise-linearly to a CDF-like warp of [0, 1];
each sample resamples its class base through one such warp, plus Gaussian
noise.  The latent warps are recorded so evaluations can compare recovered
alignments against the ground truth.
"""

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DataError
from .warping import Signal, make_grid, resample

_TRAIN_SUFFIX = "_TRAIN"
_TEST_SUFFIX = "_TEST"
_EXTENSIONS = (".tsv", ".csv", ".txt")


@dataclass
class Dataset:
    """A named collection of train/test signals with shared metadata."""

    name: str
    train: List[Signal]
    test: List[Signal] = field(default_factory=list)
    label_map: Dict = field(default_factory=dict)  # original label -> 0..K-1
    n_classes: int = 0
    channels: int = 1
    length: int = 0  # maximum sample length M
    variable_length: bool = False
    latent_warps: Optional[np.ndarray] = None  # (N_train, M) synthetic truth
    test_latent_warps: Optional[np.ndarray] = None

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)


@dataclass
class SynthSpec:
    """Configuration of the Dirichlet-CDF misalignment generator.

    ``bases`` holds one base signal per class, shape (K, M) or (K, C, M).
    Each generated sample warps its class base through a random monotone
    piecewise-linear warp with ``knots`` segments whose increments are drawn
    from Dirichlet(alpha * 1); larger alpha concentrates the warps around
    the identity.  ``noise`` is the additive Gaussian sigma.
    """

    bases: np.ndarray
    knots: int = 10
    alpha: float = 1.0
    noise: float = 0.05
    per_class: int = 40
    test_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=float)
        if self.bases.ndim == 2:
            self.bases = self.bases[:, None, :]
        if self.bases.ndim != 3 or self.bases.shape[2] < 2:
            raise ValueError("bases must be (K, M) or (K, C, M) with M >= 2")
        if not np.all(np.isfinite(self.bases)):
            raise ValueError("bases must be finite")
        if self.knots < 2:
            raise ValueError("knots must be >= 2")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be nonnegative")
        if self.per_class < 1 or self.test_per_class < 0:
            raise ValueError("per_class must be >= 1 and test_per_class >= 0")


# ---------------------------------------------------------------------------
# Parsing


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _parse_row(line: str, delim: str, lineno: int):
    tokens = [t for t in line.strip().split(delim) if t != ""]
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise DataError(f"line {lineno}: unparseable field ({exc})") from None
    if len(values) < 2:
        raise DataError(f"line {lineno}: need a label and at least one value")
    label = values[0]
    if not np.isfinite(label):
        raise DataError(f"line {lineno}: label must be finite")
    return label, np.array(values[1:])


def _valid_prefix(row: np.ndarray, lineno: int) -> int:
    """Length of the non-NaN prefix; NaNs must be a contiguous tail."""
    nan = np.isnan(row)
    if not nan.any():
        return row.size
    first = int(np.argmax(nan))
    if not nan[first:].all():
        raise DataError(f"line {lineno}: NaN padding must be a contiguous tail")
    return first


def read_signals(path) -> Tuple[List[Signal], List]:
    """Parse one UCR-style file into raw (un-normalized) signals and labels.

    Returns the signals padded to the file's maximum length (padding masked
    out) and the raw labels in file order.  See the module docstring for the
    accepted layouts.
    """
    path = Path(path)
    lines = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                lines.append((lineno, line))
    if not lines:
        raise DataError(f"{path}: empty file")

    delim = _detect_delimiter(lines[0][1])
    channels = 1
    first_fields = lines[0][1].strip().split(delim)
    if first_fields and first_fields[0].strip().lower() == "channels":
        try:
            channels = int(first_fields[1])
        except (IndexError, ValueError):
            raise DataError("line 1: malformed channels header") from None
        if channels < 1:
            raise DataError("line 1: channel count must be >= 1")
        lines = lines[1:]
        if not lines:
            raise DataError(f"{path}: no data rows after channels header")

    rows = [(_parse_row(line, delim, lineno) + (lineno,))
            for lineno, line in lines]
    if len(rows) % channels != 0:
        raise DataError(f"{path}: row count is not a multiple of the "
                        f"channel count {channels}")

    any_nan = any(np.isnan(vals).any() for _, vals, _ in rows)
    widths = {vals.size for _, vals, _ in rows}
    if not any_nan and len(widths) > 1:
        raise DataError(f"{path}: inconsistent column counts in "
                        f"fixed-length mode")

    signals: List[Signal] = []
    labels: List = []
    m_max = max(widths)
    for start in range(0, len(rows), channels):
        group = rows[start:start + channels]
        label = group[0][0]
        lineno = group[0][2]
        lengths = []
        padded = np.zeros((channels, m_max))
        for c, (lab, vals, ln) in enumerate(group):
            if lab != label:
                raise DataError(f"line {ln}: channel rows of one sample must "
                                f"share the label")
            n_valid = _valid_prefix(vals, ln)
            lengths.append(n_valid)
            padded[c, :n_valid] = vals[:n_valid]
        if len(set(lengths)) > 1:
            raise DataError(f"line {lineno}: channel rows of one sample must "
                            f"share the valid length")
        n_valid = lengths[0]
        if n_valid < 2:
            raise DataError(f"line {lineno}: a sample needs at least 2 valid "
                            f"values")
        mask = None
        if any_nan:
            mask = np.zeros(m_max, dtype=bool)
            mask[:n_valid] = True
        signals.append(Signal(padded, mask=mask))
        labels.append(label)
    return signals, labels


def znormalize(signal: Signal) -> Signal:
    """Zero-mean unit-variance per channel over the valid samples.

    Constant channels become all zeros (a RuntimeWarning is emitted).
    """
    values = signal.values.copy()
    valid = np.ones(signal.length, dtype=bool) if signal.mask is None else signal.mask
    sub = values[:, valid]
    mean = sub.mean(axis=1, keepdims=True)
    std = sub.std(axis=1, keepdims=True)
    constant = std[:, 0] == 0.0
    if constant.any():
        warnings.warn("constant signal channel z-normalized to zeros",
                      RuntimeWarning, stacklevel=2)
    std = np.where(std == 0.0, 1.0, std)
    # Constant channels come out exactly zero: sub - mean vanishes termwise.
    values[:, valid] = (sub - mean) / std
    values[:, ~valid] = 0.0
    return Signal(values, mask=signal.mask, label=signal.label)


def _format_label(label) -> str:
    return str(int(label)) if float(label) == int(label) else repr(float(label))


def save_ucr(path, signals: List[Signal]) -> None:
    """Write signals in the loader's format (delimiter from the extension).

    Values are written with full float precision; masked-out samples become
    NaN tokens; multichannel signals get a channels header and C rows each.
    """
    path = Path(path)
    delim = "," if path.suffix.lower() == ".csv" else "\t"
    if not signals:
        raise DataError("nothing to save: empty signal list")
    channels = signals[0].n_channels
    if any(s.n_channels != channels for s in signals):
        raise DataError("signals must share the channel count")
    m_max = max(s.length for s in signals)
    with open(path, "w") as fh:
        if channels > 1:
            fh.write(f"channels{delim}{channels}\n")
        for s in signals:
            label = 0 if s.label is None else s.label
            row = np.full((channels, m_max), np.nan)
            valid = np.ones(s.length, dtype=bool) if s.mask is None else s.mask
            row[:, :s.length][:, valid] = s.values[:, valid]
            for c in range(channels):
                fields = [_format_label(label)]
                fields += [f"{v:.17g}" for v in row[c]]
                fh.write(delim.join(fields) + "\n")


def _find_split_file(root: Path, name: str, suffix: str) -> Optional[Path]:
    for folder in (root, root / name):
        for ext in _EXTENSIONS:
            candidate = folder / f"{name}{suffix}{ext}"
            if candidate.is_file():
                return candidate
    return None


def _remap_labels(signals: List[Signal], raw_labels: List,
                  label_map: Dict) -> List[Signal]:
    out = []
    for s, lab in zip(signals, raw_labels):
        key = int(lab) if float(lab) == int(lab) else float(lab)
        out.append(Signal(s.values, mask=s.mask, label=label_map[key]))
    return out


def load_ucr(path, name: str, normalize: bool = True) -> Dataset:
    """Load a named dataset's TRAIN (and TEST, if present) split files.

    Looks for ``{name}_TRAIN.tsv|csv|txt`` under ``path`` or ``path/name``.
    Labels from both splits are remapped to 0..K-1 (sorted original order,
    recorded in ``label_map``); signals are z-normalized per channel over
    valid samples unless ``normalize`` is False.
    """
    root = Path(path)
    train_file = _find_split_file(root, name, _TRAIN_SUFFIX)
    if train_file is None:
        raise DataError(f"no {name}{_TRAIN_SUFFIX} file under {root}")
    train, train_labels = read_signals(train_file)
    test_file = _find_split_file(root, name, _TEST_SUFFIX)
    test, test_labels = read_signals(test_file) if test_file else ([], [])

    def key_of(lab):
        return int(lab) if float(lab) == int(lab) else float(lab)

    originals = sorted({key_of(lab) for lab in train_labels + test_labels})
    label_map = {lab: k for k, lab in enumerate(originals)}
    train = _remap_labels(train, train_labels, label_map)
    test = _remap_labels(test, test_labels, label_map)
    if normalize:
        train = [znormalize(s) for s in train]
        test = [znormalize(s) for s in test]
    lengths = {s.length for s in train + test}
    channels = train[0].n_channels
    variable = any(s.mask is not None and not s.mask.all() for s in train + test)
    return Dataset(name=name, train=train, test=test, label_map=label_map,
                   n_classes=len(originals), channels=channels,
                   length=max(lengths), variable_length=variable)


# ---------------------------------------------------------------------------
# Splitting


def split_validation(dataset: Dataset, fraction: float = 0.2,
                     seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Deterministic stratified train/validation split of the train signals.

    Falls back to an unstratified split (with a warning) when some class has
    fewer than 2 samples.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    signals = dataset.train
    labels = np.array([0 if s.label is None else s.label for s in signals])
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    val_idx: List[int] = []
    if counts.min() < 2:
        warnings.warn("a class has fewer than 2 samples; splitting without "
                      "stratification", RuntimeWarning, stacklevel=2)
        order = rng.permutation(len(signals))
        n_val = int(round(len(signals) * fraction))
        val_idx = list(order[:n_val])
    else:
        for cls in classes:
            members = np.nonzero(labels == cls)[0]
            members = members[rng.permutation(members.size)]
            n_val = int(round(members.size * fraction))
            val_idx.extend(members[:n_val])
    chosen = np.zeros(len(signals), dtype=bool)
    chosen[val_idx] = True
    train = [s for s, v in zip(signals, chosen) if not v]
    val = [s for s, v in zip(signals, chosen) if v]
    base = replace(dataset, test=[], latent_warps=None, test_latent_warps=None)
    return (replace(base, name=f"{dataset.name}-train", train=train),
            replace(base, name=f"{dataset.name}-val", train=val))


# ---------------------------------------------------------------------------
# Synthetic misalignment


def default_bases(n_classes: int = 4, m: int = 128) -> np.ndarray:
    """Per-class base signals sharing a dominant low-frequency component.

    All classes ride the same slow carrier (so their principal component is
    shared) and differ in localized medium-scale features, which keeps the
    classes separable after alignment.
    """
    x = np.linspace(0.0, 1.0, m)
    carrier = np.sin(2.0 * np.pi * x)
    bump = lambda c, w: np.exp(-0.5 * ((x - c) / w) ** 2)
    features = [
        bump(0.3, 0.04) - bump(0.7, 0.04),
        bump(0.5, 0.05),
        np.sin(6.0 * np.pi * x) * bump(0.5, 0.18),
        bump(0.2, 0.03) + bump(0.8, 0.03),
    ]
    bases = []
    for k in range(n_classes):
        extra = features[k % len(features)] * (1.0 + k // len(features))
        bases.append(carrier + 1.2 * extra)
    return np.stack(bases)


def _random_warp(rng: np.random.Generator, knots: int, alpha: float,
                 grid: np.ndarray) -> np.ndarray:
    """One monotone piecewise-linear warp of [0, 1] from Dirichlet increments."""
    increments = rng.dirichlet(np.full(knots, alpha))
    cdf = np.concatenate([[0.0], np.cumsum(increments)])
    cdf[-1] = 1.0
    knot_x = np.linspace(0.0, 1.0, knots + 1)
    return np.interp(grid, knot_x, cdf)


def gen_synthetic(spec: SynthSpec) -> Dataset:
    """Generate a misaligned ensemble dataset from per-class base signals.

    Deterministic per ``spec.seed``.  The returned dataset records the latent
    warp grid of every generated sample (train and test separately).
    """
    k_classes, channels, m = spec.bases.shape
    grid = make_grid(m)
    rng = np.random.default_rng(spec.seed)

    def make_split(per_class: int):
        signals, warps = [], []
        for k in range(k_classes):
            base = Signal(spec.bases[k])
            for _ in range(per_class):
                warp = _random_warp(rng, spec.knots, spec.alpha, grid)
                sample = resample(base, warp).values
                if spec.noise > 0:
                    sample = sample + spec.noise * rng.normal(size=sample.shape)
                signals.append(Signal(sample, label=k))
                warps.append(warp)
        return signals, np.array(warps)

    train, train_warps = make_split(spec.per_class)
    test, test_warps = make_split(spec.test_per_class) if spec.test_per_class \
        else ([], None)
    return Dataset(name="synthetic", train=train, test=test,
                   label_map={k: k for k in range(k_classes)},
                   n_classes=k_classes, channels=channels, length=m,
                   variable_length=False, latent_warps=train_warps,
                   test_latent_warps=test_warps)
