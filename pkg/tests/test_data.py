"""Loader, normalization, splitting, and synthetic-generator tests."""

import numpy as np
import pytest

from tsalign import data
from tsalign.data import (Dataset, SynthSpec, default_bases, gen_synthetic,
                          load_ucr, read_signals, save_ucr, split_validation,
                          znormalize)
from tsalign.errors import DataError
from tsalign.warping import Signal, make_grid, resample


def write(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Loading


def test_load_fixed_length_tsv(tmp_path):
    write(tmp_path / "toy_TRAIN.tsv",
          "2\t0.0\t1.0\t2.0\n"
          "5\t1.0\t0.0\t1.0\n")
    ds = load_ucr(tmp_path, "toy")
    assert ds.n_train == 2 and ds.n_test == 0
    assert ds.label_map == {2: 0, 5: 1}
    assert [s.label for s in ds.train] == [0, 1]
    assert not ds.variable_length
    np.testing.assert_allclose(ds.train[0].values[0],
                               [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_load_reads_test_split(tmp_path):
    write(tmp_path / "toy_TRAIN.tsv", "0\t1.0\t2.0\n")
    write(tmp_path / "toy_TEST.tsv", "1\t3.0\t4.0\n1\t2.0\t1.0\n")
    ds = load_ucr(tmp_path, "toy")
    assert ds.n_train == 1 and ds.n_test == 2
    assert ds.n_classes == 2
    assert [s.label for s in ds.test] == [1, 1]


def test_loaded_signals_are_z_normalized(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(10):
        vals = rng.normal(2.0, 5.0, size=32)
        rows.append("1," + ",".join(f"{v:.8f}" for v in vals))
    write(tmp_path / "r_TRAIN.csv", "\n".join(rows) + "\n")
    ds = load_ucr(tmp_path, "r")
    for s in ds.train:
        assert abs(s.values.mean()) < 1e-9
        assert abs(s.values.var() - 1.0) < 1e-9


def test_constant_signal_normalizes_to_zeros_with_warning(tmp_path):
    write(tmp_path / "c_TRAIN.tsv", "0\t3.0\t3.0\t3.0\n")
    with pytest.warns(RuntimeWarning):
        ds = load_ucr(tmp_path, "c")
    np.testing.assert_array_equal(ds.train[0].values, np.zeros((1, 3)))


def test_nan_tail_becomes_prefix_mask(tmp_path):
    write(tmp_path / "v_TRAIN.tsv",
          "0\t1.0\t2.0\t3.0\t4.0\n"
          "1\t5.0\t6.0\tNaN\tNaN\n")
    ds = load_ucr(tmp_path, "v", normalize=False)
    assert ds.variable_length
    assert ds.length == 4
    np.testing.assert_array_equal(ds.train[1].mask, [True, True, False, False])
    np.testing.assert_array_equal(ds.train[1].values[0, :2], [5.0, 6.0])


def test_short_rows_pad_like_nan_tails(tmp_path):
    write(tmp_path / "v_TRAIN.csv",
          "0,1.0,2.0,3.0,nan\n"
          "1,5.0,6.0\n")
    ds = load_ucr(tmp_path, "v", normalize=False)
    assert ds.variable_length
    np.testing.assert_array_equal(ds.train[1].mask, [True, True, False, False])


def test_interior_nan_reports_line_number(tmp_path):
    write(tmp_path / "bad_TRAIN.tsv",
          "0\t1.0\t2.0\t3.0\n"
          "0\t1.0\tNaN\t3.0\n")
    with pytest.raises(DataError, match="line 2"):
        load_ucr(tmp_path, "bad")


def test_unparseable_field_reports_line_number(tmp_path):
    write(tmp_path / "bad_TRAIN.tsv",
          "0\t1.0\t2.0\n"
          "0\t1.0\toops\n")
    with pytest.raises(DataError, match="line 2"):
        load_ucr(tmp_path, "bad")


def test_inconsistent_fixed_length_columns_raise(tmp_path):
    write(tmp_path / "bad_TRAIN.tsv",
          "0\t1.0\t2.0\t3.0\n"
          "0\t1.0\t2.0\n")
    # No NaN tokens anywhere: fixed-length mode, ragged rows are malformed.
    with pytest.raises(DataError, match="column"):
        load_ucr(tmp_path, "bad")


def test_single_valid_sample_rejected(tmp_path):
    write(tmp_path / "bad_TRAIN.tsv",
          "0\t1.0\t2.0\n"
          "0\t1.0\tnan\n")
    with pytest.raises(DataError, match="line 2"):
        load_ucr(tmp_path, "bad")


def test_missing_train_file_raises(tmp_path):
    with pytest.raises(DataError):
        load_ucr(tmp_path, "nothing")


def test_roundtrip_preserves_values(tmp_path):
    rng = np.random.default_rng(1)
    signals = [Signal(rng.normal(size=(1, 16)), label=i % 3) for i in range(6)]
    save_ucr(tmp_path / "rt_TRAIN.tsv", signals)
    back, labels = read_signals(tmp_path / "rt_TRAIN.tsv")
    for s, b, lab in zip(signals, back, labels):
        np.testing.assert_array_equal(b.values, s.values)
        assert lab == s.label


def test_roundtrip_normalized_is_idempotent(tmp_path):
    rng = np.random.default_rng(2)
    rows = ["0\t" + "\t".join(f"{v:.10f}" for v in rng.normal(3, 2, size=12))
            for _ in range(4)]
    write(tmp_path / "n_TRAIN.tsv", "\n".join(rows) + "\n")
    ds = load_ucr(tmp_path, "n")
    save_ucr(tmp_path / "n2_TRAIN.tsv", ds.train)
    ds2 = load_ucr(tmp_path, "n2")
    for a, b in zip(ds.train, ds2.train):
        np.testing.assert_allclose(b.values, a.values, atol=1e-12)


def test_multichannel_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    signals = [Signal(rng.normal(size=(3, 8)), label=k) for k in (0, 1)]
    save_ucr(tmp_path / "mc_TRAIN.csv", signals)
    ds = load_ucr(tmp_path, "mc", normalize=False)
    assert ds.channels == 3
    for got, want in zip(ds.train, signals):
        np.testing.assert_array_equal(got.values, want.values)
        assert got.label == want.label


def test_multichannel_variable_length_masks(tmp_path):
    v0 = np.arange(10, dtype=float).reshape(2, 5)
    s0 = Signal(v0, mask=np.array([True, True, True, False, False]), label=0)
    s1 = Signal(np.ones((2, 5)) + np.arange(5), label=1)
    save_ucr(tmp_path / "mv_TRAIN.tsv", [s0, s1])
    ds = load_ucr(tmp_path, "mv", normalize=False)
    assert ds.variable_length
    np.testing.assert_array_equal(ds.train[0].mask,
                                  [True, True, True, False, False])
    np.testing.assert_array_equal(ds.train[0].values[:, :3], v0[:, :3])


def test_multichannel_mismatched_labels_raise(tmp_path):
    write(tmp_path / "mc_TRAIN.tsv",
          "channels\t2\n"
          "0\t1.0\t2.0\n"
          "1\t1.0\t2.0\n")
    with pytest.raises(DataError, match="label"):
        load_ucr(tmp_path, "mc")


def test_multichannel_row_count_must_divide(tmp_path):
    write(tmp_path / "mc_TRAIN.tsv",
          "channels\t2\n"
          "0\t1.0\t2.0\n"
          "0\t1.0\t2.0\n"
          "1\t3.0\t4.0\n")
    with pytest.raises(DataError, match="multiple"):
        load_ucr(tmp_path, "mc")


def test_znormalize_respects_mask():
    values = np.array([[1.0, 3.0, 99.0, 99.0]])
    mask = np.array([True, True, False, False])
    z = znormalize(Signal(values, mask=mask))
    np.testing.assert_allclose(z.values[0, :2], [-1.0, 1.0])
    np.testing.assert_array_equal(z.values[0, 2:], [0.0, 0.0])


# ---------------------------------------------------------------------------
# Splitting


def make_dataset(n_per_class=5, n_classes=2, m=8, seed=0):
    rng = np.random.default_rng(seed)
    signals = [Signal(rng.normal(size=(1, m)), label=k)
               for k in range(n_classes) for _ in range(n_per_class)]
    return Dataset(name="t", train=signals, n_classes=n_classes,
                   channels=1, length=m)


def test_split_sizes_and_stratification():
    ds = make_dataset(n_per_class=5, n_classes=2)
    train, val = split_validation(ds, fraction=0.2, seed=0)
    assert train.n_train == 8 and val.n_train == 2
    val_labels = [s.label for s in val.train]
    assert sorted(val_labels) == [0, 1]


def test_split_deterministic_per_seed():
    ds = make_dataset(n_per_class=10, n_classes=3)
    a1, b1 = split_validation(ds, fraction=0.3, seed=7)
    a2, b2 = split_validation(ds, fraction=0.3, seed=7)
    for x, y in zip(a1.train + b1.train, a2.train + b2.train):
        np.testing.assert_array_equal(x.values, y.values)
    _, b3 = split_validation(ds, fraction=0.3, seed=8)
    same = all(np.array_equal(x.values, y.values)
               for x, y in zip(b1.train, b3.train))
    assert not same


def test_split_proportions_within_one_sample():
    ds = make_dataset(n_per_class=7, n_classes=3)
    train, val = split_validation(ds, fraction=0.25, seed=1)
    for k in range(3):
        n_val = sum(1 for s in val.train if s.label == k)
        assert abs(n_val - 0.25 * 7) <= 1.0


def test_split_single_sample_class_falls_back():
    ds = make_dataset(n_per_class=4, n_classes=2)
    ds.train.append(Signal(np.zeros((1, 8)), label=2))
    with pytest.warns(RuntimeWarning):
        train, val = split_validation(ds, fraction=0.25, seed=0)
    assert train.n_train + val.n_train == 9
    assert val.n_train == 2


def test_split_rejects_bad_fraction():
    ds = make_dataset()
    with pytest.raises(ValueError):
        split_validation(ds, fraction=0.0)
    with pytest.raises(ValueError):
        split_validation(ds, fraction=1.0)


# ---------------------------------------------------------------------------
# Synthetic generation


def test_synthetic_deterministic_per_seed():
    spec = SynthSpec(bases=default_bases(2, 64), per_class=5,
                     test_per_class=2, seed=42)
    a = gen_synthetic(spec)
    b = gen_synthetic(spec)
    for x, y in zip(a.train + a.test, b.train + b.test):
        np.testing.assert_array_equal(x.values, y.values)
    np.testing.assert_array_equal(a.latent_warps, b.latent_warps)


def test_synthetic_shapes_and_labels():
    spec = SynthSpec(bases=default_bases(4, 128), per_class=3,
                     test_per_class=2, seed=0)
    ds = gen_synthetic(spec)
    assert ds.n_train == 12 and ds.n_test == 8
    assert ds.length == 128 and ds.channels == 1
    assert sorted({s.label for s in ds.train}) == [0, 1, 2, 3]
    assert ds.latent_warps.shape == (12, 128)
    assert ds.test_latent_warps.shape == (8, 128)


def test_synthetic_warps_strictly_monotone():
    spec = SynthSpec(bases=default_bases(2, 64), per_class=20,
                     test_per_class=0, noise=0.0, seed=3)
    ds = gen_synthetic(spec)
    assert ds.test_latent_warps is None
    for warp in ds.latent_warps:
        assert np.all(np.diff(warp) > 0)
        assert warp[0] == 0.0 and warp[-1] == 1.0


def test_synthetic_high_alpha_warps_near_identity():
    spec = SynthSpec(bases=default_bases(1, 128), knots=10, alpha=1e4,
                     per_class=40, test_per_class=0, noise=0.0, seed=4)
    ds = gen_synthetic(spec)
    grid = make_grid(128)
    disp = np.abs(ds.latent_warps - grid[None, :])
    assert disp.max() < 0.02


def test_synthetic_high_alpha_no_noise_matches_base():
    bases = default_bases(2, 128)
    spec = SynthSpec(bases=bases, alpha=1e6, noise=0.0, per_class=10,
                     test_per_class=0, seed=5)
    ds = gen_synthetic(spec)
    for s in ds.train:
        assert np.max(np.abs(s.values - bases[s.label])) < 1e-2


def test_synthetic_values_equal_base_resampled_at_latent_warp():
    bases = default_bases(2, 64)
    spec = SynthSpec(bases=bases, alpha=1.0, noise=0.0, per_class=4,
                     test_per_class=0, seed=6)
    ds = gen_synthetic(spec)
    for s, warp in zip(ds.train, ds.latent_warps):
        want = resample(Signal(bases[s.label]), warp).values
        np.testing.assert_array_equal(s.values, want)


def test_synth_spec_validation():
    bases = default_bases(2, 32)
    with pytest.raises(ValueError):
        SynthSpec(bases=bases, knots=1)
    with pytest.raises(ValueError):
        SynthSpec(bases=bases, alpha=0.0)
    with pytest.raises(ValueError):
        SynthSpec(bases=bases, noise=-0.1)
    with pytest.raises(ValueError):
        SynthSpec(bases=bases, per_class=0)
    with pytest.raises(ValueError):
        SynthSpec(bases=np.ones((2, 1)))
