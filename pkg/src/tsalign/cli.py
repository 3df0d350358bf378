"""Command-line interface: synth / train / align / barycenter / eval / time.

Run configuration lives in an INI file (``--config run.ini``) whose sections
and keys are listed in ``_SCHEMA`` below.  Every key can also be overridden
on the command line as ``--<section>.<key> VALUE``; unknown sections or keys
are rejected.  Each command writes the fully resolved configuration next to
its outputs (``<command>_resolved.ini``) so any run can be reproduced from
its output directory alone.

Output directory resolution order: ``[data] output_dir`` from the config,
then the ``TSALIGN_OUTPUT_DIR`` environment variable, then the current
directory.

Exit codes: 0 success, 1 usage error (bad flags, bad config values, bad
hyperparameters), 2 data error (missing or malformed input files), 3
numerical failure (divergence during optimization).

``--threads N`` (or ``[run] threads``) pins the BLAS thread pools by
setting the usual environment variables.  That only works before numpy is
first imported, so this module imports numpy and the library lazily inside
the command handlers; keep it that way.

All floating-point values printed to the console or written to metric and
table files use 9 significant digits.  Dataset-format files (signals,
centroids) keep full precision so they survive load/save round trips.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------

# section -> key -> (type, default).  This is the single source of truth for
# config-file keys, CLI override flags, and the resolved-config echo.
_SCHEMA = {
    "data": {
        "path": (str, "."),           # directory holding <name>_TRAIN.* files
        "name": (str, "synthetic"),   # dataset name (file prefix)
        "split": (str, "train"),      # which split align/barycenter operate on
        "model": (str, "model.bin"),  # model file (written by train, read later)
        "output_dir": (str, ""),      # output directory ("" -> env var or cwd)
    },
    "tessellation": {
        "n_cells": (int, 16),
        "boundary": (str, "zero_boundary"),
    },
    "loss": {
        "kind": (str, "wcss_reg"),
        "lambda_sigma": (float, 0.001),
        "lambda_smooth": (float, 0.1),
        "alpha": (float, 1.0),        # triplet margin
        "beta": (float, 0.0),         # classification weight (0 = alignment only)
    },
    "train": {
        "epochs": (int, 1500),
        "batch_size": (int, 64),
        "learning_rate": (float, 1e-3),
        "seed": (int, 0),
        "recurrences": (int, 4),
        "validation_fraction": (float, 0.0),
        "deterministic": (bool, True),
    },
    "synth": {
        "classes": (int, 4),
        "per_class": (int, 40),
        "test_per_class": (int, 10),
        "length": (int, 128),
        "knots": (int, 10),
        "alpha_d": (float, 1.0),      # Dirichlet concentration of latent warps
        "noise": (float, 0.05),
        "seed": (int, 0),
    },
    "eval": {
        "ncc": (bool, True),
        "pca": (bool, True),
        "pca_components": (int, 3),
        "method": (str, "mean"),      # barycenter method
        "methods": (str, "dtan,dba"),  # timing methods (comma separated)
        "gamma": (float, 0.1),
        "iters": (int, 10),
        "lr": (float, 0.1),
        "repeats": (int, 5),
        "batch_size": (int, 30),
    },
    "run": {
        "threads": (int, 0),          # 0 = leave BLAS threading alone
    },
}

_COMMANDS = ("synth", "train", "align", "barycenter", "eval", "time")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

OUTPUT_DIR_ENV = "TSALIGN_OUTPUT_DIR"


class UsageError(Exception):
    """Bad flags, config keys, or option values; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; we reserve 2 for data
    errors, so route parse failures through UsageError instead."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def default_config() -> dict:
    return {sec: {key: spec[1] for key, spec in keys.items()}
            for sec, keys in _SCHEMA.items()}


def _coerce(section: str, key: str, raw):
    """Parse a raw string per the schema type; UsageError on mismatch."""
    typ = _SCHEMA[section][key][0]
    if not isinstance(raw, str):
        return typ(raw)
    text = raw.strip()
    if typ is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise UsageError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return typ(text)
    except ValueError:
        raise UsageError(
            f"[{section}] {key}: expected {typ.__name__}, got {raw!r}") from None


def load_config_file(path, cfg: dict) -> dict:
    """Merge an INI file into cfg; unknown sections or keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"malformed config file: {exc}") from None
    for section in parser.sections():
        if section not in _SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise UsageError(f"unknown config key: [{section}] {key}")
            cfg[section][key] = _coerce(section, key, raw)
    return cfg


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then per-key command-line overrides."""
    cfg = default_config()
    if getattr(args, "config", None):
        load_config_file(args.config, cfg)
    for section, keys in _SCHEMA.items():
        for key in keys:
            raw = getattr(args, f"{section}__{key}", None)
            if raw is not None:
                cfg[section][key] = _coerce(section, key, raw)
    if getattr(args, "threads", None) is not None:
        cfg["run"]["threads"] = args.threads
    return cfg


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.9g" % value
    return str(value)


def write_resolved(cfg: dict, outdir: Path, command: str) -> Path:
    """Echo the fully resolved configuration next to the command's outputs."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in _SCHEMA.items():
        parser[section] = {key: _fmt_value(cfg[section][key]) for key in keys}
    path = outdir / f"{command}_resolved.ini"
    with open(path, "w") as handle:
        parser.write(handle)
    return path


def _output_dir(cfg: dict) -> Path:
    out = cfg["data"]["output_dir"] or os.environ.get(OUTPUT_DIR_ENV, "") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _pin_threads(n: int) -> None:
    """Pin every common BLAS/OpenMP pool; effective only before numpy loads."""
    if n > 0:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="tsalign",
        description="Joint alignment and averaging of time-series ensembles "
                    "with trainable diffeomorphic warps.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    descriptions = {
        "synth": "generate a synthetic dataset (files, latent warps, manifest)",
        "train": "train an alignment model and write model + loss trace",
        "align": "align a dataset with a trained model",
        "barycenter": "compute per-class averages (mean, dba, softdtw, dtan)",
        "eval": "evaluate a model: NCC accuracy, variance reduction, PCA",
        "time": "wall-clock timing of averaging methods",
    }
    for command in _COMMANDS:
        p = sub.add_parser(command, description=descriptions[command],
                           help=descriptions[command])
        p.add_argument("--config", default=None, metavar="FILE",
                       help="INI run configuration")
        p.add_argument("--threads", type=int, default=None, metavar="N",
                       help="pin BLAS/OpenMP pools to N threads")
        for section, keys in _SCHEMA.items():
            for key in keys:
                p.add_argument(f"--{section}.{key}",
                               dest=f"{section}__{key}",
                               default=None, metavar="VALUE",
                               help=f"override [{section}] {key}")
    return parser


# ---------------------------------------------------------------------------
# Shared handler helpers (all library imports are deliberately local)
# ---------------------------------------------------------------------------


def _load_dataset(cfg: dict):
    from . import data
    return data.load_ucr(cfg["data"]["path"], cfg["data"]["name"])


def _split_signals(dataset, split: str):
    if split not in ("train", "test"):
        raise UsageError("[data] split must be 'train' or 'test'")
    signals = dataset.train if split == "train" else dataset.test
    if not signals:
        from .errors import DataError
        raise DataError(f"dataset {dataset.name!r} has no {split} split")
    return signals


def _geometry(cfg: dict):
    from . import cpab
    tess = cpab.build_tessellation(cfg["tessellation"]["n_cells"],
                                   cfg["tessellation"]["boundary"])
    return tess, cpab.build_basis(tess)


def _loss_config(cfg: dict):
    from . import losses
    section = cfg["loss"]
    return losses.LossConfig(kind=section["kind"],
                             lambda_sigma=section["lambda_sigma"],
                             lambda_smooth=section["lambda_smooth"],
                             alpha=section["alpha"])


def _model_path(cfg: dict) -> Path:
    """Model file: as given if it exists, else relative to the output dir."""
    given = Path(cfg["data"]["model"])
    if given.is_file() or given.is_absolute():
        return given
    candidate = _output_dir(cfg) / given
    return candidate if candidate.is_file() else given


def _load_model(cfg: dict):
    from . import locnet
    path = _model_path(cfg)
    if not path.is_file():
        from .errors import DataError
        raise DataError(f"model file not found: {path}")
    return locnet.load_model(path)


def _group_by_class(signals):
    classes = sorted({s.label for s in signals}, key=lambda y: (y is None, y))
    return [(cls, [s for s in signals if s.label == cls]) for cls in classes]


def _masked_mean(signals):
    """Per-timestep mean over the members valid there; (values, counts)."""
    from . import losses
    cents = losses.class_means(signals, labels=[0] * len(signals))
    return cents.means[0], cents.counts[0]


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> None:
    from . import data, evaluation
    section = cfg["synth"]
    bases = data.default_bases(section["classes"], section["length"])
    spec = data.SynthSpec(bases=bases,
                          knots=section["knots"],
                          alpha=section["alpha_d"],
                          noise=section["noise"],
                          per_class=section["per_class"],
                          test_per_class=section["test_per_class"],
                          seed=section["seed"])
    dataset = data.gen_synthetic(spec)

    outdir = _output_dir(cfg)
    name = cfg["data"]["name"]
    files = []

    train_path = outdir / f"{name}_TRAIN.tsv"
    data.save_ucr(train_path, dataset.train)
    files.append(train_path.name)
    warp_path = outdir / f"{name}_TRAIN_warps.csv"
    evaluation.write_table(warp_path, ["sample"] +
                           [f"w{t}" for t in range(section["length"])],
                           [[i] + list(row)
                            for i, row in enumerate(dataset.latent_warps)])
    files.append(warp_path.name)

    if dataset.test:
        test_path = outdir / f"{name}_TEST.tsv"
        data.save_ucr(test_path, dataset.test)
        files.append(test_path.name)
        test_warp_path = outdir / f"{name}_TEST_warps.csv"
        evaluation.write_table(test_warp_path, ["sample"] +
                               [f"w{t}" for t in range(section["length"])],
                               [[i] + list(row)
                                for i, row in enumerate(dataset.test_latent_warps)])
        files.append(test_warp_path.name)

    manifest = dict(section)
    manifest.update({"name": name, "n_train": dataset.n_train,
                     "n_test": dataset.n_test, "channels": dataset.channels,
                     "files": files})
    evaluation.write_metrics(outdir / "manifest.json", manifest)
    write_resolved(cfg, outdir, "synth")
    print(f"wrote {dataset.n_train} train / {dataset.n_test} test signals "
          f"to {outdir}")


def cmd_train(cfg: dict) -> None:
    from . import cpab, evaluation, locnet
    dataset = _load_dataset(cfg)
    signals = _split_signals(dataset, "train")
    if any(s.label is None for s in signals):
        raise UsageError("the training losses compare signals within classes; "
                         "every training signal needs a class label")

    tess, basis = _geometry(cfg)
    loss_config = _loss_config(cfg)
    prior = None
    if loss_config.kind == "wcss_reg":
        prior = cpab.build_prior(tess, cfg["loss"]["lambda_sigma"],
                                 cfg["loss"]["lambda_smooth"])

    beta = cfg["loss"]["beta"]
    arch = locnet.ArchSpec(n_classes=dataset.n_classes if beta > 0 else None)
    section = cfg["train"]
    model = locnet.init_model(tess, basis, arch,
                              seed=section["seed"],
                              channels=dataset.channels,
                              input_length=dataset.length,
                              n_recurrences=section["recurrences"],
                              loss_config=loss_config,
                              prior=prior)
    train_config = locnet.TrainConfig(
        epochs=section["epochs"],
        batch_size=section["batch_size"],
        learning_rate=section["learning_rate"],
        seed=section["seed"],
        multitask_weight=beta,
        deterministic=section["deterministic"],
        validation_fraction=section["validation_fraction"])
    model, trace = locnet.train(model, signals, train_config)

    outdir = _output_dir(cfg)
    model_path = Path(cfg["data"]["model"])
    if not model_path.is_absolute():
        model_path = outdir / model_path
    locnet.save_model(model, model_path)

    header = ["epoch", "train_loss"]
    rows = [[e, v] for e, v in enumerate(trace["train"])]
    if trace["val"]:
        header.append("val_loss")
        for row, v in zip(rows, trace["val"]):
            row.append(v)
    evaluation.write_table(outdir / "loss_trace.csv", header, rows)
    write_resolved(cfg, outdir, "train")
    print(f"model written to {model_path}")
    print("final train loss: %.9g" % trace["train"][-1])


def cmd_align(cfg: dict) -> None:
    from . import data, evaluation, locnet
    model = _load_model(cfg)
    dataset = _load_dataset(cfg)
    split = cfg["data"]["split"]
    signals = _split_signals(dataset, split)

    aligned, theta_list = locnet.align_new(model, signals)

    outdir = _output_dir(cfg)
    aligned_path = outdir / f"{dataset.name}_{split.upper()}_aligned.tsv"
    data.save_ucr(aligned_path, aligned)

    d = model.basis.d
    header = ["signal", "stage"] + [f"theta{j}" for j in range(d)]
    rows = []
    for stage, thetas in enumerate(theta_list):
        for i in range(len(signals)):
            rows.append([i, stage] + list(thetas[i]))
    evaluation.write_table(outdir / "thetas.csv", header, rows)
    write_resolved(cfg, outdir, "align")
    print(f"aligned {len(signals)} signals -> {aligned_path}")


def cmd_barycenter(cfg: dict) -> None:
    from . import baselines, data, evaluation, locnet
    from .warping import Signal
    method = cfg["eval"]["method"]
    if method not in ("mean", "dba", "softdtw", "dtan"):
        raise UsageError(f"unknown barycenter method {method!r}; choose from "
                         "mean, dba, softdtw, dtan")
    dataset = _load_dataset(cfg)
    signals = _split_signals(dataset, cfg["data"]["split"])
    model = _load_model(cfg) if method == "dtan" else None

    section = cfg["eval"]
    centroids = []
    trace_rows = []
    for cls, members in _group_by_class(signals):
        label = 0 if cls is None else cls
        if method == "mean":
            values, _ = _masked_mean(members)
        elif method == "dtan":
            aligned, _ = locnet.align_new(model, members)
            values, _ = _masked_mean(aligned)
        elif method == "dba":
            result = baselines.dba(members, iters=section["iters"])
            values = result.barycenter.values
            trace_rows += [[label, t, obj]
                           for t, obj in enumerate(result.objective)]
        else:  # softdtw
            result = baselines.soft_dtw_barycenter(members,
                                                   gamma=section["gamma"],
                                                   iters=section["iters"],
                                                   lr=section["lr"])
            values = result.barycenter.values
            trace_rows += [[label, t, obj]
                           for t, obj in enumerate(result.objective)]
        centroids.append(Signal(values=values, label=label))

    outdir = _output_dir(cfg)
    centroid_path = outdir / "centroids.tsv"
    data.save_ucr(centroid_path, centroids)
    evaluation.write_table(outdir / "barycenter_trace.csv",
                           ["class", "iteration", "objective"], trace_rows)
    write_resolved(cfg, outdir, "barycenter")
    print(f"{method} barycenters for {len(centroids)} classes -> "
          f"{centroid_path}")


def cmd_eval(cfg: dict) -> None:
    import numpy as np

    from . import evaluation, locnet
    model = _load_model(cfg)
    dataset = _load_dataset(cfg)
    train_signals = _split_signals(dataset, "train")
    section = cfg["eval"]
    outdir = _output_dir(cfg)

    aligned_train, theta_list = locnet.align_new(model, train_signals)
    metrics = {"dataset": dataset.name, "n_train": dataset.n_train,
               "n_test": dataset.n_test}

    def _ncc_table(path, report):
        header = (["sample", "label", "prediction"] +
                  [f"dist_class{int(c)}" for c in report.classes])
        rows = []
        for i, signal in enumerate(dataset.test):
            rows.append([i, signal.label, int(report.predictions[i])] +
                        list(report.centroid_distances[i]))
        evaluation.write_table(path, header, rows)

    if section["ncc"] and dataset.test:
        report = evaluation.ncc_evaluate(model, dataset.train, dataset.test)
        baseline = evaluation.ncc_evaluate("euclidean", dataset.train,
                                           dataset.test)
        metrics["ncc_accuracy_model"] = report.accuracy
        metrics["ncc_accuracy_euclidean"] = baseline.accuracy
        _ncc_table(outdir / "ncc_model.csv", report)
        _ncc_table(outdir / "ncc_euclidean.csv", baseline)

    reduction = evaluation.variance_reduction(train_signals, aligned_train)
    metrics["variance_reduction_train"] = reduction.value
    metrics["wcss_raw_train"] = reduction.wcss_raw
    metrics["wcss_aligned_train"] = reduction.wcss_aligned
    vr_rows = [["train", reduction.wcss_raw, reduction.wcss_aligned,
                reduction.value]]
    if dataset.test:
        aligned_test, _ = locnet.align_new(model, dataset.test)
        test_reduction = evaluation.variance_reduction(dataset.test,
                                                       aligned_test)
        metrics["variance_reduction_test"] = test_reduction.value
        vr_rows.append(["test", test_reduction.wcss_raw,
                        test_reduction.wcss_aligned, test_reduction.value])
    evaluation.write_table(outdir / "variance_reduction.csv",
                           ["split", "wcss_raw", "wcss_aligned", "reduction"],
                           vr_rows)

    if section["pca"]:
        n = len(aligned_train)
        dim = dataset.channels * dataset.length
        k = max(1, min(section["pca_components"], n, dim))
        pca = evaluation.pca_aligned(aligned_train, theta_list, model.basis, k)
        metrics["pca_components"] = k
        metrics["pca_explained_first"] = float(pca.explained[0])
        cumulative = np.cumsum(pca.explained)
        evaluation.write_table(outdir / "explained_variance.csv",
                               ["component", "ratio", "cumulative"],
                               [[j, pca.explained[j], cumulative[j]]
                                for j in range(len(pca.explained))])
        evaluation.write_table(outdir / "pc_loadings.csv",
                               ["component"] +
                               [f"v{j}" for j in range(pca.right.shape[1])],
                               [[j] + list(pca.right[j]) for j in range(k)])
        recon_rows = []
        for i in range(n):
            for ch in range(dataset.channels):
                recon_rows.append([i, "aligned", ch] +
                                  list(pca.reconstructions[i, ch]))
                recon_rows.append([i, "unwarped", ch] +
                                  list(pca.unwarped[i, ch]))
        evaluation.write_table(outdir / "reconstructions.csv",
                               ["signal", "kind", "channel"] +
                               [f"t{t}" for t in range(dataset.length)],
                               recon_rows)

    evaluation.write_metrics(outdir / "metrics.json", metrics)
    write_resolved(cfg, outdir, "eval")
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            print(f"{key}: %.9g" % value)
        else:
            print(f"{key}: {value}")


def cmd_time(cfg: dict) -> None:
    from . import evaluation, locnet
    section = cfg["eval"]
    methods = [m.strip() for m in section["methods"].split(",") if m.strip()]
    if not methods:
        raise UsageError("[eval] methods must name at least one timing method")
    for method in methods:
        if method not in ("dtan", "dba", "softdba"):
            raise UsageError(f"unknown timing method {method!r}; choose from "
                             "dtan, dba, softdba")
    dataset = _load_dataset(cfg)
    threads = cfg["run"]["threads"]

    model = None
    if "dtan" in methods:
        path = _model_path(cfg)
        if path.is_file():
            model = locnet.load_model(path)

    train_section = cfg["train"]
    train_config = locnet.TrainConfig(
        epochs=train_section["epochs"],
        batch_size=train_section["batch_size"],
        learning_rate=train_section["learning_rate"],
        seed=train_section["seed"],
        deterministic=train_section["deterministic"])

    rows = []
    for method in methods:
        report = evaluation.timing_harness(
            method, dataset,
            repeats=section["repeats"],
            batch_size=section["batch_size"],
            model=model if method == "dtan" else None,
            train_config=train_config if method == "dtan" else None,
            gamma=section["gamma"],
            barycenter_iters=section["iters"],
            lr=section["lr"])
        if method == "dtan":
            rows.append([method, "train", 0, report.train_time, threads])
        rows += [[method, "inference", i, t, threads]
                 for i, t in enumerate(report.inference_times)]

    outdir = _output_dir(cfg)
    evaluation.write_table(outdir / "timing.csv",
                           ["method", "phase", "repeat", "seconds", "threads"],
                           rows)
    write_resolved(cfg, outdir, "time")
    for row in rows:
        print("%s %s repeat=%d %.9g s" % (row[0], row[1], row[2], row[3]))


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "align": cmd_align,
    "barycenter": cmd_barycenter,
    "eval": cmd_eval,
    "time": cmd_time,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(_COMMANDS)}\n"
                             f"{parser.format_usage().rstrip()}")
        cfg = resolve_config(args)
        _pin_threads(cfg["run"]["threads"])
        _HANDLERS[args.command](cfg)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        # Library errors can only arrive after a handler imported the
        # package, so this import is free by the time we get here.
        from .errors import DataError, NumericalError
        if isinstance(exc, DataError):
            code = 2
        elif isinstance(exc, NumericalError):
            code = 3
        elif isinstance(exc, ValueError):
            code = 1
        elif isinstance(exc, OSError):
            code = 2
        else:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
