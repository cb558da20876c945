"""Experiment drivers: data valuation, noise detection, misclassification
tracing, model editing, and estimator calibration, all batch-mode and
seed-deterministic. Each driver returns a Report for emit_report.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, fields, replace as dc_replace

import numpy as np

from . import datasets, model as mod, oracle
from .errors import ConfigError
from .influence import NeumannConfig, sam_gif, sam_hif, sam_if_fast
from .report import Report
from .samtrain import SAMConfig, train_sam, write_trajectory

Array = np.ndarray

_RECALL_GRID = [round(0.05 * i, 2) for i in range(1, 21)]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "blobs(200, 10, 2, 3.0, 1)"
    label_column: str = "label"
    val_fraction: float = 0.15  # used only when the source has no splits
    test_fraction: float = 0.15
    model: str = "logistic"
    hidden: tuple[int, ...] = (8,)
    activation: str = "tanh"
    rho: float = 0.05
    p: float = 2.0
    lam: float = 0.01
    eta: str = "0.5"  # constant, or step-decay "0:0.5,500:0.05"
    batch_size: int = 0  # 0 = full batch
    steps: int = 1000
    record_stride: int = 1
    epoch_shuffled: bool = False
    estimator: str = "if_fast"
    gif_mode: str = "sgd"
    removal_fractions: tuple[float, ...] = (0.02, 0.05, 0.1)
    flip_fraction: float = 0.0
    top_m: int = 5
    max_trace_points: int = 10
    edit_indices: tuple[int, ...] = ()
    sample_size: int = 0  # 0 = every training point (calibrate)
    neumann_order: int = 500
    neumann_alpha: float = 0.0  # 0 = auto
    neumann_damp: float = 0.01
    neumann_zeta: float = 1e-9
    out: str = "out"
    seed: int = 0

    def __post_init__(self):
        if any(not 0.0 <= f <= 1.0 for f in self.removal_fractions):
            raise ConfigError("removal fractions must lie in [0, 1]")
        if not 0.0 <= self.flip_fraction <= 0.5:
            raise ConfigError("flip fraction must lie in [0, 0.5]")
        est = self.estimator.replace("-", "_")
        if est not in ("if_fast", "hif", "gif"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        object.__setattr__(self, "estimator", est)
        if self.model not in ("logistic", "mlp"):
            raise ConfigError(f"unknown model kind {self.model!r}")

    def digest(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def parsed_eta(self):
        text = self.eta.strip()
        try:
            if ":" not in text:
                return float(text)
            return tuple(
                (int(pair.split(":")[0]), float(pair.split(":")[1]))
                for pair in text.split(",")
            )
        except (ValueError, IndexError):
            raise ConfigError(f"malformed eta schedule {self.eta!r}") from None

    def neumann(self) -> NeumannConfig:
        return NeumannConfig(
            order=self.neumann_order,
            alpha=self.neumann_alpha or None,
            damp=self.neumann_damp,
            zeta=self.neumann_zeta,
        )


_BOOL_KEYS = {"epoch_shuffled"}


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a flat key=value config file; '#' starts a comment."""
    values: dict = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for line_no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        values[key] = value
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return _build_config(values, path)


def _build_config(values: dict, origin: str) -> ExperimentConfig:
    kwargs = {}
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    for key, value in values.items():
        if key not in by_name:
            raise ConfigError(f"{origin}: unknown config key {key!r}")
        if not isinstance(value, str):
            kwargs[key] = value
            continue
        default = getattr(ExperimentConfig, key)
        try:
            if key in _BOOL_KEYS:
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            elif isinstance(default, tuple):
                if value.strip() == "":
                    kwargs[key] = ()
                elif key == "removal_fractions":
                    kwargs[key] = tuple(float(v) for v in value.split(","))
                else:
                    kwargs[key] = tuple(int(v) for v in value.split(","))
            else:
                kwargs[key] = value
        except ValueError:
            raise ConfigError(f"{origin}: bad value for {key!r}: {value!r}") from None
    return ExperimentConfig(**kwargs)


def setup(cfg: ExperimentConfig) -> tuple[mod.ModelSpec, mod.Dataset, SAMConfig]:
    """Ingest the dataset, infer the model spec, build the SAM config."""
    ds = datasets.ingest(cfg.dataset, cfg.label_column)
    if ds.indices("val").size == 0 and ds.indices("test").size == 0:
        ds = datasets.split_dataset(ds, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    C = int(ds.labels.max()) + 1
    if cfg.model == "logistic":
        spec = mod.ModelSpec("logistic", (ds.d, C))
    else:
        spec = mod.ModelSpec("mlp", (ds.d, *cfg.hidden, C), cfg.activation)
    n_train = int(ds.indices("train").size)
    if n_train == 0:
        raise ConfigError("dataset has no training rows")
    sam = SAMConfig(
        rho=cfg.rho,
        p=cfg.p,
        lam=cfg.lam,
        eta=cfg.parsed_eta(),
        batch_size=cfg.batch_size or n_train,
        steps=cfg.steps,
        seed=cfg.seed,
        record_stride=cfg.record_stride,
        epoch_shuffled=cfg.epoch_shuffled,
    )
    return spec, ds, sam


def score_all(
    cfg: ExperimentConfig,
    spec: mod.ModelSpec,
    ds: mod.Dataset,
    sam: SAMConfig,
    params: Array,
    trajectory,
) -> tuple[Array, Array]:
    """Influence vectors and scores for every training point.

    Returns (scores[n], ifvecs[n, P]); scores are oriented positive =
    valuable (removal predicted to raise validation loss).
    """
    rows = ds.indices("train")
    val_rows = ds.indices("val")
    n = rows.size
    ncfg = cfg.neumann()
    _, gval = mod.subset_loss_grad(spec, params, ds, val_rows, 1.0)
    ifvecs = np.empty((n, spec.param_count))
    for k in range(n):
        if cfg.estimator == "if_fast":
            ifvecs[k] = sam_if_fast(spec, ds, params, sam.rho, sam.p, sam.lam, k, ncfg)
        elif cfg.estimator == "hif":
            ifvecs[k] = sam_hif(spec, ds, params, sam.rho, sam.p, sam.lam, k, ncfg)
        else:
            ifvecs[k] = sam_gif(trajectory, spec, ds, k, cfg.gif_mode)
    scores = -(ifvecs @ gval)
    return scores, ifvecs


def rank_descending(scores: Array) -> Array:
    """Most valuable first; ties break toward the smaller training index."""
    return np.lexsort((np.arange(scores.size), -scores))


def rank_ascending(scores: Array) -> Array:
    """Most harmful first; ties break toward the smaller training index."""
    return np.lexsort((np.arange(scores.size), scores))


def retrain_without(
    spec: mod.ModelSpec, ds: mod.Dataset, sam: SAMConfig, drop_positions
) -> Array:
    """Fresh training run with the given train-split positions removed."""
    drop_positions = np.asarray(drop_positions, dtype=np.int64)
    rows = ds.indices("train")
    keep = np.ones(ds.n, dtype=bool)
    keep[rows[drop_positions]] = False
    reduced = mod.Dataset(ds.features[keep], ds.labels[keep], ds.split[keep])
    n_left = int(reduced.indices("train").size)
    cfg = dc_replace(sam, batch_size=min(sam.batch_size, n_left))
    params, _ = train_sam(spec, reduced, cfg)
    return params


def cmd_train(cfg: ExperimentConfig) -> Report:
    """Train and persist the trajectory; report losses and accuracies."""
    spec, ds, sam = setup(cfg)
    start = time.perf_counter()
    params, traj = train_sam(spec, ds, sam)
    wall = time.perf_counter() - start
    os.makedirs(cfg.out, exist_ok=True)
    write_trajectory(traj, os.path.join(cfg.out, f"trajectory_{cfg.digest()[:8]}.samt"))
    rows = ds.indices("train")
    train_loss, _ = mod.subset_loss_grad(spec, params, ds, rows, 1.0 / rows.size)
    report = Report()
    digest = cfg.digest()
    report.add("train", digest, "train_loss", [cfg.steps], [train_loss], [wall])
    for split in ("train", "val", "test"):
        report.add("train", digest, f"{split}_acc", [cfg.steps], [mod.accuracy(spec, params, ds, split)])
    return report


def cmd_attribute(cfg: ExperimentConfig) -> Report:
    """Influence scores for every training point under one estimator."""
    spec, ds, sam = setup(cfg)
    params, traj = train_sam(spec, ds, sam)
    start = time.perf_counter()
    scores, _ = score_all(cfg, spec, ds, sam, params, traj)
    wall = time.perf_counter() - start
    report = Report()
    report.add(
        "attribute",
        cfg.digest(),
        f"influence_score_{cfg.estimator}",
        np.arange(scores.size),
        scores,
        [wall],
    )
    return report


def cmd_valuate(cfg: ExperimentConfig) -> Report:
    """Remove the most valuable points at each fraction; compare test
    accuracy after retraining, after influence editing, and after
    removing a random set of the same size."""
    spec, ds, sam = setup(cfg)
    params, traj = train_sam(spec, ds, sam)
    scores, ifvecs = score_all(cfg, spec, ds, sam, params, traj)
    n = scores.size
    order = rank_descending(scores)
    fractions = list(cfg.removal_fractions)
    acc_retrain, acc_edit, acc_random, walls = [], [], [], []
    for fi, f in enumerate(fractions):
        start = time.perf_counter()
        m = int(round(f * n))
        removed = order[:m]
        if m == 0:
            w_retrain, w_edit = params, params
        else:
            w_retrain = retrain_without(spec, ds, sam, removed)
            w_edit = params - ifvecs[removed].sum(axis=0)
        acc_retrain.append(mod.accuracy(spec, w_retrain, ds, "test"))
        acc_edit.append(mod.accuracy(spec, w_edit, ds, "test"))
        rand_removed = np.random.default_rng([cfg.seed, 0x7A, fi]).choice(n, size=m, replace=False)
        w_rand = retrain_without(spec, ds, sam, rand_removed) if m else params
        acc_random.append(mod.accuracy(spec, w_rand, ds, "test"))
        walls.append(time.perf_counter() - start)
    report = Report()
    digest = cfg.digest()
    report.add("valuate", digest, "acc_retrain", fractions, acc_retrain, walls)
    report.add("valuate", digest, "acc_edit", fractions, acc_edit)
    report.add("valuate", digest, "acc_random", fractions, acc_random)
    baseline = mod.accuracy(spec, params, ds, "test")
    report.add("valuate", digest, "acc_baseline", [0.0], [baseline])
    return report


def cmd_detect_noise(cfg: ExperimentConfig) -> Report:
    """Flip a seeded label fraction, train, rank by ascending influence
    score, and report flip-recall and removal-accuracy curves with
    random controls."""
    if cfg.flip_fraction <= 0.0:
        raise ConfigError("detect-noise needs flip_fraction > 0")
    spec, ds, sam = setup(cfg)
    noisy, flipped = datasets.flip_labels(ds, cfg.flip_fraction, cfg.seed)
    params, traj = train_sam(spec, noisy, sam)
    scores, _ = score_all(cfg, spec, noisy, sam, params, traj)
    n = scores.size
    order = rank_ascending(scores)  # most harmful (most negative) first
    random_order = np.random.default_rng([cfg.seed, 0x4E]).permutation(n)
    flipped_set = set(flipped.tolist())

    def recall_curve(ranking):
        out = []
        for q in _RECALL_GRID:
            inspected = ranking[: int(np.ceil(q * n))]
            hits = sum(1 for i in inspected if int(i) in flipped_set)
            out.append(hits / len(flipped_set))
        return out

    report = Report()
    digest = cfg.digest()
    report.add("detect_noise", digest, "recall_is", _RECALL_GRID, recall_curve(order))
    report.add("detect_noise", digest, "recall_random", _RECALL_GRID, recall_curve(random_order))

    fractions = list(cfg.removal_fractions)
    acc_is, acc_random, walls = [], [], []
    for fi, f in enumerate(fractions):
        start = time.perf_counter()
        m = int(round(f * n))
        w_is = retrain_without(spec, noisy, sam, order[:m]) if m else params
        rand = np.random.default_rng([cfg.seed, 0x4F, fi]).choice(n, size=m, replace=False)
        w_rand = retrain_without(spec, noisy, sam, rand) if m else params
        acc_is.append(mod.accuracy(spec, w_is, noisy, "test"))
        acc_random.append(mod.accuracy(spec, w_rand, noisy, "test"))
        walls.append(time.perf_counter() - start)
    report.add("detect_noise", digest, "acc_removed_is", fractions, acc_is, walls)
    report.add("detect_noise", digest, "acc_removed_random", fractions, acc_random)
    return report


def cmd_trace(cfg: ExperimentConfig) -> Report:
    """For misclassified test points, list the most helpful and most
    harmful training points by per-test-point influence score."""
    spec, ds, sam = setup(cfg)
    params, traj = train_sam(spec, ds, sam)
    test_rows = ds.indices("test")
    preds = mod.predict_labels(spec, params, ds.features[test_rows])
    mis = test_rows[preds != ds.labels[test_rows]][: cfg.max_trace_points]
    report = Report()
    digest = cfg.digest()
    report.add("trace", digest, "misclassified_count", [0.0], [float(mis.size)])
    if mis.size == 0:
        return report
    start = time.perf_counter()
    _, ifvecs = score_all(cfg, spec, ds, sam, params, traj)
    n = ifvecs.shape[0]
    m = min(cfg.top_m, n)
    for row in mis:
        _, g_test = mod.subset_loss_grad(spec, params, ds, [row], 1.0)
        point_scores = -(ifvecs @ g_test)
        helpful = rank_descending(point_scores)[:m]
        harmful = rank_ascending(point_scores)[:m]
        report.add("trace", digest, f"helpful_test{row}", helpful, point_scores[helpful])
        report.add("trace", digest, f"harmful_test{row}", harmful, point_scores[harmful])
    report.runs[0].wall_times = [time.perf_counter() - start]
    return report


def cmd_edit(cfg: ExperimentConfig) -> Report:
    """Edit the model by subtracting summed influence vectors of the
    removal set (explicit indices, or the bottom fraction by score) and
    compare against actually retraining without those points."""
    spec, ds, sam = setup(cfg)
    params, traj = train_sam(spec, ds, sam)
    scores, ifvecs = score_all(cfg, spec, ds, sam, params, traj)
    n = scores.size
    if cfg.edit_indices:
        removed = np.asarray(cfg.edit_indices, dtype=np.int64)
        if removed.min() < 0 or removed.max() >= n:
            raise ConfigError("edit_indices out of range")
    else:
        f = cfg.removal_fractions[0] if cfg.removal_fractions else 0.1
        removed = rank_ascending(scores)[: int(round(f * n))]
    start = time.perf_counter()
    w_edit = params - ifvecs[removed].sum(axis=0)
    edit_wall = time.perf_counter() - start
    start = time.perf_counter()
    w_retrain = retrain_without(spec, ds, sam, removed) if removed.size else params
    retrain_wall = time.perf_counter() - start
    report = Report()
    digest = cfg.digest()
    report.add("edit", digest, "acc_baseline", [0.0], [mod.accuracy(spec, params, ds, "test")])
    report.add("edit", digest, "acc_edited", [0.0], [mod.accuracy(spec, w_edit, ds, "test")], [edit_wall])
    report.add("edit", digest, "acc_retrained", [0.0], [mod.accuracy(spec, w_retrain, ds, "test")], [retrain_wall])
    rel = float(np.linalg.norm(w_edit - w_retrain) / max(np.linalg.norm(params), 1e-300))
    report.add("edit", digest, "param_distance_rel", [0.0], [rel])
    os.makedirs(cfg.out, exist_ok=True)
    np.save(os.path.join(cfg.out, f"edited_params_{digest[:8]}.npy"), w_edit)
    return report


def cmd_calibrate(cfg: ExperimentConfig) -> Report:
    """Estimator-vs-oracle calibration over a leave-one-out sweep."""
    spec, ds, sam = setup(cfg)
    n = int(ds.indices("train").size)
    sample = cfg.sample_size or n
    start = time.perf_counter()
    cal = oracle.calibrate_estimator(
        spec, ds, sam, cfg.estimator, sample, cfg.neumann(), cfg.gif_mode
    )
    wall = time.perf_counter() - start
    report = Report()
    digest = cfg.digest()
    report.add("calibrate", digest, f"pearson_{cfg.estimator}", [0.0], [cal.pearson], [wall])
    report.add("calibrate", digest, f"spearman_{cfg.estimator}", [0.0], [cal.spearman])
    report.add("calibrate", digest, f"sign_agreement_{cfg.estimator}", [0.0], [cal.sign_agreement])
    report.add("calibrate", digest, f"n_points_{cfg.estimator}", [0.0], [cal.n_points])
    return report
