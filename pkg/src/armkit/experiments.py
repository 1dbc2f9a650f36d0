"""Desk-scale experiments: aliasing demo, texture dataset, training sweeps, blur probe."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import convolve1d, gaussian_filter
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .config import ConfigError, DatasetSpec, ExperimentConfig, config_hash
from .errors import ConfigurationError
from .estimator import ARMViTClassifier
from .training import DivergenceError

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("config_hash", "seed", "epoch", "split", "loss", "accuracy", "wall_ms")
REFERENCE_GAIN_POINTS = 0.8  # published large-scale top-1 gain of the bank ARM; reported for context only
BLUR_SIGMAS = (0.0, 0.5, 1.0, 1.5, 2.0)


# ---------------------------------------------------------------- 1-D aliasing demo


@dataclass
class SpectrumReport:
    signal_freq: float
    sample_rate: float
    freqs: np.ndarray
    magnitude: np.ndarray
    dominant_before: float
    dominant_after: float
    expected_alias: float
    alias_magnitude: float
    aliased_energy_ratio: float
    prefiltered: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("bin_hz", "magnitude"))
        for f, m in zip(self.freqs, self.magnitude):
            writer.writerow((f"{f:.6g}", f"{m:.9g}"))
        return buf.getvalue()


def expected_alias_frequency(signal_freq: float, sample_rate: float) -> float:
    """Frequency at which a pure tone appears after sampling at ``sample_rate``."""
    folded = math.fmod(signal_freq, sample_rate)
    return min(folded, sample_rate - folded)


def gaussian_prefilter(sample_rate: float, dense_rate: float, gain_at_nyquist: float = 0.5) -> np.ndarray:
    """1-D Gaussian taps at ``dense_rate`` whose gain at the target Nyquist is ``gain_at_nyquist``.

    A Gaussian with std ``s`` seconds has gain ``exp(-2 pi^2 s^2 f^2)``.
    The default gives about -6 dB at Nyquist and -3 dB at Nyquist / sqrt(2).
    """
    nyquist = sample_rate / 2
    sigma_t = math.sqrt(-math.log(gain_at_nyquist) / 2) / (math.pi * nyquist)
    sigma = sigma_t * dense_rate
    radius = int(math.ceil(5 * sigma))
    x = np.arange(-radius, radius + 1)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def alias_demo_1d(signal_freq: float, sample_rate: float, prefilter: np.ndarray | None = None,
                  duration: float = 10.0, oversample: int = 16) -> SpectrumReport:
    """Sample a unit sinusoid at ``sample_rate``, optionally low-passing first.

    The "continuous" signal is a dense grid at ``oversample * sample_rate``;
    ``prefilter`` taps run at that dense rate with circular boundaries.
    """
    if sample_rate <= 0 or signal_freq <= 0:
        raise ConfigurationError(f"frequencies must be positive, got signal={signal_freq}, rate={sample_rate}")
    if duration <= 0 or oversample < 2:
        raise ConfigurationError("duration must be positive and oversample >= 2")
    dense_rate = sample_rate * oversample
    n_dense = int(round(duration * dense_rate))
    t = np.arange(n_dense) / dense_rate
    dense = np.sin(2 * np.pi * signal_freq * t)
    if prefilter is not None:
        dense = convolve1d(dense, np.asarray(prefilter, dtype=np.float64), mode="wrap")

    dense_mag = np.abs(np.fft.rfft(dense)) * 2 / n_dense
    dense_freqs = np.fft.rfftfreq(n_dense, 1 / dense_rate)

    sampled = dense[::oversample]
    n = len(sampled)
    mag = np.abs(np.fft.rfft(sampled)) * 2 / n
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    alias = expected_alias_frequency(signal_freq, sample_rate)
    alias_bin = int(np.argmin(np.abs(freqs - alias)))
    energy = mag**2
    aliased_energy = energy[alias_bin] if signal_freq > sample_rate / 2 else 0.0
    return SpectrumReport(
        signal_freq=signal_freq,
        sample_rate=sample_rate,
        freqs=freqs,
        magnitude=mag,
        dominant_before=float(dense_freqs[np.argmax(dense_mag[1:]) + 1]),
        dominant_after=float(freqs[np.argmax(mag[1:]) + 1]),
        expected_alias=alias,
        alias_magnitude=float(mag[alias_bin]),
        aliased_energy_ratio=float(aliased_energy / energy.sum()) if energy.sum() > 0 else 0.0,
        prefiltered=prefilter is not None,
    )


def alias_attenuation_db(signal_freq: float, sample_rate: float, prefilter: np.ndarray | None = None,
                         **kwargs) -> float:
    """Drop of the aliased peak, in dB, when ``prefilter`` is applied before sampling."""
    if prefilter is None:
        prefilter = gaussian_prefilter(sample_rate, sample_rate * kwargs.get("oversample", 16))
    raw = alias_demo_1d(signal_freq, sample_rate, **kwargs)
    filt = alias_demo_1d(signal_freq, sample_rate, prefilter, **kwargs)
    return 20 * math.log10(raw.alias_magnitude / filt.alias_magnitude)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    def tobytes(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.X_train, self.y_train, self.X_test, self.y_test))


TEXTURE_FREQ = (0.30, 0.36)  # cycles / pixel
TEXTURE_ORIENTATIONS = (np.pi / 4, 3 * np.pi / 4)
TEXTURE_JITTER = np.pi / 18
TEXTURE_NOISE = 0.2


def make_texture_dataset(seed: int = 0, classes: int = 2, count: int = 512, size: int = 48,
                         test_fraction: float = 0.25) -> Dataset:
    """Oriented high-frequency gratings with random phase in white noise.

    The class is the grating orientation (evenly spaced over [0, pi) starting
    at pi/4, jittered by +-10 degrees); frequency is drawn from a band just
    below the pixel Nyquist limit and the phase is uniform, so the
    class-conditional pixel means are zero.
    """
    if size < 16:
        raise ConfigurationError(f"texture images need size >= 16, got {size}")
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng([seed, 7])
    labels = rng.permutation(np.arange(count) % classes)
    if classes == 2:
        base = np.array(TEXTURE_ORIENTATIONS)
    else:
        base = np.pi / 4 + np.arange(classes) * np.pi / classes
    theta = base[labels] + rng.uniform(-TEXTURE_JITTER, TEXTURE_JITTER, count)
    freq = rng.uniform(*TEXTURE_FREQ, count)
    phase = rng.uniform(0, 2 * np.pi, count)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = np.cos(theta)[:, None, None] * cols + np.sin(theta)[:, None, None] * rows
    images = np.cos(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    images += TEXTURE_NOISE * rng.standard_normal((count, size, size))
    X = images[:, None]
    y = labels.astype(np.int64)
    n_test = int(round(count * test_fraction))
    return Dataset(X[n_test:], y[n_test:], X[:n_test], y[:n_test])


def load_image_folder(path, size: int, test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Grayscale images from ``path/<class>/*``; classes are the sorted subfolder names."""
    from PIL import Image

    root = Path(path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ConfigurationError(f"{root} needs at least two class subfolders")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".pgm"):
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L").resize((size, size)), dtype=np.float64) / 255.0
            images.append(arr)
            labels.append(label)
    X = np.stack(images)[:, None]
    y = np.asarray(labels, dtype=np.int64)
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=test_fraction, random_state=seed, stratify=y)
    return Dataset(X_tr, y_tr, X_te, y_te)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "folder":
        return load_image_folder(spec.path, spec.size, spec.test_fraction, spec.seed)
    return make_texture_dataset(spec.seed, spec.classes, spec.count, spec.size, spec.test_fraction)


# ---------------------------------------------------------------- training


@dataclass
class MetricsRecord:
    config_hash: str
    seed: int
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    wall_ms: float = 0.0
    diverged: bool = False
    error: str | None = None

    @property
    def final_test_accuracy(self) -> float:
        return self.test_accuracy[-1] if self.test_accuracy else float("nan")

    @property
    def final_test_loss(self) -> float:
        return self.test_loss[-1] if self.test_loss else float("nan")

    def rows(self, record_wall_time: bool = False):
        for e in range(len(self.epoch_loss)):
            wall = f"{self._epoch_wall[e]:.1f}" if record_wall_time else ""
            yield (self.config_hash, self.seed, e, "train", _fmt(self.epoch_loss[e]), _fmt(self.epoch_accuracy[e]), wall)
            if e < len(self.test_loss):
                yield (self.config_hash, self.seed, e, "test", _fmt(self.test_loss[e]), _fmt(self.test_accuracy[e]), wall)

    _epoch_wall: list[float] = field(default_factory=list, repr=False)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(records: Sequence[MetricsRecord], path, record_wall_time: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for rec in records:
            writer.writerows(rec.rows(record_wall_time))
    return path


def make_estimator(cfg: ExperimentConfig, seed: int) -> ARMViTClassifier:
    return ARMViTClassifier(model=cfg.model, arm=cfg.arm, epochs=cfg.epochs, batch_size=cfg.batch_size,
                            lr=cfg.lr, weight_decay=cfg.weight_decay, optimizer=cfg.optimizer, random_state=seed)


def train_one(cfg: ExperimentConfig, seed: int, data: Dataset | None = None,
              checkpoint_dir=None) -> tuple[MetricsRecord, ARMViTClassifier]:
    data = data if data is not None else load_dataset(cfg.dataset)
    record = MetricsRecord(config_hash(cfg), seed)
    est = make_estimator(cfg, seed)
    start = time.perf_counter()
    try:
        est.fit(data.X_train, data.y_train, eval_sets={"test": (data.X_test, data.y_test)})
    except DivergenceError as exc:
        record.diverged, record.error = True, str(exc)
        logger.warning("run %s seed %d diverged: %s", record.config_hash, seed, exc)
    record.wall_ms = 1000 * (time.perf_counter() - start)
    for log in getattr(est, "history_", []):
        record.epoch_loss.append(log.train_loss)
        record.epoch_accuracy.append(log.train_accuracy)
        record._epoch_wall.append(log.wall_ms)
        loss, acc = log.eval["test"]
        record.test_loss.append(loss)
        record.test_accuracy.append(acc)
    if checkpoint_dir is not None and hasattr(est, "params_") and not record.diverged:
        est.save(checkpoint_dir)
    return record, est


def _train_entry(args):
    cfg, seed = args
    record, _ = train_one(cfg, seed)
    return record


def train_toy(cfg: ExperimentConfig, out_dir=None, threads: int = 1,
              export_attn: bool = False, record_wall_time: bool = False) -> list[MetricsRecord]:
    """Train one model per seed; write ``metrics.csv`` and checkpoints under ``out_dir``."""
    data = load_dataset(cfg.dataset)
    records: list[MetricsRecord] = []
    if threads > 1 and out_dir is None:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_train_entry, [(cfg, s) for s in cfg.seeds]))
    else:
        for seed in cfg.seeds:
            ckpt = Path(out_dir) / f"checkpoint_seed{seed}" if out_dir is not None else None
            record, est = train_one(cfg, seed, data, ckpt)
            records.append(record)
            if export_attn and out_dir is not None and hasattr(est, "params_"):
                export_attention(est, data.X_test[: cfg.batch_size], Path(out_dir) / f"attention_seed{seed}")
    if out_dir is not None:
        write_metrics_csv(records, Path(out_dir) / "metrics.csv", record_wall_time)
    return records


def export_attention(est: ARMViTClassifier, X, directory) -> list[Path]:
    from . import aatd

    paths = []
    for (s, b), maps in sorted(est.attention_maps(X).items()):
        paths.append(aatd.write(Path(directory) / f"stage{s}_block{b}.aatd", maps))
    return paths


# ---------------------------------------------------------------- sweeps


PLACEMENT_ROWS = ("none", "after_patch_embed", "after_attention", "after_shortcut", "after_patch_merging")
STAGE_SUBSETS: tuple[tuple[int, ...], ...] = ((), (0,), (0, 1), (2, 3), (0, 1, 2, 3))


@dataclass
class SweepEntry:
    table: str
    label: str
    config: ExperimentConfig


def _run_entries(entries: Sequence[SweepEntry], threads: int) -> dict[str, list[MetricsRecord]]:
    """Train each distinct config once; results keyed by config hash, fixed order."""
    unique: dict[str, ExperimentConfig] = {}
    for e in entries:
        unique.setdefault(config_hash(e.config), e.config)
    jobs = [(cfg, seed) for cfg in unique.values() for seed in cfg.seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(_train_entry, jobs))
    else:
        flat = [_train_entry(job) for job in jobs]
    results: dict[str, list[MetricsRecord]] = {}
    for (cfg, _), rec in zip(jobs, flat):
        results.setdefault(config_hash(cfg), []).append(rec)
    return results


def _summary_rows(entries, results, axis: str, baseline_hash: str | None):
    rows = []
    base_acc = None
    if baseline_hash is not None:
        base_acc = float(np.mean([r.final_test_accuracy for r in results[baseline_hash]]))
    for e in entries:
        h = config_hash(e.config)
        recs = results[h]
        accs = [r.final_test_accuracy for r in recs]
        losses = [r.final_test_loss for r in recs]
        mean_acc = float(np.mean(accs))
        rows.append({
            "table": e.table,
            axis: e.label,
            "config_hash": h,
            "seeds": " ".join(str(r.seed) for r in recs),
            "mean_test_accuracy": mean_acc,
            "std_test_accuracy": float(np.std(accs)),
            "mean_test_loss": float(np.mean(losses)),
            "all_finite": all(np.isfinite(r.epoch_loss).all() and not r.diverged for r in recs),
            "delta_vs_baseline_points": 100 * (mean_acc - base_acc) if base_acc is not None else float("nan"),
        })
    return rows


def write_table(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def placement_entries(base: ExperimentConfig) -> list[SweepEntry]:
    if not base.model.hierarchical:
        raise ConfigError("placement_sweep needs a hierarchical model for the patch-merging row", ("model.hierarchical",))
    entries = [SweepEntry("placement", p, base.with_arm(p, (0,))) for p in PLACEMENT_ROWS]
    for subset in STAGE_SUBSETS:
        label = "-".join(str(s + 1) for s in subset) or "none"
        cfg = base.with_arm("after_attention", subset) if subset else base.with_arm("none")
        entries.append(SweepEntry("filtered_layers", label, cfg))
    return entries


def placement_sweep(base: ExperimentConfig, out_dir=None, threads: int = 1) -> list[dict]:
    """Rows mirroring the placement table and the filtered-layers table.

    Stage subsets are labelled 1-based ("1-2" = first two stages), as in the
    tables being mirrored. Each distinct configuration is trained once.
    """
    entries = placement_entries(base)
    results = _run_entries(entries, threads)
    rows = _summary_rows(entries, results, "configuration", config_hash(base.with_arm("none")))
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "placement_sweep.csv")
        write_metrics_csv([r for recs in results.values() for r in recs], Path(out_dir) / "metrics.csv")
    return rows


def bank_size_sweep(base: ExperimentConfig, sizes: Sequence[int] = (2, 8, 16, 24), out_dir=None,
                    threads: int = 1) -> list[dict]:
    """Same seeds, placement and bank seed for every n; only the bank size changes."""
    if not sizes:
        raise ConfigError("sizes must be non-empty", ("sizes",))
    from .arm import ARMConfig

    placement = base.model.arm_placement if base.model.arm_placement != "none" else "after_attention"
    stages = base.model.arm_stages or frozenset({0})
    bank_seed = base.arm.bank.seed if base.arm is not None and base.arm.bank is not None else 0
    k = base.arm.k if base.arm is not None else 3
    use_mod = base.arm.use_external_modulation if base.arm is not None else True
    entries = [
        SweepEntry("bank_size", str(n), base.with_arm(placement, stages, ARMConfig.with_bank(bank_seed, n, k, None, use_mod)))
        for n in sizes
    ]
    results = _run_entries(entries, threads)
    rows = _summary_rows(entries, results, "n", None)
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "bank_size_sweep.csv")
        write_metrics_csv([r for recs in results.values() for r in recs], Path(out_dir) / "metrics.csv")
    return rows


def arm_vs_baseline(base: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Bank ARM on the first stage's attention vs. no ARM, over ``base.seeds``."""
    entries = [
        SweepEntry("arm_vs_baseline", "baseline", base.with_arm("none")),
        SweepEntry("arm_vs_baseline", "bank_arm_stage1_attention", base.with_arm("after_attention", (0,))),
    ]
    results = _run_entries(entries, threads)
    rows = _summary_rows(entries, results, "configuration", config_hash(entries[0].config))
    for row in rows:
        row["reference_gain_points"] = REFERENCE_GAIN_POINTS
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "arm_vs_baseline.csv")
        write_metrics_csv([r for recs in results.values() for r in recs], Path(out_dir) / "metrics.csv")
    base_accs = [r.final_test_accuracy for r in results[rows[0]["config_hash"]]]
    arm_accs = [r.final_test_accuracy for r in results[rows[1]["config_hash"]]]
    return {
        "rows": rows,
        "baseline_accuracies": base_accs,
        "arm_accuracies": arm_accs,
        "delta_points": 100 * (np.mean(arm_accs) - np.mean(base_accs)),
    }


# ---------------------------------------------------------------- blur probe


def blur_images(X: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return X.copy()
    return gaussian_filter(X, sigma=(0, 0, sigma, sigma), mode="reflect")


def pooled_features(maps: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean and log standard deviation of (n, C, H, W) maps."""
    flat = maps.reshape(maps.shape[0], maps.shape[1], -1)
    return np.concatenate([flat.mean(axis=-1), np.log(flat.std(axis=-1) + 1e-12)], axis=1)


def _probe_accuracy(features: np.ndarray, labels: np.ndarray, seed: int) -> float:
    X_tr, X_te, y_tr, y_te = train_test_split(features, labels, test_size=0.3, random_state=seed, stratify=labels)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(X_tr, y_tr)
    return float(probe.score(X_te, y_te))


@dataclass
class ProbeReport:
    stage_accuracy: dict[int, float]
    raw_pixel_accuracy: float
    sigmas: tuple[float, ...]
    trained: bool
    seed: int

    @property
    def earliest_ge_last(self) -> bool:
        stages = sorted(self.stage_accuracy)
        return self.stage_accuracy[stages[0]] >= self.stage_accuracy[stages[-1]]


def blur_probe(est: ARMViTClassifier, X: np.ndarray, tap_stages: Sequence[int] | None = None,
               sigmas: Sequence[float] = BLUR_SIGMAS, seed: int = 0) -> ProbeReport:
    """Predict the blur level of inputs from attention maps at each tapped stage.

    Every image in ``X`` is blurred at every level; the features of a stage
    are the pooled folded attention maps of that stage's last block.
    """
    trained = hasattr(est, "params_")
    if not trained:
        raise ConfigurationError("blur_probe needs a fitted estimator (an untrained one can be fitted with epochs=0)")
    cfg = est.model_config_
    tap_stages = list(range(cfg.num_stages)) if tap_stages is None else list(tap_stages)
    bad = [s for s in tap_stages if not 0 <= s < cfg.num_stages]
    if bad:
        raise ConfigurationError(f"tap_stages {bad} out of range for a {cfg.num_stages}-stage model")
    blurred = np.concatenate([blur_images(X, s) for s in sigmas])
    labels = np.repeat(np.arange(len(sigmas)), len(X))
    maps = est.attention_maps(blurred, stages=set(tap_stages))
    stage_acc = {}
    for s in tap_stages:
        last_block = max(b for (st, b) in maps if st == s)
        stage_acc[s] = _probe_accuracy(pooled_features(maps[(s, last_block)]), labels, seed)
    raw = _probe_accuracy(pooled_features(blurred), labels, seed)
    return ProbeReport(stage_acc, raw, tuple(sigmas), bool(getattr(est, "history_", [])), seed)


def write_probe_csv(reports: Sequence[ProbeReport], path) -> Path:
    rows = []
    for rep in reports:
        for s, acc in sorted(rep.stage_accuracy.items()):
            rows.append({"seed": rep.seed, "tap": f"stage{s}", "probe_accuracy": acc})
        rows.append({"seed": rep.seed, "tap": "raw_pixels", "probe_accuracy": rep.raw_pixel_accuracy})
    return write_table(rows, path)


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
