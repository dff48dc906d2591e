"""Test-time pipelines, per-run evaluation, cross-seed aggregation and the results table."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, write_pgm
from .errors import AggregationError, IncompatibilityError
from .metrics import ConfusionCounts, classification_metrics, mse, ssim
from .models import Model

EVAL_BATCH = 128
METRICS = ("accuracy", "precision", "recall", "f1", "fnr")

# Table rows in display order: (regime, label).
TABLE_ROWS = (
    ("IMG_CLS", "Image Classifier"),
    ("TS_CLS", "Time Series Classifier"),
    ("XMODAL", "Cross-Modal"),
    ("VS1", "VSenseNet I"),
    ("VS1A", "VSenseNet I(A)"),
    ("VS1B", "VSenseNet I(B)"),
    ("VS2", "VSenseNet II"),
    ("VS2A", "VSenseNet II(A)"),
)
RECONSTRUCTING = {"XMODAL", "VS1", "VS1A", "VS1B", "VS2", "VS2A"}


def _expect_role(model: Model, role: str) -> None:
    if model.role != role:
        raise IncompatibilityError(f"expected a {role} model, got {model.role} "
                                   f"(fingerprint {model.fingerprint[:12]})")


def _batched(fn, x: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(x[i:i + EVAL_BATCH]) for i in range(0, len(x), EVAL_BATCH)])


@dataclass
class PipelineOutput:
    logits: np.ndarray
    predictions: np.ndarray
    reconstructions: np.ndarray | None = None
    ssim: np.ndarray | None = None
    mse: np.ndarray | None = None


def reconstruct(ts_encoder: Model, image_decoder: Model, windows: np.ndarray) -> np.ndarray:
    """Pressure windows -> embeddings -> frames, in inference mode."""
    _expect_role(ts_encoder, "ts_encoder")
    _expect_role(image_decoder, "image_decoder")
    emb = _batched(ts_encoder.forward, windows)
    return _batched(image_decoder.forward, emb)


def run_test_pipeline(ts_encoder: Model, image_decoder: Model, image_classifier: Model,
                      ds: Dataset) -> PipelineOutput:
    """Window -> embedding -> reconstructed frame -> stability logit, with per-frame SSIM/MSE."""
    _expect_role(image_classifier, "image_classifier")
    if ts_encoder.window_len != ds.window_len:
        raise IncompatibilityError(f"encoder window length {ts_encoder.window_len} != dataset {ds.window_len}")
    rec = reconstruct(ts_encoder, image_decoder, ds.windows)
    logits = _batched(image_classifier.forward, rec)
    return PipelineOutput(logits, (logits > 0).astype(np.uint8), rec,
                          np.asarray(ssim(rec, ds.frames)), np.asarray(mse(rec, ds.frames)))


def classify_frames(image_classifier: Model, frames: np.ndarray) -> PipelineOutput:
    _expect_role(image_classifier, "image_classifier")
    logits = _batched(image_classifier.forward, frames)
    return PipelineOutput(logits, (logits > 0).astype(np.uint8))


def classify_windows(ts_classifier: Model, ds: Dataset) -> PipelineOutput:
    _expect_role(ts_classifier, "ts_classifier")
    if ts_classifier.window_len != ds.window_len:
        raise IncompatibilityError(f"classifier window length {ts_classifier.window_len} != dataset {ds.window_len}")
    logits = _batched(ts_classifier.forward, ds.windows)
    return PipelineOutput(logits, (logits > 0).astype(np.uint8))


def stable_pixel_std(ds: Dataset, reconstructions: np.ndarray) -> float | None:
    """Largest temporal per-pixel std of reconstructions within any stable condition."""
    worst = None
    for cid in np.unique(ds.condition_ids):
        sel = ds.condition_ids == cid
        if ds.labels[sel][0] != 0:
            continue
        s = float(reconstructions[sel].astype(np.float64).std(axis=0).max())
        worst = s if worst is None else max(worst, s)
    return worst


@dataclass
class RunEvaluation:
    regime: str
    seed: int
    config_hash: str
    dataset_hash: str
    fingerprints: dict[str, str]
    counts: dict[str, int]
    metrics: dict[str, float | None]
    ssim: float | None = None
    mse: float | None = None
    stable_pixel_std: float | None = None
    n_test: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunEvaluation":
        return cls(**d)


def evaluate_run(regime: str, seed: int, out: PipelineOutput, ds: Dataset, config_hash: str,
                 fingerprints: dict[str, str]) -> RunEvaluation:
    counts = ConfusionCounts.from_predictions(out.predictions, ds.labels)
    ev = RunEvaluation(regime, seed, config_hash, ds.content_hash(), dict(fingerprints),
                       asdict(counts), classification_metrics(counts), n_test=len(ds))
    if out.reconstructions is not None:
        ev.ssim = float(np.mean(out.ssim))
        ev.mse = float(np.mean(out.mse))
        ev.stable_pixel_std = stable_pixel_std(ds, out.reconstructions)
    return ev


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _mean_std(values: list[float | None]) -> dict[str, float | None] | None:
    if not values or any(v is None for v in values):
        return None
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1))}


@dataclass
class EvalReport:
    config_hash: str
    dataset_hash: str
    regimes: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**d)


def aggregate_runs(runs: list[RunEvaluation]) -> EvalReport:
    """Mean and sample std (ddof=1) across seeds, per regime.

    All runs must share one config hash and one test set, and each regime needs
    at least two runs. Runs are ordered by seed first, so the result does not
    depend on input order.
    """
    if not runs:
        raise AggregationError("no runs to aggregate")
    configs = {r.config_hash for r in runs}
    datasets = {r.dataset_hash for r in runs}
    if len(configs) > 1:
        raise AggregationError(f"runs come from different configurations: {sorted(configs)}")
    if len(datasets) > 1:
        raise AggregationError(f"runs were evaluated on different test sets: {sorted(datasets)}")
    by_regime: dict[str, list[RunEvaluation]] = {}
    for r in runs:
        by_regime.setdefault(r.regime, []).append(r)
    report = EvalReport(configs.pop(), datasets.pop())
    for regime in sorted(by_regime):
        rs = sorted(by_regime[regime], key=lambda r: r.seed)
        if len(rs) < 2:
            raise AggregationError(f"{regime}: need at least 2 seeds to report a spread, got {len(rs)}")
        entry = {"seeds": [r.seed for r in rs]}
        for m in METRICS:
            entry[m] = _mean_std([r.metrics[m] for r in rs])
        for m in ("ssim", "mse", "stable_pixel_std"):
            entry[m] = _mean_std([getattr(r, m) for r in rs])
        report.regimes[regime] = entry
    return report


def _cell(stat: dict | None, digits: int = 4) -> str:
    if stat is None:
        return "NA"
    if not (math.isfinite(stat["mean"]) and math.isfinite(stat["std"])):
        return "NA"
    return f"{stat['mean']:.{digits}f} ± {stat['std']:.{digits}f}"


def format_table(report: EvalReport) -> str:
    """Plain-text results table: one row per model, mean ± std over seeds."""
    header = ("Model", "SSIM", "MSE", "Accuracy", "F1 Score", "FNR")
    rows = []
    for regime, label in TABLE_ROWS:
        e = report.regimes.get(regime)
        if e is None:
            rows.append((label,) + ("NA",) * 5)
            continue
        rows.append((label, _cell(e["ssim"]), _cell(e["mse"]), _cell(e["accuracy"]),
                     _cell(e["f1"]), _cell(e["fnr"])))
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def dump_reconstructions(ds: Dataset, reconstructions: np.ndarray, model_name: str, out_dir,
                         per_condition: int = 3) -> list[Path]:
    """Write evenly spaced reconstructions as ``{condition}_{frame_idx}_{model}.pgm``.

    Slashes in condition names (``Stable_120/60/600``) become dashes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for cid in np.unique(ds.condition_ids):
        idx = np.flatnonzero(ds.condition_ids == cid)
        pick = idx[np.linspace(0, len(idx) - 1, min(per_condition, len(idx))).astype(int)]
        name = ds.condition(int(cid)).name.replace("/", "-")
        for i in pick:
            path = out_dir / f"{name}_{int(ds.frame_indices[i])}_{model_name}.pgm"
            write_pgm(reconstructions[i], path)
            written.append(path)
    return written
