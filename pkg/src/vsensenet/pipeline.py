"""Run configuration and the artifact-producing stages behind the command line.

Layout under the output directory::

    dataset.vsns (+ .manifest.json)
    AE/<pretrain_seed>/image_encoder.vsnm, image_decoder.vsnm, train_report.json
    <REGIME>/<seed>/<role>.vsnm, train_report.json, timing.json
    evaluation/runs/<REGIME>_<seed>.json, eval_report.json, table.txt
    reconstructions/<condition>_<frame>_<model>.pgm

Every model and report carries the configuration hash, and later stages refuse
artifacts produced under a different configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import evaluation as ev
from . import training as tr
from .datagen import Dataset, build_dataset, default_conditions, read_dataset, write_dataset
from .errors import ConfigError, DependencyError, IncompatibilityError
from .models import atomic_write_bytes, load_model, save_model

log = logging.getLogger("vsensenet")

TRAINED_REGIMES = ("IMG_CLS", "TS_CLS", "XMODAL", "VS1", "VS1A", "VS1B", "VS2", "VS2A")

# Desk-scale epoch budget: sized so five seeds of every regime fit in about
# half an hour on one CPU core.
DESK_EPOCHS = {"AE": 3, "IMG_CLS": 2, "TS_CLS": 2, "XMODAL": 2, "VS1": 2, "VS1A": 2,
               "VS1B": 2, "VS2": 3, "VS2A": 2}

# Artifacts each regime writes, and the ones it needs from other regimes.
REGIME_ROLES = {
    "AE": ("image_encoder", "image_decoder"),
    "IMG_CLS": ("image_classifier",),
    "TS_CLS": ("ts_classifier",),
    "XMODAL": ("ts_encoder",),
    "VS1": ("ts_encoder", "image_decoder"),
    "VS1A": ("ts_encoder", "image_decoder"),
    "VS1B": ("ts_encoder", "image_decoder"),
    "VS2": ("ts_encoder", "image_decoder", "image_classifier"),
    "VS2A": ("ts_encoder", "image_decoder", "image_classifier"),
}
NEEDS_AE = {"XMODAL", "VS1", "VS1B", "VS2", "VS2A"}
# VSenseNet I variants and the cross-modal baseline classify with the image classifier.
NEEDS_IMG_CLS = {"XMODAL", "VS1", "VS1A", "VS1B"}

DATASET_FILE = "dataset.vsns"


@dataclass
class RunConfig:
    master_seed: int = 0
    window_len: int = 75
    train_stride: int = 12
    test_stride: int = 18
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    pretrain_seed: int = 0
    lr: float = 0.001
    batch_size: int = 32
    dropout_rate: float = 0.2
    lambda_emb: float = 1.0
    lambda_rec: float = 1.0
    lambda_cls: float = 1.0
    lambda_feat: float = 1.0
    epochs: dict[str, int] = field(default_factory=lambda: dict(DESK_EPOCHS))

    def __post_init__(self):
        unknown = set(self.epochs) - set(tr.REGIMES)
        if unknown:
            raise ConfigError(f"epochs given for unknown regimes {sorted(unknown)}")
        self.epochs = {**DESK_EPOCHS, **{k: int(v) for k, v in self.epochs.items()}}
        if any(v < 1 for v in self.epochs.values()):
            raise ConfigError(f"epoch counts must be >= 1: {self.epochs}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be a non-empty list of distinct integers, got {self.seeds}")
        if self.window_len < 1 or self.train_stride < 1 or self.test_stride < 1:
            raise ConfigError("window_len and strides must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown configuration keys {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        """Identity of everything that shapes the artifacts; the seed list is excluded
        so seeds can be trained in separate invocations."""
        d = self.to_dict()
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def train_config(self, regime: str, seed: int) -> tr.TrainConfig:
        return tr.TrainConfig(regime=regime, lr=self.lr, batch_size=self.batch_size,
                              epochs=self.epochs[regime], seed=seed, lambda_emb=self.lambda_emb,
                              lambda_rec=self.lambda_rec, lambda_cls=self.lambda_cls,
                              lambda_feat=self.lambda_feat, dropout_rate=self.dropout_rate)


def write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


class Workspace:
    """Paths and provenance checks for one output directory and configuration."""

    def __init__(self, out_dir, cfg: RunConfig):
        self.root = Path(out_dir)
        self.cfg = cfg
        self.hash = cfg.hash

    # -- paths -------------------------------------------------------------

    @property
    def dataset_path(self) -> Path:
        return self.root / DATASET_FILE

    def run_dir(self, regime: str, seed: int) -> Path:
        return self.root / regime / str(seed)

    def model_path(self, regime: str, seed: int, role: str) -> Path:
        return self.run_dir(regime, seed) / f"{role}.vsnm"

    @property
    def eval_dir(self) -> Path:
        return self.root / "evaluation"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    # -- checks ------------------------------------------------------------

    def require(self, paths: list[Path], what: str) -> None:
        missing = [self.rel(p) for p in paths if not p.exists()]
        if missing:
            raise DependencyError(f"{what} needs {', '.join(missing)} under {self.root}; run the earlier stage first")

    def require_regime(self, regime: str, seeds, what: str) -> None:
        paths = []
        for s in seeds:
            paths += [self.model_path(regime, s, role) for role in REGIME_ROLES[regime]]
        self.require(paths, what)

    def check_writable(self) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.root}: {exc}") from exc

    # -- artifacts ---------------------------------------------------------

    def load_dataset(self) -> Dataset:
        self.require([self.dataset_path], "this stage")
        ds = read_dataset(self.dataset_path)
        if ds.config_hash != self.hash:
            raise IncompatibilityError(f"dataset was generated under config {ds.config_hash[:12]}, "
                                       f"current config is {self.hash[:12]}")
        return ds

    def load(self, regime: str, seed: int, role: str):
        path = self.model_path(regime, seed, role)
        self.require([path], f"{regime} seed {seed}")
        model = load_model(path, expected=role)
        got = model.extra.get("config_hash")
        if got != self.hash:
            raise IncompatibilityError(f"{self.rel(path)} was produced under config {str(got)[:12]}, "
                                       f"current config is {self.hash[:12]}")
        return model

    def save(self, model, regime: str, seed: int) -> str:
        path = self.model_path(regime, seed, model.role)
        save_model(model, path, extra={"config_hash": self.hash, "regime": regime, "seed": seed})
        return self.rel(path)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def generate(ws: Workspace) -> Dataset:
    ws.check_writable()
    cfg = ws.cfg
    ds = build_dataset(default_conditions(cfg.master_seed), cfg.window_len,
                       strides={"train": cfg.train_stride, "test": cfg.test_stride}, config_hash=ws.hash)
    ds.manifest["config"] = cfg.to_dict()
    write_dataset(ds, ws.dataset_path)
    log.info("dataset: %d samples (%d train, %d test) -> %s", len(ds), len(ds.split("train")),
             len(ds.split("test")), ws.dataset_path)
    return ds


def _write_train_outputs(ws: Workspace, regime: str, seed: int, report: tr.TrainReport,
                         paths: dict[str, str]) -> None:
    report.model_paths = paths
    body = report.to_json()
    body["config_hash"] = ws.hash
    body["run_config"] = ws.cfg.to_dict()
    write_json(ws.run_dir(regime, seed) / "train_report.json", body)
    write_json(ws.run_dir(regime, seed) / "timing.json", {"wall_time_s": report.wall_time_s})


def pretrain(ws: Workspace) -> None:
    ws.check_writable()
    ds = ws.load_dataset().split("train")
    seed = ws.cfg.pretrain_seed
    log.info("pretraining autoencoder (seed %d, %d epochs)", seed, ws.cfg.epochs["AE"])
    enc, dec, report = tr.pretrain_autoencoder(ds.frames, ws.cfg.train_config("AE", seed))
    paths = {m.role: ws.save(m, "AE", seed) for m in (enc, dec)}
    _write_train_outputs(ws, "AE", seed, report, paths)


def train(ws: Workspace, regime: str, seeds: list[int] | None = None) -> None:
    if regime == "AE":
        return pretrain(ws)
    if regime not in TRAINED_REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; choose from {('AE',) + TRAINED_REGIMES}")
    seeds = seeds or ws.cfg.seeds
    ws.check_writable()
    ds = ws.load_dataset().split("train")
    enc = dec = None
    if regime in NEEDS_AE:
        ae_seed = ws.cfg.pretrain_seed
        ws.require_regime("AE", [ae_seed], f"training {regime}")
        enc = ws.load("AE", ae_seed, "image_encoder")
        dec = ws.load("AE", ae_seed, "image_decoder")
    for seed in seeds:
        cfg = ws.cfg.train_config(regime, seed)
        log.info("training %s seed %d (%d epochs)", regime, seed, cfg.epochs)
        if regime == "IMG_CLS":
            model, report = tr.train_image_classifier(ds.frames, ds.labels, cfg)
            models = [model]
        elif regime == "TS_CLS":
            model, report = tr.train_ts_classifier(ds.windows, ds.labels, cfg)
            models = [model]
        elif regime == "XMODAL":
            ts, report = tr.train_crossmodal_baseline(ds, enc, dec, cfg)
            models = [ts]
        elif regime == "VS1":
            *models, report = tr.train_vsensenet1(ds, enc, cfg)
        elif regime == "VS1A":
            *models, report = tr.train_vsensenet1A(ds, cfg)
        elif regime == "VS1B":
            *models, report = tr.train_vsensenet1B(ds, enc, dec, cfg)
        elif regime == "VS2":
            *models, report = tr.train_vsensenet2(ds, enc, cfg)
        else:
            *models, report = tr.train_vsensenet2A(ds, enc, cfg)
        paths = {m.role: ws.save(m, regime, seed) for m in models}
        _write_train_outputs(ws, regime, seed, report, paths)
        last = report.history[-1]
        log.info("  %s seed %d final total loss %.5f (%.1f s)", regime, seed, last["total"], report.wall_time_s)


def _pipeline_models(ws: Workspace, regime: str, seed: int):
    """(ts_encoder, image_decoder, image_classifier) used at test time for a reconstructing regime."""
    ts = ws.load(regime, seed, "ts_encoder")
    if regime == "XMODAL":
        dec = ws.load("AE", ws.cfg.pretrain_seed, "image_decoder")
    else:
        dec = ws.load(regime, seed, "image_decoder")
    cls_regime = "IMG_CLS" if regime in NEEDS_IMG_CLS else regime
    return ts, dec, ws.load(cls_regime, seed, "image_classifier")


def _check_dependencies(ws: Workspace, regimes, seeds, what: str) -> None:
    for regime in regimes:
        ws.require_regime(regime, seeds, what)
        if regime in NEEDS_IMG_CLS:
            ws.require_regime("IMG_CLS", seeds, f"{what} ({regime} uses the image classifier)")
        if regime == "XMODAL":
            ws.require_regime("AE", [ws.cfg.pretrain_seed], what)


def evaluate_regime(ws: Workspace, regime: str, seed: int, test: Dataset) -> tuple[ev.RunEvaluation, ev.PipelineOutput]:
    if regime == "IMG_CLS":
        models = [ws.load(regime, seed, "image_classifier")]
        out = ev.classify_frames(models[0], test.frames)
    elif regime == "TS_CLS":
        models = [ws.load(regime, seed, "ts_classifier")]
        out = ev.classify_windows(models[0], test)
    else:
        models = _pipeline_models(ws, regime, seed)
        out = ev.run_test_pipeline(*models, test)
    fps = {m.role: m.fingerprint for m in models}
    return ev.evaluate_run(regime, seed, out, test, ws.hash, fps), out


def evaluate(ws: Workspace, regimes=None, seeds=None) -> ev.EvalReport:
    regimes = list(regimes or TRAINED_REGIMES)
    seeds = seeds or ws.cfg.seeds
    test = ws.load_dataset().split("test")
    _check_dependencies(ws, regimes, seeds, "evaluation")
    runs = []
    for regime in regimes:
        for seed in seeds:
            run, _ = evaluate_regime(ws, regime, seed, test)
            write_json(ws.eval_dir / "runs" / f"{regime}_{seed}.json", run.to_json())
            runs.append(run)
            log.info("evaluated %s seed %d: accuracy %.4f", regime, seed, run.metrics["accuracy"] or 0.0)
    report = ev.aggregate_runs(runs)
    write_json(ws.eval_dir / "eval_report.json", {**report.to_json(), "run_config": ws.cfg.to_dict()})
    atomic_write_bytes(ws.eval_dir / "table.txt", ev.format_table(report).encode())
    return report


def reconstruct(ws: Workspace, regime: str, seed: int, per_condition: int = 3) -> list[Path]:
    if regime not in ev.RECONSTRUCTING:
        raise ConfigError(f"{regime} does not reconstruct frames; choose from {sorted(ev.RECONSTRUCTING)}")
    test = ws.load_dataset().split("test")
    _check_dependencies(ws, [regime], [seed], "reconstruction")
    ts, dec, _ = _pipeline_models(ws, regime, seed)
    rec = ev.reconstruct(ts, dec, test.windows)
    out = ws.root / "reconstructions"
    paths = ev.dump_reconstructions(test, rec, f"{regime}-s{seed}", out, per_condition)
    paths += ev.dump_reconstructions(test, test.frames, "truth", out, per_condition)
    return paths


def report(ws: Workspace) -> str:
    path = ws.eval_dir / "eval_report.json"
    ws.require([path], "report")
    d = json.loads(path.read_text())
    d.pop("run_config", None)
    rep = ev.EvalReport.from_json(d)
    if rep.config_hash != ws.hash:
        raise IncompatibilityError(f"evaluation was produced under config {rep.config_hash[:12]}, "
                                   f"current config is {ws.hash[:12]}")
    return ev.format_table(rep)


def run_all(ws: Workspace) -> ev.EvalReport:
    """Every stage in dependency order."""
    t0 = time.perf_counter()
    generate(ws)
    pretrain(ws)
    for regime in TRAINED_REGIMES:
        train(ws, regime)
    rep = evaluate(ws)
    write_json(ws.root / "timing.json", {"wall_time_s": time.perf_counter() - t0})
    return rep
