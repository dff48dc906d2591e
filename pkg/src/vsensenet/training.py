"""Training regimes: autoencoder pretraining, VSenseNet I/II and ablations, baselines.

Every regime draws its randomness from named streams derived from the run
seed (``init/<role>``, ``shuffle``, ``dropout``), so regimes that share a role
start from identical weights and see identical batches. A loss term whose
weight is zero is reported but never enters the gradient; this makes the
reduction identities (VS1 with no embedding loss == VS1A, VS1B with no feature
loss == VS1) hold bit for bit.
"""

from __future__ import annotations

import hashlib
import time
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datagen import Dataset
from .errors import InvariantViolation, ParameterError, SequencingError
from .models import Model
from .numerics import Adam, bce_with_logits, mse_loss

REGIMES = ("AE", "VS1", "VS1A", "VS1B", "VS2", "VS2A", "XMODAL", "IMG_CLS", "TS_CLS")
COMPONENTS = ("emb", "rec", "cls", "feat")

# Loss components that take part in each regime.
REGIME_COMPONENTS = {
    "AE": ("rec",),
    "VS1": ("emb", "rec"),
    "VS1A": ("rec",),
    "VS1B": ("emb", "rec", "feat"),
    "VS2": ("emb", "rec", "cls"),
    "VS2A": ("emb", "rec", "cls"),
    "XMODAL": ("emb",),
    "IMG_CLS": ("cls",),
    "TS_CLS": ("cls",),
}

EMBED_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "VS1"
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    seed: int = 1
    lambda_emb: float = 1.0
    lambda_rec: float = 1.0
    lambda_cls: float = 1.0
    lambda_feat: float = 1.0
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ParameterError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError(f"epochs, batch_size and lr must be positive: {self}")
        for c in COMPONENTS:
            if getattr(self, f"lambda_{c}") < 0:
                raise ParameterError(f"lambda_{c} must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def weights(self) -> dict[str, float]:
        """Loss weights, zeroed for components the regime does not use."""
        used = REGIME_COMPONENTS[self.regime]
        w = {c: (getattr(self, f"lambda_{c}") if c in used else 0.0) for c in COMPONENTS}
        if self.regime == "VS1A":
            w["emb"] = 0.0
        return w


@dataclass
class TrainReport:
    regime: str
    seed: int
    config: dict
    history: list[dict] = field(default_factory=list)
    frozen_hashes: dict[str, str] = field(default_factory=dict)
    model_paths: dict[str, str] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        """Serializable form; wall time is kept out so reports are reproducible byte for byte."""
        d = asdict(self)
        d.pop("wall_time_s")
        return d


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose within one run."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_model(role: str, cfg: TrainConfig, window_len: int) -> Model:
    return Model(role, stream(cfg.seed, f"init/{role}"), dropout_rate=cfg.dropout_rate, window_len=window_len)


_EMBED_CACHE: dict[tuple[str, str], np.ndarray] = {}


def embed_frames(encoder: Model, frames: np.ndarray) -> np.ndarray:
    """Image-encoder embeddings of ``frames`` (inference mode).

    Results are memoized on (encoder parameters, frame bytes): the frozen
    encoder's targets are shared by several regimes and seeds.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    key = (encoder.param_hash(), hashlib.sha256(frames.data).hexdigest())
    if key not in _EMBED_CACHE:
        if len(_EMBED_CACHE) >= 4:
            _EMBED_CACHE.pop(next(iter(_EMBED_CACHE)))
        out = [encoder.forward(frames[i:i + EMBED_BATCH]) for i in range(0, len(frames), EMBED_BATCH)]
        _EMBED_CACHE[key] = np.concatenate(out).astype(np.float32)
    return _EMBED_CACHE[key]


class _FrozenGuard:
    """Records parameter hashes of frozen models and re-checks them on demand."""

    def __init__(self, models: dict[str, Model]):
        self.models = models
        self.hashes = {name: m.param_hash() for name, m in models.items()}

    def check(self, when: str) -> None:
        for name, m in self.models.items():
            now = m.param_hash()
            if now != self.hashes[name]:
                raise InvariantViolation(f"frozen {name} changed during training ({when}): "
                                         f"{self.hashes[name][:12]} -> {now[:12]}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _run_epochs(n: int, cfg: TrainConfig, step_fn, report: TrainReport, guard: _FrozenGuard,
                step_name: str, weights: dict[str, float], epochs: int | None = None,
                shuffle_name: str = "shuffle") -> None:
    shuffle_rng = stream(cfg.seed, shuffle_name)
    for epoch in range(epochs or cfg.epochs):
        sums = dict.fromkeys(COMPONENTS, 0.0)
        extra_sums: dict[str, float] = {}
        for idx in _batches(n, cfg.batch_size, shuffle_rng):
            comps = step_fn(idx)
            for k, v in comps.items():
                if k in sums:
                    sums[k] += v * len(idx)
                else:
                    extra_sums[k] = extra_sums.get(k, 0.0) + v * len(idx)
        record = {"step": step_name, "epoch": epoch + 1}
        record.update({c: sums[c] / n for c in COMPONENTS})
        record["total"] = sum(weights[c] * record[c] for c in COMPONENTS)
        record.update({k: v / n for k, v in extra_sums.items()})
        if not all(np.isfinite(v) for k, v in record.items() if isinstance(v, float)):
            raise InvariantViolation(f"non-finite loss in {cfg.regime} epoch {epoch + 1}: {record}")
        guard.check(f"{step_name} epoch {epoch + 1}")
        report.history.append(record)


def _new_report(cfg: TrainConfig) -> TrainReport:
    return TrainReport(cfg.regime, cfg.seed, asdict(cfg))


def _finish(report: TrainReport, guard: _FrozenGuard, t0: float) -> None:
    guard.check("end of training")
    report.frozen_hashes.update(guard.hashes)
    report.wall_time_s = time.perf_counter() - t0


def _require_two_classes(labels: np.ndarray) -> None:
    if len(np.unique(labels)) < 2:
        raise ParameterError("classifier training needs both stable and unstable samples")


def _require_nonempty(n: int) -> None:
    if n == 0:
        raise ParameterError("training set is empty")


# ---------------------------------------------------------------------------
# Autoencoder pretraining
# ---------------------------------------------------------------------------

def pretrain_autoencoder(frames: np.ndarray, cfg: TrainConfig) -> tuple[Model, Model, TrainReport]:
    """Fit encoder+decoder to reconstruct training frames under pixel MSE."""
    cfg = replace(cfg, regime="AE")
    frames = np.asarray(frames, dtype=np.float32)
    _require_nonempty(len(frames))
    t0 = time.perf_counter()
    enc = init_model("image_encoder", cfg, 0)
    dec = init_model("image_decoder", cfg, 0)
    enc.net.layers[0].skip_input_grad = True
    opt = Adam(enc.parameters() + dec.parameters(), lr=cfg.lr)
    w = cfg.weights()
    report, guard = _new_report(cfg), _FrozenGuard({})

    def step(idx):
        x = frames[idx]
        opt.zero_grad()
        rec = dec.forward(enc.forward(x, training=True), training=True)
        l_rec, g = mse_loss(rec, x)
        enc.backward(dec.backward(w["rec"] * g))
        opt.step()
        return {"rec": l_rec}

    _run_epochs(len(frames), cfg, step, report, guard, "main", w)
    enc.net.layers[0].skip_input_grad = False
    _finish(report, guard, t0)
    return enc, dec, report


# ---------------------------------------------------------------------------
# VSenseNet I family
# ---------------------------------------------------------------------------

def _train_vs1_family(ds: Dataset, cfg: TrainConfig, image_encoder: Model | None,
                      pretrained_decoder: Model | None) -> tuple[Model, Model, TrainReport]:
    _require_nonempty(len(ds))
    t0 = time.perf_counter()
    w = cfg.weights()
    frozen = {}
    if image_encoder is not None:
        frozen["image_encoder"] = image_encoder
    if pretrained_decoder is not None:
        frozen["pretrained_decoder"] = pretrained_decoder
    guard = _FrozenGuard(frozen)
    targets = embed_frames(image_encoder, ds.frames) if image_encoder is not None else None

    ts = init_model("ts_encoder", cfg, ds.window_len)
    dec = init_model("image_decoder", cfg, ds.window_len)
    opt = Adam(ts.parameters() + dec.parameters(), lr=cfg.lr)
    drop_rng = stream(cfg.seed, "dropout")
    report = _new_report(cfg)

    def step(idx):
        opt.zero_grad()
        x, y = ds.windows[idx], ds.frames[idx]
        emb = ts.forward(x, training=True, rng=drop_rng)
        rec = dec.forward(emb, training=True)
        comps = {}
        comps["rec"], g_rec = mse_loss(rec, y)
        tap_grad = None
        if pretrained_decoder is not None:
            target_tap = pretrained_decoder.forward_to_tap(targets[idx])
            comps["feat"], g_feat = mse_loss(dec.tapped, target_tap)
            if w["feat"]:
                tap_grad = w["feat"] * g_feat
        d_emb = dec.backward(w["rec"] * g_rec, tap_grad=tap_grad)
        if targets is not None:
            comps["emb"], g_emb = mse_loss(emb, targets[idx])
            if w["emb"]:
                d_emb = d_emb + w["emb"] * g_emb
        ts.backward(d_emb)
        opt.step()
        return comps

    _run_epochs(len(ds), cfg, step, report, guard, "main", w)
    _finish(report, guard, t0)
    return ts, dec, report


def train_vsensenet1(ds: Dataset, image_encoder: Model, cfg: TrainConfig):
    """Time-series encoder + decoder (from scratch) under embedding and reconstruction loss."""
    return _train_vs1_family(ds, replace(cfg, regime="VS1"), image_encoder, None)


def train_vsensenet1A(ds: Dataset, cfg: TrainConfig):
    """Ablation: reconstruction loss only; the image encoder is never touched."""
    return _train_vs1_family(ds, replace(cfg, regime="VS1A"), None, None)


def train_vsensenet1B(ds: Dataset, image_encoder: Model, pretrained_decoder: Model, cfg: TrainConfig):
    """Ablation: adds a feature-matching loss against the pretrained decoder's tap."""
    return _train_vs1_family(ds, replace(cfg, regime="VS1B"), image_encoder, pretrained_decoder)


# ---------------------------------------------------------------------------
# Embedding regression (VS2 step 1, cross-modal baseline)
# ---------------------------------------------------------------------------

def _fit_ts_encoder(ds: Dataset, targets: np.ndarray, cfg: TrainConfig, report: TrainReport,
                    guard: _FrozenGuard, step_name: str, epochs: int | None = None) -> Model:
    ts = init_model("ts_encoder", cfg, ds.window_len)
    opt = Adam(ts.parameters(), lr=cfg.lr)
    drop_rng = stream(cfg.seed, "dropout")
    w = cfg.weights()

    def step(idx):
        opt.zero_grad()
        emb = ts.forward(ds.windows[idx], training=True, rng=drop_rng)
        l_emb, g = mse_loss(emb, targets[idx])
        ts.backward(w["emb"] * g)
        opt.step()
        return {"emb": l_emb}

    weights = dict.fromkeys(COMPONENTS, 0.0)
    weights["emb"] = w["emb"]
    _run_epochs(len(ds), cfg, step, report, guard, step_name, weights, epochs)
    return ts


def train_crossmodal_baseline(ds: Dataset, image_encoder: Model, image_decoder: Model, cfg: TrainConfig):
    """Regress the time-series embedding onto the image embedding; decoder stays pretrained."""
    cfg = replace(cfg, regime="XMODAL")
    _require_nonempty(len(ds))
    t0 = time.perf_counter()
    guard = _FrozenGuard({"image_encoder": image_encoder, "image_decoder": image_decoder})
    report = _new_report(cfg)
    ts = _fit_ts_encoder(ds, embed_frames(image_encoder, ds.frames), cfg, report, guard, "main")
    _finish(report, guard, t0)
    return ts, report


class VSenseNet2Trainer:
    """Two-step VSenseNet II: embedding regression, then decoder + classifier on frozen embeddings."""

    def __init__(self, ds: Dataset, image_encoder: Model, cfg: TrainConfig):
        _require_nonempty(len(ds))
        _require_two_classes(ds.labels)
        self.ds, self.image_encoder = ds, image_encoder
        self.cfg = replace(cfg, regime="VS2")
        self.report = _new_report(self.cfg)
        self.ts_encoder: Model | None = None
        self.decoder: Model | None = None
        self.classifier: Model | None = None
        self._t0 = time.perf_counter()
        # Populated with the arrays fed to the classifier when tracing is on (tests).
        self.trace_classifier_inputs: list | None = None

    def step1(self) -> Model:
        guard = _FrozenGuard({"image_encoder": self.image_encoder})
        targets = embed_frames(self.image_encoder, self.ds.frames)
        self.ts_encoder = _fit_ts_encoder(self.ds, targets, self.cfg, self.report, guard, "step1")
        guard.check("after step 1")
        return self.ts_encoder

    def step2(self) -> tuple[Model, Model]:
        if self.ts_encoder is None:
            raise SequencingError("VSenseNet II step 2 requires a completed step 1")
        ds, cfg, ts = self.ds, self.cfg, self.ts_encoder
        guard = _FrozenGuard({"image_encoder": self.image_encoder, "ts_encoder": ts})
        w = cfg.weights()
        dec = init_model("image_decoder", cfg, ds.window_len)
        cls = init_model("image_classifier", cfg, ds.window_len)
        opt = Adam(dec.parameters() + cls.parameters(), lr=cfg.lr)
        labels = ds.labels.astype(np.float32)

        def step(idx):
            opt.zero_grad()
            # Embeddings are regenerated from the frozen encoder each batch.
            emb = ts.forward(ds.windows[idx], training=False)
            rec = dec.forward(emb, training=True)
            if self.trace_classifier_inputs is not None:
                self.trace_classifier_inputs.append(rec)
            logits = cls.forward(rec, training=True)
            comps = {}
            comps["rec"], g_rec = mse_loss(rec, ds.frames[idx])
            comps["cls"], g_cls = bce_with_logits(logits, labels[idx])
            comps["acc"] = float(np.mean((logits > 0) == (labels[idx] > 0.5)))
            d_rec = w["rec"] * g_rec
            if w["cls"]:
                d_rec = d_rec + cls.backward(w["cls"] * g_cls)
            dec.backward(d_rec)
            opt.step()
            return comps

        weights = dict(w, emb=0.0)
        _run_epochs(len(ds), cfg, step, self.report, guard, "step2", weights, shuffle_name="shuffle/step2")
        _finish(self.report, guard, self._t0)
        self.decoder, self.classifier = dec, cls
        return dec, cls


def train_vsensenet2(ds: Dataset, image_encoder: Model, cfg: TrainConfig):
    trainer = VSenseNet2Trainer(ds, image_encoder, cfg)
    ts = trainer.step1()
    dec, cls = trainer.step2()
    return ts, dec, cls, trainer.report


def train_vsensenet2A(ds: Dataset, image_encoder: Model, cfg: TrainConfig):
    """Ablation: encoder, decoder and classifier trained jointly in one step."""
    cfg = replace(cfg, regime="VS2A")
    _require_nonempty(len(ds))
    _require_two_classes(ds.labels)
    t0 = time.perf_counter()
    w = cfg.weights()
    guard = _FrozenGuard({"image_encoder": image_encoder})
    targets = embed_frames(image_encoder, ds.frames)
    ts = init_model("ts_encoder", cfg, ds.window_len)
    dec = init_model("image_decoder", cfg, ds.window_len)
    cls = init_model("image_classifier", cfg, ds.window_len)
    opt = Adam(ts.parameters() + dec.parameters() + cls.parameters(), lr=cfg.lr)
    drop_rng = stream(cfg.seed, "dropout")
    labels = ds.labels.astype(np.float32)
    report = _new_report(cfg)

    def step(idx):
        opt.zero_grad()
        emb = ts.forward(ds.windows[idx], training=True, rng=drop_rng)
        rec = dec.forward(emb, training=True)
        comps = {}
        comps["rec"], g_rec = mse_loss(rec, ds.frames[idx])
        d_rec = w["rec"] * g_rec
        if w["cls"]:
            logits = cls.forward(rec, training=True)
            comps["cls"], g_cls = bce_with_logits(logits, labels[idx])
            d_rec = d_rec + cls.backward(w["cls"] * g_cls)
        else:
            comps["cls"], _ = bce_with_logits(cls.forward(rec), labels[idx])
        d_emb = dec.backward(d_rec)
        comps["emb"], g_emb = mse_loss(emb, targets[idx])
        if w["emb"]:
            d_emb = d_emb + w["emb"] * g_emb
        ts.backward(d_emb)
        opt.step()
        return comps

    _run_epochs(len(ds), cfg, step, report, guard, "main", w)
    _finish(report, guard, t0)
    return ts, dec, cls, report


# ---------------------------------------------------------------------------
# Single-modality baselines
# ---------------------------------------------------------------------------

def _train_classifier(model: Model, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                      report: TrainReport) -> None:
    _require_nonempty(len(labels))
    _require_two_classes(labels)
    opt = Adam(model.parameters(), lr=cfg.lr)
    drop_rng = stream(cfg.seed, "dropout")
    y = labels.astype(np.float32)
    w = cfg.weights()
    model.net.layers[0].skip_input_grad = True

    def step(idx):
        opt.zero_grad()
        logits = model.forward(inputs[idx], training=True, rng=drop_rng)
        l_cls, g = bce_with_logits(logits, y[idx])
        model.backward(w["cls"] * g)
        opt.step()
        return {"cls": l_cls, "acc": float(np.mean((logits > 0) == (y[idx] > 0.5)))}

    _run_epochs(len(labels), cfg, step, report, _FrozenGuard({}), "main", w)
    model.net.layers[0].skip_input_grad = False


def train_image_classifier(frames: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """BCE classifier on true frames. Also serves as the VSenseNet I test-time classifier."""
    cfg = replace(cfg, regime="IMG_CLS")
    t0 = time.perf_counter()
    model = init_model("image_classifier", cfg, 0)
    report = _new_report(cfg)
    _train_classifier(model, np.asarray(frames, dtype=np.float32), np.asarray(labels), cfg, report)
    report.wall_time_s = time.perf_counter() - t0
    return model, report


def train_ts_classifier(windows: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Pressure-only baseline: the time-series encoder trunk plus two dense layers."""
    cfg = replace(cfg, regime="TS_CLS")
    t0 = time.perf_counter()
    windows = np.asarray(windows, dtype=np.float32)
    model = init_model("ts_classifier", cfg, windows.shape[-1])
    report = _new_report(cfg)
    _train_classifier(model, windows, np.asarray(labels), cfg, report)
    report.wall_time_s = time.perf_counter() - t0
    return model, report
