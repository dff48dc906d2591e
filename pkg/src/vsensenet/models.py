"""Network architectures for the five model roles and their on-disk format.

Roles: ``image_encoder`` (frame -> 128-d embedding), ``image_decoder``
(embedding -> frame, with a tap after the second transposed-convolution block),
``ts_encoder`` (pressure window -> embedding), ``image_classifier`` (frame ->
logit) and ``ts_classifier`` (pressure window -> logit).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, IncompatibilityError, ParameterError
from .numerics import (
    LSTM,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2d,
    Param,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    Upsample2d,
)

EMBED_DIM = 128
FRAME_SIZE = 64
N_CHANNELS = 4
PRESSURE_SCALE = 1000.0  # Pa; fixed so that amplitude survives normalization
LSTM_HIDDEN = (64, 128)

ROLES = ("image_encoder", "image_decoder", "ts_encoder", "image_classifier", "ts_classifier")
ROLE_CODES = {role: i + 1 for i, role in enumerate(ROLES)}

MODEL_MAGIC = b"VSNM"
MODEL_VERSION = 1
DECODER_TAP = 8  # index of the ReLU closing the second ConvTranspose2d block


@dataclass(frozen=True)
class ModelSpec:
    role: str
    layers: tuple  # layer config dicts, JSON-serialisable
    input_shape: tuple[int, ...]
    parameter_count: int
    build_args: dict

    @property
    def fingerprint(self) -> str:
        payload = json.dumps({"role": self.role, "layers": list(self.layers),
                              "input_shape": list(self.input_shape)},
                             sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def _image_encoder(rng):
    return [
        Conv2d(1, 16, 3, rng=rng), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, rng=rng), ReLU(), MaxPool2d(2),
        Conv2d(32, 64, 3, rng=rng), ReLU(), MaxPool2d(2),
        Flatten(), Dense(64 * 8 * 8, EMBED_DIM, rng=rng),
    ]


def _image_decoder(rng):
    return [
        Dense(EMBED_DIM, 64 * 8 * 8, rng=rng), ReLU(), Reshape((64, 8, 8)),
        Upsample2d(2), ConvTranspose2d(64, 32, 3, rng=rng), ReLU(),
        Upsample2d(2), ConvTranspose2d(32, 16, 3, rng=rng), ReLU(),
        Upsample2d(2), ConvTranspose2d(16, 1, 3, rng=rng), Sigmoid(),
    ]


def _image_classifier(rng):
    return [
        Conv2d(1, 16, 3, rng=rng), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, rng=rng), ReLU(), MaxPool2d(2),
        Flatten(), Dense(32 * 16 * 16, 64, rng=rng), ReLU(), Dense(64, 1, rng=rng),
    ]


def _ts_trunk(rng, dropout_rate):
    h1, h2 = LSTM_HIDDEN
    return [
        LSTM(N_CHANNELS, h1, return_sequence=True, rng=rng), Dropout(dropout_rate),
        LSTM(h1, h2, return_sequence=False, rng=rng), Dropout(dropout_rate),
        Dense(h2, EMBED_DIM, rng=rng),
    ]


def _ts_classifier(rng, dropout_rate):
    return _ts_trunk(rng, dropout_rate) + [Dense(EMBED_DIM, 32, rng=rng), ReLU(), Dense(32, 1, rng=rng)]


class Model:
    """A network for one role plus the bookkeeping needed to verify and persist it."""

    def __init__(self, role: str, rng: np.random.Generator | None = None, *,
                 dropout_rate: float = 0.2, window_len: int = 75):
        if role not in ROLES:
            raise ParameterError(f"unknown model role {role!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.role = role
        self.window_len = window_len
        self.dropout_rate = dropout_rate
        if role == "image_encoder":
            layers = _image_encoder(rng)
        elif role == "image_decoder":
            layers = _image_decoder(rng)
        elif role == "image_classifier":
            layers = _image_classifier(rng)
        elif role == "ts_encoder":
            layers = _ts_trunk(rng, dropout_rate)
        else:
            layers = _ts_classifier(rng, dropout_rate)
        self.net = Sequential(layers)
        if role == "image_decoder":
            self.net.tap_index = DECODER_TAP
        self.forward_calls = 0

    # -- identity ---------------------------------------------------------

    @property
    def is_ts(self) -> bool:
        return self.role in ("ts_encoder", "ts_classifier")

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.role == "image_decoder":
            return (EMBED_DIM,)
        if self.is_ts:
            return (N_CHANNELS, self.window_len)
        return (1, FRAME_SIZE, FRAME_SIZE)

    @property
    def spec(self) -> ModelSpec:
        build = {"role": self.role}
        if self.is_ts:
            build.update(dropout_rate=self.dropout_rate, window_len=self.window_len)
        return ModelSpec(self.role, tuple(layer.config() for layer in self.net.layers),
                         self.input_shape, self.parameter_count, build)

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def parameters(self) -> list[Param]:
        return self.net.parameters()

    def named_parameters(self) -> dict[str, Param]:
        return dict(self.net.params)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- compute ----------------------------------------------------------

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if self.role == "image_decoder":
            if x.ndim == 1:
                x = x[None]
            if x.ndim != 2 or x.shape[1] != EMBED_DIM:
                raise DimensionError(f"axis embedding: decoder expects {EMBED_DIM}-d input, got shape {x.shape}")
            return x
        if self.is_ts:
            if x.ndim == 2:
                x = x[None]
            if x.ndim != 3 or x.shape[1] != N_CHANNELS:
                raise DimensionError(f"axis channel: expected (N, {N_CHANNELS}, W) windows, got shape {x.shape}")
            if x.shape[2] != self.window_len:
                raise DimensionError(f"axis W: window length {x.shape[2]} != trained length {self.window_len}")
            return np.ascontiguousarray(x.transpose(0, 2, 1)) / x.dtype.type(PRESSURE_SCALE)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, FRAME_SIZE, FRAME_SIZE):
            raise DimensionError(f"axis H/W: expected 1x{FRAME_SIZE}x{FRAME_SIZE} frames, got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None
                ) -> np.ndarray:
        """Batched forward pass.

        Images are returned as (N, 64, 64), logits as (N,), embeddings as (N, 128).
        """
        self.forward_calls += 1
        out = self.net.forward(self._prepare(x), training=training, rng=rng)
        if self.role == "image_decoder":
            return out[:, 0]
        if self.role in ("image_classifier", "ts_classifier"):
            return out[:, 0]
        return out

    __call__ = forward

    def backward(self, grad: np.ndarray, tap_grad: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate ``grad`` (shaped like the forward output); returns the input gradient."""
        if self.role == "image_decoder":
            grad = grad[:, None]
        elif self.role in ("image_classifier", "ts_classifier"):
            grad = grad[:, None]
        dx = self.net.backward(grad, tap_grad=tap_grad)
        if dx is not None and self.role in ("image_encoder", "image_classifier"):
            dx = dx[:, 0]
        return dx

    def forward_to_tap(self, x: np.ndarray) -> np.ndarray:
        """Decoder only: inference up to the tap, skipping the remaining layers."""
        if self.role != "image_decoder":
            raise DimensionError(f"{self.role} has no tap")
        self.forward_calls += 1
        return self.net.forward(self._prepare(x), stop=self.net.tap_index)

    @property
    def tapped(self) -> np.ndarray:
        """Feature map after the second transposed-convolution block (decoder only)."""
        if self.role != "image_decoder":
            raise DimensionError(f"{self.role} has no tap")
        return self.net.tapped

    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        """Classifier roles: unstable (1) iff sigmoid(logit) > 0.5, so logit 0 is stable."""
        return (self.forward(x) > 0).astype(np.uint8)

    # -- persistence --------------------------------------------------------

    def state_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in self.parameters())

    def copy(self) -> "Model":
        other = Model(self.role, np.random.default_rng(0), dropout_rate=self.dropout_rate,
                      window_len=self.window_len)
        for src, dst in zip(self.parameters(), other.parameters()):
            dst.data = src.data.copy()
            dst.grad = np.zeros_like(dst.data)
        return other


def save_model(model: Model, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write ``model`` atomically. ``extra`` (e.g. a config hash) is embedded as JSON."""
    meta = json.dumps({"build": model.spec.build_args, "extra": extra or {}},
                      sort_keys=True, separators=(",", ":")).encode()
    blob = model.state_bytes()
    header = (MODEL_MAGIC + struct.pack("<HB", MODEL_VERSION, ROLE_CODES[model.role])
              + bytes.fromhex(model.fingerprint) + struct.pack("<I", len(meta)) + meta
              + struct.pack("<Q", len(blob) // 4))
    atomic_write_bytes(path, header + blob)


def read_model_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise FormatError("bad model magic", 0)
    pos = 4
    if len(data) < pos + 3 + 32 + 4:
        raise FormatError("truncated model header", len(data))
    version, role_code = struct.unpack_from("<HB", data, pos)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}", pos)
    pos += 3
    fingerprint = data[pos:pos + 32].hex()
    pos += 32
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + meta_len + 8:
        raise FormatError("truncated model metadata", len(data))
    try:
        meta = json.loads(data[pos:pos + meta_len])
    except ValueError as exc:
        raise FormatError(f"unreadable model metadata: {exc}", pos) from exc
    pos += meta_len
    (n_floats,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    roles = {v: k for k, v in ROLE_CODES.items()}
    if role_code not in roles:
        raise FormatError(f"unknown role byte {role_code}", 6)
    meta.update(role=roles[role_code], fingerprint=fingerprint, n_floats=n_floats)
    return meta, pos


def load_model(path: str | os.PathLike, expected: ModelSpec | str | None = None) -> Model:
    """Load a model file.

    ``expected`` may be a :class:`ModelSpec` (fingerprints must match exactly) or
    a role name (roles must match). Returns the model with its embedded
    ``extra`` metadata available as ``model.extra``.
    """
    data = Path(path).read_bytes()
    meta, pos = read_model_header(data)
    if len(data) != pos + 4 * meta["n_floats"]:
        raise FormatError(f"model blob holds {len(data) - pos} bytes, header promises {4 * meta['n_floats']}",
                          len(data))
    build = dict(meta["build"])
    role = build.pop("role")
    if isinstance(expected, ModelSpec) and expected.fingerprint != meta["fingerprint"]:
        raise IncompatibilityError(
            f"model file {path} has fingerprint {meta['fingerprint']} ({role}); "
            f"requested {expected.fingerprint} ({expected.role})")
    if isinstance(expected, str) and expected != role:
        raise IncompatibilityError(f"model file {path} holds role {role} (fingerprint {meta['fingerprint']}); "
                                   f"requested role {expected}")
    model = Model(role, np.random.default_rng(0), **build)
    if model.fingerprint != meta["fingerprint"]:
        raise IncompatibilityError(
            f"model file {path} fingerprint {meta['fingerprint']} does not match the rebuilt "
            f"architecture {model.fingerprint}")
    blob = np.frombuffer(data, dtype="<f4", offset=pos)
    if blob.size != model.parameter_count:
        raise FormatError(f"parameter blob has {blob.size} values, architecture needs {model.parameter_count}", pos)
    off = 0
    for p in model.parameters():
        p.data = blob[off:off + p.data.size].reshape(p.data.shape).astype(np.float32)
        p.grad = np.zeros_like(p.data)
        off += p.data.size
    model.extra = meta.get("extra", {})
    return model


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
