"""Synthetic swirl-combustor data: 4-channel pressure plus phase-locked flame frames.

Each operating condition produces 3 s of pressure at 9 kHz and frames at
3 kHz. Unstable conditions carry a 130-150 Hz limit cycle with a second
harmonic; stable conditions carry low-level band-limited noise. The flame
surrogate is a sum of Gaussian blobs whose axial position and brightness follow
the phase of the fundamental, so pressure windows determine frame content.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, LabelingError, ParameterError
from .metrics import dominant_frequency, rms
from .models import atomic_write_bytes

PRESSURE_RATE = 9000
FRAME_RATE = 3000
DURATION_S = 3
N_PRESSURE = PRESSURE_RATE * DURATION_S  # 27000
N_FRAMES = FRAME_RATE * DURATION_S  # 9000
RATIO = PRESSURE_RATE // FRAME_RATE  # 3
N_CHANNELS = 4
FRAME_SIZE = 64

STABLE, UNSTABLE = 0, 1
LABEL_NAMES = {STABLE: "stable", UNSTABLE: "unstable"}

STABLE_RMS_MAX = 100.0
UNSTABLE_RMS_MIN = 500.0
INSTABILITY_BAND = (130.0, 150.0)
SHARP_PEAK_RATIO = 10.0

UNSTABLE_RMS_RANGE = (500.0, 900.0)
STABLE_RMS_RANGE = (30.0, 90.0)
STABLE_NOISE_CUTOFF_HZ = 500.0
HARMONIC_RATIO = 0.25
UNSTABLE_NOISE_FRACTION = 0.05  # broadband noise RMS as a fraction of the total
MODE_PHASES = np.array([0.0, 0.9, 1.8, 2.7])  # rad, channel phase lags of the acoustic mode
MODE_JITTER = 0.05  # rad
ROLLUP_OFFSET_PX = 20.0

FLAP_PX = 12.0
FLAP_INTENSITY = 0.4
BACKGROUND = 0.05

DATASET_MAGIC = b"VSNS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class ConditionSpec:
    condition_id: int
    premixing_length: float  # mm, 90 or 120
    ffr: float  # lpm
    afr: float  # lpm
    label: int  # STABLE / UNSTABLE
    split: str = "train"
    seed: int = 0

    @property
    def name(self) -> str:
        return f"{LABEL_NAMES[self.label].capitalize()}_{self.premixing_length:g}/{self.ffr:g}/{self.afr:g}"


def default_conditions(master_seed: int = 0) -> list[ConditionSpec]:
    """The six operating points: four for training, two held out for testing."""
    rows = [
        (120, 60, 600, STABLE, "train"),
        (90, 45, 450, STABLE, "train"),
        (120, 45, 900, UNSTABLE, "train"),
        (90, 28, 600, UNSTABLE, "train"),
        (120, 45, 450, STABLE, "test"),
        (90, 45, 900, UNSTABLE, "test"),
    ]
    return [ConditionSpec(i, float(pl), float(ffr), float(afr), lab, split, condition_seed(master_seed, i))
            for i, (pl, ffr, afr, lab, split) in enumerate(rows)]


def condition_seed(master_seed: int, condition_id: int) -> int:
    """Independent 64-bit stream seed per (master seed, condition)."""
    ss = np.random.SeedSequence([master_seed, condition_id])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Pressure
# ---------------------------------------------------------------------------

@dataclass
class PressureSeries:
    values: np.ndarray  # (4, 27000) Pa, zero-mean per channel
    sample_rate: int = PRESSURE_RATE
    f0: float | None = None  # fundamental of the limit cycle (unstable only)
    phase0: float | None = None  # reference phase of channel 0's fundamental at t=0
    amplitude: float | None = None  # fundamental amplitude A, Pa

    def fundamental_phase(self, t: np.ndarray) -> np.ndarray:
        return 2 * np.pi * self.f0 * t + self.phase0


def _band_limited_noise(rng: np.random.Generator, n: int, cutoff: float, rate: int) -> np.ndarray:
    """White noise shaped by a 2nd-order Butterworth magnitude response."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1 / rate)
    spec *= 1 / np.sqrt(1 + (f / cutoff) ** 4)
    out = np.fft.irfft(spec, n)
    return out - out.mean()


def synth_pressure(cond: ConditionSpec, rng: np.random.Generator, *, noise: bool = True,
                   amplitude: float | None = None, target_rms: float | None = None) -> PressureSeries:
    """Generate 3 s of 4-channel pressure for one condition.

    ``amplitude`` fixes the fundamental amplitude A (Pa) of an unstable series
    instead of tuning it to a drawn RMS; ``noise=False`` removes the broadband
    component.
    """
    t = np.arange(N_PRESSURE) / PRESSURE_RATE
    if cond.label == UNSTABLE:
        f0 = rng.uniform(*INSTABILITY_BAND)
        # Standing-wave surrogate: the mode shape belongs to the combustor, so the
        # per-channel phase offsets vary only slightly between operating points.
        phases = MODE_PHASES + rng.normal(0, MODE_JITTER, N_CHANNELS) + rng.uniform(0, 2 * np.pi)
        phases2 = 2 * MODE_PHASES + rng.normal(0, MODE_JITTER, N_CHANNELS) + rng.uniform(0, 2 * np.pi)
        r = target_rms if target_rms is not None else rng.uniform(*UNSTABLE_RMS_RANGE)
        noise_rms = UNSTABLE_NOISE_FRACTION * r if noise else 0.0
        if amplitude is None:
            amplitude = math.sqrt(2 * (r * r - noise_rms * noise_rms) / (1 + HARMONIC_RATIO ** 2))
        values = np.empty((N_CHANNELS, N_PRESSURE))
        for c in range(N_CHANNELS):
            values[c] = (amplitude * np.sin(2 * np.pi * f0 * t + phases[c])
                         + HARMONIC_RATIO * amplitude * np.sin(4 * np.pi * f0 * t + phases2[c]))
            if noise:
                nz = rng.standard_normal(N_PRESSURE)
                values[c] += noise_rms * (nz - nz.mean()) / nz.std()
        values -= values.mean(axis=1, keepdims=True)
        return PressureSeries(values, f0=f0, phase0=float(phases[0]), amplitude=amplitude)
    r = target_rms if target_rms is not None else rng.uniform(*STABLE_RMS_RANGE)
    values = np.empty((N_CHANNELS, N_PRESSURE))
    for c in range(N_CHANNELS):
        nz = _band_limited_noise(rng, N_PRESSURE, STABLE_NOISE_CUTOFF_HZ, PRESSURE_RATE)
        values[c] = r * nz / np.sqrt(np.mean(nz * nz))
    return PressureSeries(values, amplitude=0.0)


# ---------------------------------------------------------------------------
# Labeling
# ---------------------------------------------------------------------------

def label_oracle(series: PressureSeries | np.ndarray, sample_rate: int = PRESSURE_RATE) -> int:
    """Label a multichannel pressure record by RMS level and spectral peak.

    Unstable: mean channel RMS above 500 Pa with a sharp (peak/median > 10)
    dominant peak inside 130-150 Hz. Stable: mean channel RMS below 100 Pa.
    Anything else raises :class:`LabelingError`.
    """
    values = series.values if isinstance(series, PressureSeries) else np.atleast_2d(series)
    if isinstance(series, PressureSeries):
        sample_rate = series.sample_rate
    if values.shape[-1] < sample_rate:
        raise ParameterError(f"labeling needs >= 1 s of data, got {values.shape[-1]} samples")
    level = float(np.mean([rms(ch) for ch in values]))
    if level < STABLE_RMS_MAX:
        return STABLE
    freq, ratio = dominant_frequency(values, sample_rate)
    if level > UNSTABLE_RMS_MIN and INSTABILITY_BAND[0] <= freq <= INSTABILITY_BAND[1] and ratio > SHARP_PEAK_RATIO:
        return UNSTABLE
    raise LabelingError(f"ambiguous pressure record: RMS {level:.1f} Pa, dominant {freq:.1f} Hz, "
                        f"peak ratio {ratio:.1f}")


# ---------------------------------------------------------------------------
# Flame frames
# ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)


@dataclass(frozen=True)
class FlameGeometry:
    """Per-condition base blob layout (rows are the axial direction)."""

    center_row: float
    center_col: float
    sigma_row: float
    sigma_col: float
    peak: float


def flame_geometry(cond: ConditionSpec) -> FlameGeometry:
    # 90 mm (partial premixing) burns as a wider, shorter flame.
    wide = cond.premixing_length < 105
    sigma_col = 7.5 if wide else 5.0
    sigma_row = 6.0 if wide else 8.0
    # Higher air flow pushes the flame slightly downstream.
    center_row = 22.0 + 2.0 * (cond.afr - 600.0) / 300.0
    return FlameGeometry(center_row, 32.0, sigma_row, sigma_col, 0.75)


def _blob(row: float, col: float, s_row: float, s_col: float) -> np.ndarray:
    return np.exp(-0.5 * (((_YY - row) / s_row) ** 2 + ((_XX - col) / s_col) ** 2))


def render_frame(phase: float, amplitude: float, cond: ConditionSpec, rng: np.random.Generator
                 ) -> np.ndarray:
    """Render one 64x64 frame in [0, 1].

    Stable: one compact blob with mild rng jitter. Unstable: the main blob is
    displaced axially by 12 px * sin(phase) and scaled by (1 + 0.4 sin(phase));
    a steady roll-up blob sits 20 px downstream of the base position, with a
    strength that grows with ``amplitude`` (Pa).
    """
    if amplitude < 0:
        raise ParameterError(f"amplitude must be >= 0, got {amplitude}")
    g = flame_geometry(cond)
    if cond.label == STABLE:
        row = g.center_row + rng.normal(0, 0.3)
        col = g.center_col + rng.normal(0, 0.3)
        peak = g.peak * (1 + rng.normal(0, 0.02))
        img = peak * _blob(row, col, g.sigma_row, g.sigma_col)
    else:
        s = math.sin(phase)
        row = g.center_row + FLAP_PX * s
        peak = g.peak * (1 + FLAP_INTENSITY * s)
        img = peak * _blob(row, g.center_col, g.sigma_row, g.sigma_col)
        strength = 0.5 * min(max(amplitude / 1000.0, 0.5), 1.0)
        rollup = _blob(g.center_row + ROLLUP_OFFSET_PX, g.center_col, 4.0, 1.6 * g.sigma_col)
        img += strength * rollup
    return np.clip(BACKGROUND + img, 0.0, 1.0)


def blob_center_row(frame: np.ndarray) -> float:
    """Intensity-weighted row centroid above the background level."""
    w = np.clip(frame - BACKGROUND, 0, None)
    return float((w * _YY).sum() / w.sum())


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    conditions: list[ConditionSpec]
    windows: np.ndarray  # (N, 4, W) float32, Pa
    frames: np.ndarray  # (N, 64, 64) float32
    labels: np.ndarray  # (N,) uint8
    condition_ids: np.ndarray  # (N,) uint32
    frame_indices: np.ndarray  # (N,) uint32
    window_len: int
    config_hash: str = "0" * 64
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def window_end_indices(self) -> np.ndarray:
        return self.frame_indices.astype(np.int64) * RATIO

    def condition(self, condition_id: int) -> ConditionSpec:
        for c in self.conditions:
            if c.condition_id == condition_id:
                return c
        raise KeyError(condition_id)

    def split(self, name: str) -> "Dataset":
        ids = [c.condition_id for c in self.conditions if c.split == name]
        return self.select(np.isin(self.condition_ids, ids))

    def select(self, mask: np.ndarray) -> "Dataset":
        keep = set(np.unique(self.condition_ids[mask]).tolist())
        return replace(self, conditions=[c for c in self.conditions if c.condition_id in keep],
                       windows=self.windows[mask], frames=self.frames[mask], labels=self.labels[mask],
                       condition_ids=self.condition_ids[mask], frame_indices=self.frame_indices[mask])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.windows, self.frames, self.labels, self.condition_ids, self.frame_indices):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def frame_indices_for(window_len: int, stride: int, n_pressure: int = N_PRESSURE) -> np.ndarray:
    """Frames whose causal window [3j - W + 1, 3j] lies inside the record, every ``stride`` frames."""
    if window_len < 1:
        raise ParameterError(f"window length must be >= 1, got {window_len}")
    if window_len > n_pressure:
        raise ParameterError(f"window length {window_len} exceeds series length {n_pressure}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    n_frames = (n_pressure - 1) // RATIO + 1
    first = -(-(window_len - 1) // RATIO)
    return np.arange(first, n_frames, stride, dtype=np.int64)


def generate_condition(cond: ConditionSpec, window_len: int, stride: int):
    """Pressure, oracle label and aligned samples for one condition."""
    rng = np.random.default_rng(cond.seed)
    series = synth_pressure(cond, rng)
    oracle = label_oracle(series)
    if oracle != cond.label:
        raise LabelingError(f"condition {cond.condition_id} ({cond.name}): generator label "
                            f"{LABEL_NAMES[cond.label]} but oracle says {LABEL_NAMES[oracle]}")
    frames_idx = frame_indices_for(window_len, stride)
    ends = frames_idx * RATIO
    offsets = np.arange(-window_len + 1, 1)
    windows = series.values[:, ends[:, None] + offsets[None, :]].transpose(1, 0, 2)
    frame_rng = np.random.default_rng([cond.seed, 1])
    frames = np.empty((len(frames_idx), FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    for k, j in enumerate(frames_idx):
        if cond.label == UNSTABLE:
            phase = float(series.fundamental_phase(np.array(j / FRAME_RATE)))
        else:
            phase = 0.0
        frames[k] = render_frame(phase, series.amplitude, cond, frame_rng)
    freq, ratio = dominant_frequency(series.values, PRESSURE_RATE)
    info = {"condition_id": cond.condition_id, "name": cond.name, "split": cond.split,
            "label": LABEL_NAMES[cond.label],
            "rms_pa": float(np.mean([rms(ch) for ch in series.values])),
            "dominant_hz": freq, "peak_ratio": ratio, "n_samples": int(len(frames_idx))}
    return series, windows.astype(np.float32), frames, frames_idx, info


def build_dataset(conditions: list[ConditionSpec], window_len: int = 75, stride: int = 1,
                  strides: dict[str, int] | None = None, config_hash: str = "0" * 64) -> Dataset:
    """Generate aligned samples for every condition.

    ``stride`` is in frames; ``strides`` optionally overrides it per split
    (e.g. ``{"train": 12, "test": 18}``).
    """
    ids = [c.condition_id for c in conditions]
    if len(set(ids)) != len(ids):
        raise ParameterError(f"condition ids must be unique, got {ids}")
    triples = [(c.premixing_length, c.ffr, c.afr) for c in conditions]
    if len(set(triples)) != len(triples):
        raise ParameterError("operating points (premixing length, FFR, AFR) must be unique")
    if window_len > N_PRESSURE:
        raise ParameterError(f"window length {window_len} exceeds series length {N_PRESSURE}")
    parts, infos = [], []
    for cond in conditions:
        s = (strides or {}).get(cond.split, stride)
        _, windows, frames, fidx, info = generate_condition(cond, window_len, s)
        parts.append((cond, windows, frames, fidx))
        infos.append(info)
    return Dataset(
        conditions=list(conditions),
        windows=np.concatenate([p[1] for p in parts]),
        frames=np.concatenate([p[2] for p in parts]),
        labels=np.concatenate([np.full(len(p[3]), p[0].label, np.uint8) for p in parts]),
        condition_ids=np.concatenate([np.full(len(p[3]), p[0].condition_id, np.uint32) for p in parts]),
        frame_indices=np.concatenate([p[3].astype(np.uint32) for p in parts]),
        window_len=window_len,
        config_hash=config_hash,
        manifest={"conditions": infos},
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   "VSNS" | u16 version
#   header: u32 n_conditions, u32 n_samples, u32 window_len, u16 frame_h, u16 frame_w,
#           u16 channels, u32 pressure_rate, u32 frame_rate, 32-byte config hash
#   condition table, per row: u32 id, f32 premixing_length, f32 ffr, f32 afr, u8 label,
#           u8 split (0 train / 1 test), u64 seed
#   sample index, per sample: u32 condition_id, u32 frame_index, u8 label
#   sample data, per sample: f32[channels * window_len] window, f32[frame_h * frame_w] frame
#   u32 CRC-32 of everything before it

_HEADER = struct.Struct("<IIIHHHII32s")
_COND = struct.Struct("<IfffBBQ")
_INDEX = np.dtype([("cid", "<u4"), ("fidx", "<u4"), ("label", "u1")])
_SPLITS = {"train": 0, "test": 1}


def dataset_file_size(n_conditions: int, n_samples: int, window_len: int,
                      channels: int = N_CHANNELS, frame_hw: tuple[int, int] = (FRAME_SIZE, FRAME_SIZE)) -> int:
    per_sample = _INDEX.itemsize + 4 * (channels * window_len + frame_hw[0] * frame_hw[1])
    return 4 + 2 + _HEADER.size + n_conditions * _COND.size + n_samples * per_sample + 4


def dataset_to_bytes(ds: Dataset) -> bytes:
    n = len(ds)
    parts = [DATASET_MAGIC, struct.pack("<H", DATASET_VERSION),
             _HEADER.pack(len(ds.conditions), n, ds.window_len, FRAME_SIZE, FRAME_SIZE, N_CHANNELS,
                          PRESSURE_RATE, FRAME_RATE, bytes.fromhex(ds.config_hash))]
    for c in ds.conditions:
        parts.append(_COND.pack(c.condition_id, c.premixing_length, c.ffr, c.afr, c.label,
                                _SPLITS[c.split], c.seed))
    index = np.empty(n, dtype=_INDEX)
    index["cid"], index["fidx"], index["label"] = ds.condition_ids, ds.frame_indices, ds.labels
    parts.append(index.tobytes())
    data = np.concatenate([ds.windows.reshape(n, -1).astype("<f4"), ds.frames.reshape(n, -1).astype("<f4")],
                          axis=1)
    parts.append(data.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))
    if ds.manifest:
        manifest = dict(ds.manifest, config_hash=ds.config_hash, dataset_hash=ds.content_hash())
        atomic_write_bytes(Path(str(path) + ".manifest.json"),
                           (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise FormatError("file too short for a dataset header", len(raw))
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {raw[:4]!r}", 0)
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    pos = 6
    if len(raw) < pos + _HEADER.size:
        raise FormatError("truncated dataset header", len(raw))
    n_cond, n, w, fh, fw, ch, prate, frate, chash = _HEADER.unpack_from(raw, pos)
    pos += _HEADER.size
    if (fh, fw, ch) != (FRAME_SIZE, FRAME_SIZE, N_CHANNELS):
        raise DimensionError(f"dataset frame/channel dims {(fh, fw, ch)} unsupported")
    expected = dataset_file_size(n_cond, n, w, ch, (fh, fw))
    if len(raw) != expected:
        raise FormatError(f"dataset is {len(raw)} bytes, header predicts {expected}", min(len(raw), expected))
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if crc != zlib.crc32(raw[:-4]):
        raise FormatError("dataset checksum mismatch", len(raw) - 4)
    splits = {v: k for k, v in _SPLITS.items()}
    conditions = []
    for _ in range(n_cond):
        cid, pl, ffr, afr, label, split, seed = _COND.unpack_from(raw, pos)
        if split not in splits or label not in LABEL_NAMES:
            raise FormatError(f"bad condition row for id {cid}", pos)
        conditions.append(ConditionSpec(cid, pl, ffr, afr, label, splits[split], seed))
        pos += _COND.size
    index = np.frombuffer(raw, dtype=_INDEX, count=n, offset=pos)
    pos += n * _INDEX.itemsize
    per = ch * w + fh * fw
    data = np.frombuffer(raw, dtype="<f4", count=n * per, offset=pos).reshape(n, per)
    return Dataset(
        conditions=conditions,
        windows=data[:, :ch * w].reshape(n, ch, w).astype(np.float32),
        frames=data[:, ch * w:].reshape(n, fh, fw).astype(np.float32),
        labels=index["label"].copy(),
        condition_ids=index["cid"].copy(),
        frame_indices=index["fidx"].copy(),
        window_len=w,
        config_hash=chash.hex(),
    )


def write_pgm(frame: np.ndarray, path) -> None:
    """Binary 8-bit PGM (P5, maxval 255)."""
    q = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = q.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w) / float(maxval)
