"""Signal and evaluation metrics: RMS, dominant frequency, SSIM, confusion-matrix scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

MIN_SPECTRUM_SAMPLES = 1024
PEAK_BAND_HZ = (50.0, 1000.0)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def rms(series: np.ndarray) -> float:
    """RMS of the mean-removed single-channel series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"rms expects one channel, got shape {x.shape}")
    if x.size < MIN_SPECTRUM_SAMPLES:
        raise ParameterError(f"rms needs >= {MIN_SPECTRUM_SAMPLES} samples, got {x.size}")
    x = x - x.mean()
    return float(np.sqrt(np.mean(x * x)))


def dominant_frequency(series: np.ndarray, sample_rate: float) -> tuple[float, float]:
    """Frequency of the largest non-DC spectral peak and its peak-to-median ratio.

    Full-length FFT with a rectangular window. For multichannel input
    ``(C, N)`` the per-channel magnitude spectra are averaged first, so channel
    phase offsets cannot cancel. The median is taken over 50-1000 Hz.
    """
    x = np.atleast_2d(np.asarray(series, dtype=np.float64))
    n = x.shape[-1]
    if n < MIN_SPECTRUM_SAMPLES:
        raise ParameterError(f"spectrum needs >= {MIN_SPECTRUM_SAMPLES} samples, got {n}")
    x = x - x.mean(axis=-1, keepdims=True)
    mag = np.abs(np.fft.rfft(x, axis=-1)).mean(axis=0)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    k = int(np.argmax(mag[1:])) + 1
    band = (freqs >= PEAK_BAND_HZ[0]) & (freqs <= PEAK_BAND_HZ[1])
    median = float(np.median(mag[band]))
    ratio = float(mag[k] / median) if median > 0 else float("inf")
    return float(freqs[k]), ratio


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = g.size
    h, w = x.shape[-2:]
    rows = sum(g[i] * x[..., i:i + h - k + 1, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:j + w - k + 1] for j in range(k))


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"ssim: images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float | np.ndarray:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03).

    Accepts single frames (H, W) or batches (N, H, W); batches return one value
    per frame.
    """
    m = ssim_map(a, b, data_range)
    out = m.mean(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def mse(a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    out = np.mean((a - b) ** 2, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    """Positive class is unstable (1)."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ParameterError(f"negative confusion count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, predicted, actual) -> "ConfusionCounts":
        p = np.asarray(predicted).astype(bool)
        a = np.asarray(actual).astype(bool)
        if p.shape != a.shape:
            raise DimensionError(f"predictions {p.shape} vs labels {a.shape}")
        return cls(tp=int(np.sum(p & a)), fp=int(np.sum(p & ~a)),
                   tn=int(np.sum(~p & ~a)), fn=int(np.sum(~p & a)))


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def classification_metrics(counts: ConfusionCounts) -> dict[str, float | None]:
    """Accuracy, precision, recall, F1 and FNR.

    A ratio with a zero denominator is reported as ``None`` (undefined), never 0.
    """
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {
        "accuracy": _ratio(counts.tp + counts.tn, counts.total),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "fnr": _ratio(counts.fn, counts.fn + counts.tp),
    }
