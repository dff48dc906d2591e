import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsensenet.errors import DimensionError, ParameterError
from vsensenet.metrics import ConfusionCounts, classification_metrics, dominant_frequency, mse, rms, ssim


def brute_force_metrics(pred, actual):
    tp = fp = tn = fn = 0
    for p, a in zip(pred, actual):
        if p and a:
            tp += 1
        elif p and not a:
            fp += 1
        elif not p and not a:
            tn += 1
        else:
            fn += 1
    prec = tp / (tp + fp) if tp + fp else None
    rec = tp / (tp + fn) if tp + fn else None
    f1 = 2 * prec * rec / (prec + rec) if prec is not None and rec is not None and prec + rec else None
    return {"accuracy": (tp + tn) / len(pred), "precision": prec, "recall": rec, "f1": f1,
            "fnr": fn / (fn + tp) if fn + tp else None}


def test_classification_metrics_match_brute_force_on_1000_vectors():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(1, 60))
        bias = rng.uniform(0, 1)
        pred = rng.uniform(size=n) < bias
        actual = rng.uniform(size=n) < rng.uniform(0, 1)
        got = classification_metrics(ConfusionCounts.from_predictions(pred, actual))
        assert got == brute_force_metrics(pred, actual), i


def test_undefined_metrics_are_none_not_zero():
    # no predicted positives and no actual positives
    m = classification_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=0))
    assert m["accuracy"] == 1.0
    assert m["precision"] is None and m["recall"] is None and m["f1"] is None and m["fnr"] is None


def test_confusion_counts_validate():
    with pytest.raises(ParameterError):
        ConfusionCounts(-1, 0, 0, 0)
    with pytest.raises(DimensionError):
        ConfusionCounts.from_predictions([1, 0], [1])


def test_ssim_identity_and_symmetry_on_100_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.uniform(size=(64, 64))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), size=a.shape), 0, 1)
        assert abs(ssim(a, a) - 1.0) < 1e-9
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert ssim(a, b) < 1.0


def test_ssim_constant_images():
    a = np.full((32, 32), 0.3)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    # luminance term alone: (2*0.3*0.6 + c1) / (0.09 + 0.36 + c1)
    c1 = 0.01 ** 2
    assert ssim(a, np.full((32, 32), 0.6)) == pytest.approx((0.36 + c1) / (0.45 + c1), rel=1e-9)


def test_ssim_batch_matches_single():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(3, 20, 20)), rng.uniform(size=(3, 20, 20))
    batch = ssim(a, b)
    assert batch.shape == (3,)
    for i in range(3):
        assert batch[i] == pytest.approx(ssim(a[i], b[i]), abs=1e-12)


def test_ssim_rejects_small_or_mismatched_images():
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(DimensionError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 0.5), st.integers(0, 1000))
def test_mse_properties(shift, seed):
    a = np.random.default_rng(seed).uniform(size=(12, 12))
    assert mse(a, a) == 0.0
    assert mse(a, a + shift) == pytest.approx(shift ** 2, rel=1e-9, abs=1e-15)


def test_rms_of_sine():
    t = np.arange(9000) / 9000
    x = 100 * np.sqrt(2) * np.sin(2 * np.pi * 140 * t) + 7.0
    assert rms(x) == pytest.approx(100.0, rel=1e-6)
    with pytest.raises(ParameterError):
        rms(np.zeros(100))


def test_dominant_frequency_finds_tone():
    t = np.arange(27000) / 9000
    rng = np.random.default_rng(0)
    x = np.sin(2 * np.pi * 140 * t) + 0.01 * rng.normal(size=t.size)
    freq, ratio = dominant_frequency(x, 9000)
    assert freq == pytest.approx(140.0, abs=0.5)
    assert ratio > 100
