import json

import numpy as np
import pytest

from vsensenet import evaluation as ev
from vsensenet.datagen import build_dataset, default_conditions, read_pgm
from vsensenet.errors import AggregationError, IncompatibilityError
from vsensenet.models import Model


@pytest.fixture(scope="module")
def test_ds():
    return build_dataset(default_conditions(0), 75, strides={"train": 3000, "test": 400}).split("test")


def run(regime, seed, acc, ssim=None, config="c", data="d"):
    r = ev.RunEvaluation(regime, seed, config, data, {}, {"tp": 1, "fp": 0, "tn": 1, "fn": 0},
                         {"accuracy": acc, "precision": 1.0, "recall": 1.0, "f1": acc, "fnr": 0.0})
    if ssim is not None:
        r.ssim, r.mse, r.stable_pixel_std = ssim, 1 - ssim, 0.01
    return r


def test_aggregate_mean_and_sample_std():
    rep = ev.aggregate_runs([run("TS_CLS", s, a) for s, a in [(1, 0.9), (2, 0.8), (3, 1.0)]])
    e = rep.regimes["TS_CLS"]
    assert e["accuracy"]["mean"] == pytest.approx(0.9)
    assert e["accuracy"]["std"] == pytest.approx(0.1)  # ddof = 1
    assert e["ssim"] is None
    assert e["seeds"] == [1, 2, 3]


def test_aggregate_is_order_independent():
    runs = [run("VS1", s, 0.9 + 0.01 * s, ssim=0.5 + 0.013 * s) for s in range(1, 6)]
    a = ev.aggregate_runs(runs).to_json()
    b = ev.aggregate_runs(runs[::-1]).to_json()
    c = ev.aggregate_runs([runs[i] for i in (2, 0, 4, 1, 3)]).to_json()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True) == json.dumps(c, sort_keys=True)


def test_aggregate_identical_seeds_have_zero_spread():
    rep = ev.aggregate_runs([run("VS2", s, 0.95, ssim=0.7) for s in (1, 2)])
    assert rep.regimes["VS2"]["accuracy"]["std"] == 0.0


def test_aggregate_rejects_bad_inputs():
    with pytest.raises(AggregationError):
        ev.aggregate_runs([])
    with pytest.raises(AggregationError, match="at least 2"):
        ev.aggregate_runs([run("VS1", 1, 0.9)])
    with pytest.raises(AggregationError, match="configurations"):
        ev.aggregate_runs([run("VS1", 1, 0.9), run("VS1", 2, 0.9, config="other")])
    with pytest.raises(AggregationError, match="test sets"):
        ev.aggregate_runs([run("VS1", 1, 0.9), run("VS1", 2, 0.9, data="other")])


def test_undefined_metric_propagates_as_na():
    a, b = run("IMG_CLS", 1, 1.0), run("IMG_CLS", 2, 1.0)
    b.metrics["f1"] = None
    rep = ev.aggregate_runs([a, b])
    assert rep.regimes["IMG_CLS"]["f1"] is None
    row = [line for line in ev.format_table(rep).splitlines() if line.startswith("Image Classifier")][0]
    assert row.split("|")[4].strip() == "NA"


def test_table_shape():
    runs = []
    for regime, _ in ev.TABLE_ROWS:
        s = 0.7 if regime in ev.RECONSTRUCTING else None
        runs += [run(regime, 1, 0.95, ssim=s), run(regime, 2, 0.97, ssim=s)]
    text = ev.format_table(ev.aggregate_runs(runs))
    lines = text.splitlines()
    assert [c.strip() for c in lines[0].split("|")] == ["Model", "SSIM", "MSE", "Accuracy", "F1 Score", "FNR"]
    body = lines[2:]
    assert [line.split("|")[0].strip() for line in body] == [label for _, label in ev.TABLE_ROWS]
    for line, (regime, _) in zip(body, ev.TABLE_ROWS):
        cells = [c.strip() for c in line.split("|")[1:]]
        assert len(cells) == 5
        if regime in ev.RECONSTRUCTING:
            assert all("±" in c for c in cells)
        else:
            assert cells[:2] == ["NA", "NA"] and all("±" in c for c in cells[2:])
    assert "0.9600 ± 0.0141" in text


def test_pipeline_chains_models(test_ds):
    rng = np.random.default_rng(0)
    ts = Model("ts_encoder", rng)
    dec = Model("image_decoder", rng)
    cls = Model("image_classifier", rng)
    out = ev.run_test_pipeline(ts, dec, cls, test_ds)
    n = len(test_ds)
    assert out.reconstructions.shape == (n, 64, 64)
    assert out.logits.shape == out.predictions.shape == out.ssim.shape == out.mse.shape == (n,)
    np.testing.assert_array_equal(out.predictions, (out.logits > 0).astype(np.uint8))
    np.testing.assert_allclose(out.logits, cls.forward(dec.forward(ts.forward(test_ds.windows))), rtol=1e-5)
    result = ev.evaluate_run("VS1", 1, out, test_ds, "h", {"ts_encoder": ts.fingerprint})
    assert result.n_test == n and result.ssim is not None and result.stable_pixel_std is not None


def test_pipeline_rejects_wrong_models(test_ds):
    rng = np.random.default_rng(0)
    ts, dec, cls = Model("ts_encoder", rng), Model("image_decoder", rng), Model("image_classifier", rng)
    with pytest.raises(IncompatibilityError):
        ev.run_test_pipeline(ts, dec, Model("image_encoder", rng), test_ds)
    with pytest.raises(IncompatibilityError):
        ev.run_test_pipeline(Model("ts_encoder", rng, window_len=60), dec, cls, test_ds)
    with pytest.raises(IncompatibilityError):
        ev.classify_windows(Model("ts_encoder", rng), test_ds)


def test_stable_pixel_std_uses_stable_conditions_only(test_ds):
    rec = np.zeros_like(test_ds.frames)
    rec[test_ds.labels == 1] = np.random.default_rng(0).uniform(size=rec[test_ds.labels == 1].shape)
    assert ev.stable_pixel_std(test_ds, rec) == 0.0


def test_reconstruction_dump_names(tmp_path, test_ds):
    paths = ev.dump_reconstructions(test_ds, test_ds.frames, "truth", tmp_path, per_condition=2)
    assert len(paths) == 4
    names = sorted(p.name for p in paths)
    assert names[0].startswith("Stable_120-45-450_") and names[0].endswith("_truth.pgm")
    assert read_pgm(paths[0]).shape == (64, 64)
