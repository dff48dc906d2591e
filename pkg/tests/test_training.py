import numpy as np
import pytest

from vsensenet import training as tr
from vsensenet.datagen import build_dataset, default_conditions
from vsensenet.errors import InvariantViolation, ParameterError, SequencingError
from vsensenet.models import Model
from vsensenet.numerics import Adam


@pytest.fixture(scope="module")
def train_ds():
    ds = build_dataset(default_conditions(0), 75, strides={"train": 150, "test": 1000})
    return ds.split("train")


@pytest.fixture(scope="module")
def autoencoder(train_ds):
    enc, dec, _ = tr.pretrain_autoencoder(train_ds.frames, tr.TrainConfig(epochs=2, seed=0))
    return enc, dec


def cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("seed", 3)
    return tr.TrainConfig(**kw)


def test_config_validation():
    with pytest.raises(ParameterError):
        tr.TrainConfig(regime="GAN")
    with pytest.raises(ParameterError):
        tr.TrainConfig(lambda_emb=-1)
    with pytest.raises(ParameterError):
        tr.TrainConfig(epochs=0)
    w = tr.TrainConfig(regime="VS1A").weights()
    assert w == {"emb": 0.0, "rec": 1.0, "cls": 0.0, "feat": 0.0}


def test_named_streams_are_independent_and_reproducible():
    a = tr.stream(1, "shuffle").random(4)
    assert np.array_equal(a, tr.stream(1, "shuffle").random(4))
    assert not np.array_equal(a, tr.stream(1, "dropout").random(4))
    assert not np.array_equal(a, tr.stream(2, "shuffle").random(4))


def test_vs1_without_embedding_loss_equals_vs1a(train_ds, autoencoder):
    enc, _ = autoencoder
    ts1, dec1, _ = tr.train_vsensenet1(train_ds, enc, cfg(lambda_emb=0.0))
    ts2, dec2, _ = tr.train_vsensenet1A(train_ds, cfg())
    assert ts1.state_bytes() == ts2.state_bytes()
    assert dec1.state_bytes() == dec2.state_bytes()


def test_vs1b_without_feature_loss_equals_vs1(train_ds, autoencoder):
    enc, dec = autoencoder
    ts1, dec1, _ = tr.train_vsensenet1(train_ds, enc, cfg())
    ts2, dec2, _ = tr.train_vsensenet1B(train_ds, enc, dec, cfg(lambda_feat=0.0))
    assert ts1.state_bytes() == ts2.state_bytes()
    assert dec1.state_bytes() == dec2.state_bytes()


def test_training_is_deterministic(train_ds, autoencoder):
    enc, _ = autoencoder
    a = tr.train_vsensenet1(train_ds, enc, cfg(epochs=1))
    b = tr.train_vsensenet1(train_ds, enc, cfg(epochs=1))
    assert a[0].state_bytes() == b[0].state_bytes() and a[1].state_bytes() == b[1].state_bytes()
    assert a[2].to_json() == b[2].to_json()
    c = tr.train_vsensenet1(train_ds, enc, cfg(epochs=1, seed=4))
    assert c[0].state_bytes() != a[0].state_bytes()


def test_vs1a_never_calls_the_image_encoder(train_ds, monkeypatch):
    calls = []
    original = Model.forward

    def spy(self, *a, **k):
        calls.append(self.role)
        return original(self, *a, **k)

    monkeypatch.setattr(Model, "forward", spy)
    tr.train_vsensenet1A(train_ds, cfg(epochs=1))
    assert "image_encoder" not in calls
    assert calls.count("ts_encoder") > 0


def test_ts_classifier_touches_no_image_model(train_ds, monkeypatch):
    calls = []
    original = Model.forward
    monkeypatch.setattr(Model, "forward", lambda self, *a, **k: calls.append(self.role) or original(self, *a, **k))
    tr.train_ts_classifier(train_ds.windows, train_ds.labels, cfg(epochs=1))
    assert set(calls) == {"ts_classifier"}


def test_vs2_step2_requires_step1(train_ds, autoencoder):
    trainer = tr.VSenseNet2Trainer(train_ds, autoencoder[0], cfg())
    with pytest.raises(SequencingError):
        trainer.step2()


def test_vs2_classifier_sees_decoder_output(train_ds, autoencoder, monkeypatch):
    decoder_outputs, classifier_inputs = [], []
    original = Model.forward

    def spy(self, x, *a, **k):
        if self.role == "image_classifier":
            classifier_inputs.append(x)
        out = original(self, x, *a, **k)
        if self.role == "image_decoder":
            decoder_outputs.append(out)
        return out

    monkeypatch.setattr(Model, "forward", spy)
    trainer = tr.VSenseNet2Trainer(train_ds, autoencoder[0], cfg(epochs=1))
    trainer.step1()
    assert classifier_inputs == []
    trainer.step2()
    assert len(classifier_inputs) == len(decoder_outputs) > 0
    assert all(c is d for c, d in zip(classifier_inputs, decoder_outputs))


def test_vs2_freezes_step1_encoder(train_ds, autoencoder):
    trainer = tr.VSenseNet2Trainer(train_ds, autoencoder[0], cfg(epochs=1))
    ts = trainer.step1()
    before = ts.param_hash()
    trainer.step2()
    assert ts.param_hash() == before == trainer.report.frozen_hashes["ts_encoder"]
    steps = [h["step"] for h in trainer.report.history]
    assert steps == ["step1", "step2"]


def test_frozen_component_change_is_detected(train_ds, autoencoder, monkeypatch):
    enc, dec = autoencoder
    victim = dec.copy()
    original = Adam.step

    def tampering_step(self):
        original(self)
        victim.parameters()[0].data[0, 0] += 1.0

    monkeypatch.setattr(Adam, "step", tampering_step)
    with pytest.raises(InvariantViolation, match="frozen image_decoder"):
        tr.train_crossmodal_baseline(train_ds, enc, victim, cfg(epochs=1))


@pytest.mark.parametrize("regime", ["VS1", "VS1B", "XMODAL", "VS2"])
def test_frozen_hashes_recorded(train_ds, autoencoder, regime):
    enc, dec = autoencoder
    h_enc, h_dec = enc.param_hash(), dec.param_hash()
    c = cfg(epochs=1)
    if regime == "VS1":
        report = tr.train_vsensenet1(train_ds, enc, c)[-1]
    elif regime == "VS1B":
        report = tr.train_vsensenet1B(train_ds, enc, dec, c)[-1]
        assert report.frozen_hashes["pretrained_decoder"] == h_dec
    elif regime == "XMODAL":
        report = tr.train_crossmodal_baseline(train_ds, enc, dec, c)[-1]
        assert report.frozen_hashes["image_decoder"] == h_dec
    else:
        report = tr.train_vsensenet2(train_ds, enc, c)[-1]
    assert report.frozen_hashes["image_encoder"] == h_enc == enc.param_hash()


def _all_regimes(ds, enc, dec, c):
    yield "AE", tr.pretrain_autoencoder(ds.frames, c)[-1]
    yield "VS1", tr.train_vsensenet1(ds, enc, c)[-1]
    yield "VS1A", tr.train_vsensenet1A(ds, c)[-1]
    yield "VS1B", tr.train_vsensenet1B(ds, enc, dec, c)[-1]
    yield "VS2", tr.train_vsensenet2(ds, enc, c)[-1]
    yield "VS2A", tr.train_vsensenet2A(ds, enc, c)[-1]
    yield "XMODAL", tr.train_crossmodal_baseline(ds, enc, dec, c)[-1]
    yield "IMG_CLS", tr.train_image_classifier(ds.frames, ds.labels, c)[-1]
    yield "TS_CLS", tr.train_ts_classifier(ds.windows, ds.labels, c)[-1]


@pytest.fixture(scope="module")
def all_reports(train_ds, autoencoder):
    enc, dec = autoencoder
    c = tr.TrainConfig(epochs=3, seed=2, lambda_emb=0.5, lambda_rec=2.0, lambda_cls=0.7, lambda_feat=0.3)
    return dict(_all_regimes(train_ds, enc, dec, c))


def test_reported_total_is_weighted_sum(all_reports):
    for regime, report in all_reports.items():
        w = tr.TrainConfig(**report.config).weights()
        for rec in report.history:
            expected = sum(w[k] * rec[k] for k in tr.COMPONENTS if not (rec["step"] == "step1" and k != "emb")
                           and not (rec["step"] == "step2" and k == "emb"))
            assert abs(rec["total"] - expected) < 1e-6, (regime, rec)
            for k in tr.COMPONENTS:
                if k not in tr.REGIME_COMPONENTS[regime]:
                    assert rec[k] == 0.0, (regime, k)


def test_active_components_are_nonzero(all_reports):
    first = all_reports["VS2A"].history[0]
    assert first["emb"] > 0 and first["rec"] > 0 and first["cls"] > 0
    assert all_reports["VS1B"].history[0]["feat"] > 0


def test_epoch_loss_trends_down(all_reports):
    for regime, report in all_reports.items():
        for step in {h["step"] for h in report.history}:
            hist = [h["total"] for h in report.history if h["step"] == step]
            assert hist[-1] < hist[0], (regime, step, hist)


def test_report_json_excludes_wall_time(all_reports):
    d = all_reports["VS1"].to_json()
    assert "wall_time_s" not in d
    assert d["config"]["regime"] == "VS1" and len(d["history"]) == 3


def test_classifier_needs_both_classes(train_ds):
    stable = train_ds.labels == 0
    with pytest.raises(ParameterError):
        tr.train_image_classifier(train_ds.frames[stable], train_ds.labels[stable], cfg(epochs=1))
    with pytest.raises(ParameterError):
        tr.train_ts_classifier(train_ds.windows[stable], train_ds.labels[stable], cfg(epochs=1))


def test_last_partial_batch_is_used():
    seen = []
    for idx in tr._batches(70, 32, np.random.default_rng(0)):
        seen.append(len(idx))
    assert seen == [32, 32, 6]
