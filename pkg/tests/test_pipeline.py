import json

import numpy as np
import pytest

from noniso.data import DataConfig, load_predictions, make_dataset
from noniso.errors import TrainingError, ValidationError
from noniso.pipeline import (
    TrainConfig, build_autoencoder, curriculum_max_length, evaluate, load_autoencoder, load_latent_model,
    predict, reconstruction_l1, run_demo, save_autoencoder, save_latent_model, state_hash, train_autoencoder,
    train_denoiser, zero_velocity_report,
)


def tiny(**kw) -> TrainConfig:
    base = dict(
        data=DataConfig(n_train=32, n_val=8, n_test=6, past=4, future=8),
        latent=4, ae_epochs=3, curriculum_epochs=2, enc_width=8, dec_width=8,
        epochs=1, k=3, width=8, heads=2, blocks=1, n_predict=4, batch=8,
    )
    base.update(kw)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def setup():
    cfg = tiny()
    ds = make_dataset(cfg.data, cfg.seed)
    ae = train_autoencoder(cfg, ds.train).model
    return cfg, ds, ae


def test_config_validation_and_roundtrip():
    cfg = tiny()
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    for bad in (dict(k=0), dict(epochs=0), dict(kind="nope"), dict(argmin="both"), dict(width=9)):
        with pytest.raises(ValidationError):
            tiny(**bad)
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"unknown": 1})


def test_curriculum_ramp():
    assert curriculum_max_length(0, 48, 10) == 1
    assert curriculum_max_length(10, 48, 10) == 48
    assert curriculum_max_length(30, 48, 10) == 48
    ramp = [curriculum_max_length(e, 48, 10) for e in range(12)]
    assert all(a <= b for a, b in zip(ramp, ramp[1:]))
    assert curriculum_max_length(0, 48, 0) == 48


def test_autoencoder_deterministic(setup):
    cfg, ds, ae = setup
    again = train_autoencoder(cfg, ds.train)
    assert state_hash(again.model.state_dict()) == state_hash(ae.state_dict())
    first = train_autoencoder(cfg, ds.train)
    assert first.losses == again.losses
    assert again.lengths[0] == 1


def test_autoencoder_overfits_small_set():
    # 10 noisy sequences: L1 against the clean motion drops below the noise std
    cfg = tiny(data=DataConfig(n_train=10, n_val=2, n_test=2, past=4, future=8, noise_std=0.01),
               ae_epochs=2000, curriculum_epochs=10, enc_width=32, dec_width=64, batch=10)
    ds = make_dataset(cfg.data, 0)
    r = train_autoencoder(cfg, ds.train)
    assert reconstruction_l1(r.model, ds.train) < cfg.data.noise_std
    assert r.losses[-1] < r.losses[0]


def test_denoiser_frozen_ae_and_determinism(setup):
    cfg, ds, ae = setup
    h = state_hash(ae.state_dict())
    a = train_denoiser(cfg, ds.train, ae)
    b = train_denoiser(cfg, ds.train, ae)
    assert a.ae_hash_before == a.ae_hash_after == h
    assert state_hash(a.model.state()) == state_hash(b.model.state())
    assert np.all(np.isfinite(a.step_losses))


def test_latent_argmin_variant_runs(setup):
    cfg, ds, ae = setup
    r = train_denoiser(cfg.with_(argmin="latent"), ds.train, ae)
    assert np.all(np.isfinite(r.step_losses))


def test_denoiser_loss_decreases():
    cfg = tiny(data=DataConfig(n_train=64, n_val=4, n_test=4, past=4, future=8), epochs=1, k=2, batch=4,
               lr_final=1.0)
    ds = make_dataset(cfg.data, 1)
    ae = train_autoencoder(cfg, ds.train).model
    r = train_denoiser(cfg.with_(epochs=4), ds.train, ae, max_steps=50)
    assert len(r.step_losses) == 50
    assert np.isfinite(r.step_losses[0])
    assert np.mean(r.step_losses[-10:]) < np.mean(r.step_losses[:10])


def test_nonfinite_loss_aborts(setup):
    cfg, ds, _ = setup
    bad = ds.train.subset(np.arange(len(ds.train)))
    bad.future = bad.future.copy()
    bad.future[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        train_autoencoder(cfg, bad)


def test_predict_contract(setup, tmp_path):
    cfg, ds, ae = setup
    model = train_denoiser(cfg, ds.train, ae).model
    p1 = predict(model, ds.test.past, 3, seed=5)
    # chunk boundaries are fixed, threads only schedule them: bitwise identical
    p2 = predict(model, ds.test.past, 3, seed=5, threads=3)
    p3 = predict(model, ds.test.past, 3, seed=5, chunk=4)
    assert np.array_equal(predict(model, ds.test.past, 3, seed=5, chunk=4, threads=2), p3)
    assert np.allclose(p3, p1, rtol=0, atol=1e-12)
    assert p1.shape == (6, 3, 8, 7, 3)
    assert np.array_equal(p1, p2)
    assert np.all(np.isfinite(p1))
    single = predict(model, ds.test.past[0], 1, seed=5)
    assert single.shape == (1, 8, 7, 3)
    # same stream, different BLAS batch shape: equal up to rounding
    assert np.allclose(single[0], p1[0, 0], rtol=0, atol=1e-12)
    with pytest.raises(ValidationError):
        predict(model, ds.test.past[:, :, :3], 2, 0)
    # untrained models still give finite motions
    save_autoencoder(tmp_path / "ae.nitg", build_autoencoder(cfg))
    save_latent_model(tmp_path / "dn.nitg", model)
    back = load_latent_model(tmp_path / "dn.nitg", load_autoencoder(tmp_path / "ae.nitg", cfg), cfg)
    assert np.all(np.isfinite(predict(back, ds.test.past, 2, 0)))


def test_checkpoint_roundtrip(setup, tmp_path):
    cfg, ds, ae = setup
    model = train_denoiser(cfg, ds.train, ae).model
    save_autoencoder(tmp_path / "ae.nitg", ae)
    save_latent_model(tmp_path / "dn.nitg", model)
    back = load_latent_model(tmp_path / "dn.nitg", load_autoencoder(tmp_path / "ae.nitg", cfg), cfg)
    assert np.array_equal(predict(back, ds.test.past, 2, 1), predict(model, ds.test.past, 2, 1))
    with pytest.raises(ValidationError):
        load_latent_model(tmp_path / "dn.nitg", ae, cfg.with_(latent=5))


def test_evaluate_gt_copies_and_zero_velocity(setup):
    cfg, ds, _ = setup
    clean = make_dataset(cfg.data.__class__(**{**cfg.data.to_dict(), "noise_std": 0.0}), 0).test
    rep = evaluate(np.repeat(clean.future[:, None], 3, axis=1), clean, cfg)
    assert rep.ade == 0.0 and rep.fde == 0.0 and rep.apd == 0.0 and rep.str_mean < 1e-10
    zv = zero_velocity_report(ds.test, cfg)
    assert zv.apd == 0.0 and zv.jit_mean == 0.0
    with pytest.raises(ValidationError, match="missing"):
        evaluate(np.zeros((2, 3, 8, 7, 3)), ds.test, cfg)


def test_demo_writes_artifacts(tmp_path):
    cfg = tiny()
    res = run_demo(tmp_path / "run", cfg)
    d = tmp_path / "run"
    for name in ("autoencoder.nitg", "denoiser.nitg", "predictions.nipr", "metrics.json", "segments.csv",
                 "validity_curve.csv", "delta_apd_curve.csv", "manifest.json", "zero_velocity_metrics.json"):
        assert (d / name).exists(), name
    m = json.loads((d / "metrics.json").read_text())
    assert m["num_samples"] == cfg.n_predict
    assert load_predictions(d / "predictions.nipr").shape == (6 * 4, 8, 7, 3)
    rows = (d / "validity_curve.csv").read_text().splitlines()
    assert rows[0] == "threshold,valid_fraction"
    vals = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    assert vals.shape[1] == 2 and np.all(np.diff(vals[:, 1]) >= 0)
    man = json.loads((d / "manifest.json").read_text())
    assert len(man["input_hash"]) == 64
    assert res.manifest.checkpoints["denoiser_sha256"] == man["checkpoints"]["denoiser_sha256"]
