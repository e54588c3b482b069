from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
import torch

from rulkit import evaluation, training, windows
from rulkit.losses import huber
from rulkit.models import ForwardOutput, build_model
from rulkit.nn import seed_torch
from rulkit.training import (
    EpochStats,
    RunHistory,
    TrainConfig,
    TrainingDiverged,
    aggregate_runs,
    build_val_bundle,
    checkpoint_average_predict,
    evaluate_val_bundle,
    retrain_full,
    run_cv,
    select_plateau_epoch,
    train_model,
)


def _degradation_mats(n_engines: int, length: int, rng) -> list[np.ndarray]:
    """Smooth monotone wear curves, one per engine, 21 channels in [-1, 1]."""
    mats = []
    for _ in range(n_engines):
        t = np.linspace(0.0, 1.0, length)[:, None]
        power = rng.uniform(1.0, 2.0)
        slope = rng.uniform(0.5, 1.5, size=(1, 21))
        offset = rng.uniform(-0.2, 0.2, size=(1, 21))
        mat = (2.0 * t**power - 1.0) * slope + offset
        mat += rng.normal(0.0, 0.02, size=(length, 21))
        mats.append(mat)
    return mats


class _Const(torch.nn.Module):
    """Predicts one fixed value for every window."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, x, latent_mask=None) -> ForwardOutput:
        return ForwardOutput(prediction=torch.full((len(x),), self.value))


# --- config resolution ---


def test_resolve_fills_window_from_subset():
    assert TrainConfig(model="lstm", subset="FD001").resolve().window == 32
    assert TrainConfig(model="tfim", subset="FD003").resolve().window == 40


def test_resolve_baseline_band():
    cfg = TrainConfig(model="cnn", subset="FD001").resolve()
    assert (cfg.batch_size, cfg.lr_min, cfg.lr_max) == (128, 1e-4, 5e-4)


def test_resolve_interaction_band():
    for model in ("tfm", "dtfm", "tfim"):
        cfg = TrainConfig(model=model, subset="FD001").resolve()
        assert (cfg.batch_size, cfg.lr_min, cfg.lr_max) == (210, 9e-5, 2e-4)


def test_resolve_keeps_explicit_values():
    cfg = TrainConfig(model="tfm", subset="FD001", window=16, batch_size=32).resolve()
    assert cfg.window == 16
    assert cfg.batch_size == 32


def test_config_validation_errors():
    with pytest.raises(ValueError, match="not supported"):
        TrainConfig(subset="FD002").resolve()
    with pytest.raises(ValueError, match="lr_min"):
        TrainConfig(lr_min=1e-3, lr_max=1e-4).resolve()
    with pytest.raises(ValueError, match="noise_sigma"):
        TrainConfig(noise_sigma=-0.1).resolve()
    with pytest.raises(ValueError, match="n_folds"):
        TrainConfig(n_folds=1).resolve()
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(model="tfim", window=20).resolve()


def test_config_dict_roundtrip():
    cfg = TrainConfig(model="dtfm", subset="FD003", seed=4).resolve()
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"model": "tfm", "learning_rate": 1e-3})


# --- plateau selection ---


def test_plateau_hand_series():
    series = [10.0, 8.0, 6.0, 5.0, 4.8, 4.9, 5.2, 5.5, 6.0]
    # smoothed: 6.76, 5.74, 5.18, 5.08, 5.28 -> min at the 4th window,
    # whose center is epoch 6
    assert select_plateau_epoch(series) == 6


def test_plateau_constant_ties_earliest():
    assert select_plateau_epoch([7.0] * 9) == 3


def test_plateau_short_series_raw_argmin():
    assert select_plateau_epoch([5.0, 3.0, 4.0]) == 2


def test_plateau_monotone_decreasing():
    assert select_plateau_epoch(list(range(9, 0, -1))) == 7


def test_plateau_validation():
    with pytest.raises(ValueError):
        select_plateau_epoch([])
    with pytest.raises(ValueError):
        select_plateau_epoch([1.0, float("nan"), 2.0])


# --- aggregation ---


def test_aggregate_runs_oracle():
    summaries = [
        {"seed": i, "rmse": float(10 + i), "score": float(100 * (i + 1))}
        for i in range(5)
    ]
    agg = aggregate_runs(summaries)
    assert agg["n_runs"] == 5
    assert agg["rmse_mean"] == pytest.approx(12.0)
    assert agg["rmse_std"] == pytest.approx(1.5811388300841898)
    assert agg["score_mean"] == pytest.approx(300.0)


def test_aggregate_single_run_zero_std():
    agg = aggregate_runs([{"seed": 0, "rmse": 11.0, "score": 200.0}])
    assert agg["rmse_std"] == 0.0


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate_runs([])


# --- validation bundle ---


def test_val_bundle_constant_model_oracle():
    rng = np.random.default_rng(21)
    mats = _degradation_mats(1, 50, rng)
    segments = windows.sample_holdout_segments([50], 16, rng)
    bundle = build_val_bundle(mats, segments, [0], window=16, cap=125, k=5)
    assert bundle.x.shape == (1, 5, 16, 21)
    np.testing.assert_array_equal(bundle.offsets, [0, 1, 2, 3, 4])
    target = 50 - segments[0].end
    assert bundle.targets[0] == target
    # constant c and offsets 0..4 average to an estimate of c - 2
    val_rmse, _ = evaluate_val_bundle(_Const(10.0), bundle)
    assert val_rmse == pytest.approx(abs(10.0 - 2.0 - target))


def test_val_bundle_estimate_clamped_at_zero():
    rng = np.random.default_rng(22)
    mats = _degradation_mats(1, 50, rng)
    segments = windows.sample_holdout_segments([50], 16, rng)
    bundle = build_val_bundle(mats, segments, [0], window=16, cap=125, k=5)
    val_rmse, _ = evaluate_val_bundle(_Const(1.0), bundle)
    assert val_rmse == pytest.approx(bundle.targets[0])


# --- train_model mechanics ---


def _tiny_cfg(**kw) -> TrainConfig:
    base = dict(
        model="lstm",
        subset="FD001",
        window=16,
        batch_size=64,
        lr_min=1e-4,
        lr_max=4e-4,
        max_epochs=2,
        noise_sigma=0.0,
        rul_cap=30,
        eval_windows=3,
    )
    base.update(kw)
    return TrainConfig(**base).resolve()


def test_train_requires_resolved_config():
    model = build_model(_tiny_cfg().model_config())
    x = np.zeros((4, 16, 21), dtype=np.float32)
    with pytest.raises(ValueError, match="resolve"):
        train_model(model, x, np.zeros(4), TrainConfig(), np.random.default_rng(0))


def test_train_rejects_empty_windows():
    cfg = _tiny_cfg()
    model = build_model(cfg.model_config())
    x = np.zeros((0, 16, 21), dtype=np.float32)
    with pytest.raises(ValueError, match="no training windows"):
        train_model(model, x, np.zeros(0), cfg, np.random.default_rng(0))


def test_train_diverged_raises():
    cfg = _tiny_cfg()
    model = build_model(cfg.model_config())
    x = np.full((8, 16, 21), np.nan, dtype=np.float32)
    y = np.zeros(8)
    with pytest.raises(TrainingDiverged) as exc:
        train_model(model, x, y, cfg, np.random.default_rng(0))
    assert exc.value.epoch == 1
    assert exc.value.step == 0


def test_train_lr_follows_triangle():
    cfg = _tiny_cfg(cycle_epochs=2, max_epochs=5)
    seed_torch(0)
    model = build_model(cfg.model_config())
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 16, 21)).astype(np.float32)
    y = rng.uniform(0, 30, size=10)
    history = train_model(model, x, y, cfg, rng)
    # one step per epoch and a one-step half period: min, max, min, ...
    lrs = [e.lr for e in history.entries]
    assert lrs == [cfg.lr_min, cfg.lr_max, cfg.lr_min, cfg.lr_max, cfg.lr_min]


def test_train_checkpoints_only_named_epochs(tmp_path):
    cfg = _tiny_cfg(max_epochs=4)
    seed_torch(0)
    model = build_model(cfg.model_config())
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 16, 21)).astype(np.float32)
    y = rng.uniform(0, 30, size=12)
    train_model(
        model, x, y, cfg, rng, checkpoint_dir=tmp_path, checkpoint_epochs=(2, 4)
    )
    assert sorted(p.name for p in tmp_path.glob("*.npz")) == [
        "epoch_002.npz",
        "epoch_004.npz",
    ]


# --- learning on a toy degradation problem ---


@pytest.fixture(scope="module")
def overfit():
    rng = np.random.default_rng(5150)
    mats = _degradation_mats(4, 60, rng)
    cfg = TrainConfig(
        model="tfm",
        subset="FD001",
        window=16,
        batch_size=64,
        lr_min=2e-3,
        lr_max=8e-3,
        noise_sigma=0.0,
        dropout=0.0,
        rul_cap=40,
        max_epochs=150,
    ).resolve()
    lengths = [len(m) for m in mats]
    index = windows.training_index(lengths, cfg.window, cfg.rul_cap, cfg.capped_stride)
    x = windows.assemble_windows(mats, index, cfg.window)
    y = windows.targets_for_index(lengths, index, cfg.rul_cap)
    seed_torch(123)
    model = build_model(cfg.model_config())
    history = train_model(model, x, y, cfg, np.random.default_rng(42))
    return {"model": model, "x": x, "y": y, "history": history, "cfg": cfg}


def test_overfits_toy_degradations(overfit):
    losses = overfit["history"].train_loss
    assert losses[-1] < 2.0, f"final loss {losses[-1]:.3f}"
    assert losses[-1] < 0.1 * losses[0]


def test_input_noise_degrades_fitted_model(overfit):
    model = overfit["model"]
    x, y = overfit["x"], overfit["y"]
    yt = torch.as_tensor(y)
    clean = float(huber(torch.as_tensor(evaluation.batch_predict(model, x)), yt))
    rng = np.random.default_rng(77)
    noisy = []
    for _ in range(30):
        xn = windows.add_noise(x, 0.1, rng)
        noisy.append(
            float(huber(torch.as_tensor(evaluation.batch_predict(model, xn)), yt))
        )
    assert np.mean(noisy) > clean


# --- checkpoint averaging ---


def test_checkpoint_average_matches_mean_of_estimates(tmp_path):
    cfg = _tiny_cfg(model="tfm")
    rng = np.random.default_rng(31)
    test_mats = _degradation_mats(3, 50, rng)
    paths = []
    per_model = []
    for i in range(3):
        seed_torch(100 + i)
        model = build_model(cfg.model_config())
        path = tmp_path / f"ckpt_{i}.npz"
        training.save_checkpoint(path, model)
        paths.append(path)
        per_model.append(
            evaluation.predict_per_engine(model, test_mats, cfg.window, cfg.eval_windows)
        )
    averaged = checkpoint_average_predict(paths, cfg, test_mats)
    np.testing.assert_allclose(averaged, np.mean(per_model, axis=0), atol=1e-10)


def test_checkpoint_average_requires_paths():
    with pytest.raises(ValueError):
        checkpoint_average_predict([], _tiny_cfg(), [])


def test_averaging_reduces_estimate_variance():
    # jitter the final head bias across pseudo-checkpoints: the spread of
    # five-model means should shrink well below the single-model spread
    cfg = _tiny_cfg(model="tfm")
    seed_torch(55)
    model = build_model(cfg.model_config())
    bias = model.head.net[3].bias
    with torch.no_grad():
        bias.fill_(50.0)
    rng = np.random.default_rng(56)
    mat = _degradation_mats(1, 50, rng)[0]
    singles, averaged = [], []
    for _ in range(20):
        estimates = []
        for _ in range(5):
            delta = rng.normal(0.0, 2.0)
            with torch.no_grad():
                bias.add_(delta)
            estimates.append(
                evaluation.predict_engine_rul(model, mat, cfg.window, k=3)
            )
            with torch.no_grad():
                bias.sub_(delta)
        singles.append(estimates[0])
        averaged.append(float(np.mean(estimates)))
    assert np.var(averaged) < 0.6 * np.var(singles)


# --- cross-validation and retraining ---


@pytest.fixture(scope="module")
def cv_setup(tmp_path_factory):
    rng = np.random.default_rng(61)
    mats = _degradation_mats(4, 56, rng)
    cfg = _tiny_cfg(max_epochs=3, n_folds=2, noise_sigma=0.04, seed=1)
    run_dir = tmp_path_factory.mktemp("cvrun")
    result = run_cv(cfg, mats, run_dir=run_dir)
    return {"cfg": cfg, "mats": mats, "run_dir": run_dir, "result": result}


def test_run_cv_structure(cv_setup):
    result = cv_setup["result"]
    assert len(result.fold_histories) == 2
    for hist in result.fold_histories:
        assert len(hist.entries) == 3
        assert np.isfinite(hist.val_rmse).all()
    assert 1 <= result.plateau_epoch <= 3
    assert result.mean_val_rmse.shape == (3,)
    expected = np.mean([h.val_rmse for h in result.fold_histories], axis=0)
    np.testing.assert_allclose(result.mean_val_rmse, expected)


def test_run_cv_artifacts(cv_setup):
    run_dir = cv_setup["run_dir"]
    for f in range(2):
        csv = run_dir / "cv" / f"fold_{f}" / "history.csv"
        assert csv.exists()
        hist = RunHistory.from_csv(csv)
        assert len(hist.entries) == 3
    payload = json.loads((run_dir / "cv" / "plateau.json").read_text())
    assert payload["plateau_epoch"] == cv_setup["result"].plateau_epoch
    assert len(payload["mean_val_rmse"]) == 3


def test_retrain_full_saves_averaging_checkpoints(cv_setup, tmp_path):
    cfg = dataclasses.replace(cv_setup["cfg"], avg_epochs=3)
    paths, history = retrain_full(cfg, cv_setup["mats"], 2, tmp_path)
    assert [p.name for p in paths] == [
        "epoch_002.npz",
        "epoch_003.npz",
        "epoch_004.npz",
    ]
    assert all(p.exists() for p in paths)
    assert len(history.entries) == 4
    # no validation during the retrain
    assert np.isnan(history.val_rmse).all()
    saved = RunHistory.from_csv(tmp_path / "retrain" / "history.csv")
    assert np.isnan(saved.val_rmse).all()
    preds = checkpoint_average_predict(paths, cfg, cv_setup["mats"][:2])
    assert preds.shape == (2,)
    assert np.all(preds >= 0)


# --- history serialization ---


def test_history_csv_roundtrip_exact(tmp_path):
    hist = RunHistory(
        entries=[
            EpochStats(1, 0.1 + 0.2, 1.0 / 3.0, 1e-17, 9e-5),
            EpochStats(2, 123.456, 7.89, 1000.5, 2e-4),
        ]
    )
    path = tmp_path / "history.csv"
    hist.to_csv(path)
    again = RunHistory.from_csv(path)
    assert again == hist


# --- full pipeline on the tiny synthetic subset ---


def _pipeline_cfg(seed: int = 3) -> TrainConfig:
    return TrainConfig(
        model="tfm",
        subset="FD001",
        window=16,
        batch_size=256,
        max_epochs=2,
        n_folds=2,
        eval_windows=3,
        avg_epochs=2,
        max_engines=4,
        seed=seed,
    )


def test_run_pipeline_artifacts(tiny_data_dir, tmp_path):
    summary = training.run_pipeline(_pipeline_cfg(), tiny_data_dir, tmp_path / "run")
    assert summary["model"] == "tfm"
    assert summary["rmse"] >= 0
    assert summary["score"] >= 0
    run = tmp_path / "run"
    for rel in (
        "manifest.json",
        "config.txt",
        "cv/fold_0/history.csv",
        "cv/fold_1/history.csv",
        "cv/plateau.json",
        "retrain/history.csv",
        "eval/report.json",
        "eval/per_engine.csv",
    ):
        assert (run / rel).exists(), rel
    manifest = training.load_manifest(run)
    assert manifest["dataset_hash"]
    assert TrainConfig.from_dict(manifest["config"]) == _pipeline_cfg().resolve()


def test_run_pipeline_deterministic(tiny_data_dir, tmp_path):
    a = training.run_pipeline(_pipeline_cfg(), tiny_data_dir, tmp_path / "a")
    b = training.run_pipeline(_pipeline_cfg(), tiny_data_dir, tmp_path / "b")
    assert a == b
    for rel in ("eval/per_engine.csv", "eval/report.json", "cv/plateau.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (
            tmp_path / "b" / rel
        ).read_bytes(), rel


def test_multi_run_aggregate(tiny_data_dir, tmp_path):
    agg = training.multi_run(
        _pipeline_cfg(), [0, 1], tiny_data_dir, tmp_path / "multi"
    )
    assert agg["n_runs"] == 2
    assert agg["seeds"] == [0, 1]
    assert agg["rmse_std"] >= 0
    saved = json.loads((tmp_path / "multi" / "aggregate.json").read_text())
    assert saved["rmse_mean"] == pytest.approx(agg["rmse_mean"])
    for seed in (0, 1):
        assert (tmp_path / "multi" / f"seed_{seed}" / "eval" / "report.json").exists()
