"""Training protocol: cross-validation, plateau pick, retrain, averaging.

A run trains on noisy sliding windows with the composite loss under a
triangular cyclic learning rate. Five-fold CV over engines locates the
validation plateau epoch; the model is then retrained on all engines and
test predictions are averaged over the five checkpoints starting at the
plateau.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Sequence

import numpy as np
import torch
from torch import nn

from . import __version__, cmapss, evaluation, windows
from .losses import composite_loss
from .metrics import phm_score, rmse
from .models import ModelConfig, build_model
from .nn import AdamW, clip_grad_norm, save_checkpoint, seed_torch, triangular_cyclic_lr

BASELINE_TAGS = ("lstm", "cnn")
SUBSET_WINDOWS = {"FD001": 32, "FD003": 40}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    """Resolved hyperparameters for one training run.

    Fields left at None are filled by resolve() from the model family
    (batch size, learning rate band) and the subset (window length).
    """

    model: str = "tfim"
    subset: str = "FD001"
    window: int | None = None
    n_folds: int = 5
    max_epochs: int = 120
    batch_size: int | None = None
    lr_min: float | None = None
    lr_max: float | None = None
    cycle_epochs: int = 4
    lr_cycle_decay: float = 1.0
    weight_decay: float = 1e-2
    clip_norm: float = 5.0
    noise_sigma: float = 0.04
    rul_cap: int = 125
    capped_stride: int = 6
    loss_lambda: float = 0.3
    loss_sigma: float = 1.0
    huber_beta: float = 1.0
    cosine_eps: float = 1e-7
    avg_epochs: int = 5
    eval_windows: int = 5
    dropout: float = 0.5
    scinet_dropout: float = 0.65
    head_hidden: int = 256
    seed: int = 0
    max_engines: int | None = None

    def resolve(self) -> "TrainConfig":
        cfg = dataclasses.replace(self)
        if cfg.window is None:
            if cfg.subset not in SUBSET_WINDOWS:
                raise ValueError(
                    f"subset {cfg.subset!r} not supported; use one of "
                    f"{cmapss.SUPPORTED_SUBSETS}"
                )
            cfg.window = SUBSET_WINDOWS[cfg.subset]
        is_baseline = cfg.model in BASELINE_TAGS
        if cfg.batch_size is None:
            cfg.batch_size = 128 if is_baseline else 210
        if cfg.lr_min is None:
            cfg.lr_min = 1e-4 if is_baseline else 9e-5
        if cfg.lr_max is None:
            cfg.lr_max = 5e-4 if is_baseline else 2e-4
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.subset not in cmapss.SUPPORTED_SUBSETS:
            raise ValueError(
                f"subset {self.subset!r} not supported; use one of "
                f"{cmapss.SUPPORTED_SUBSETS}"
            )
        if self.max_epochs < 1 or self.n_folds < 2:
            raise ValueError("need max_epochs >= 1 and n_folds >= 2")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if None not in (self.lr_min, self.lr_max) and self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        window = self.window if self.window is not None else SUBSET_WINDOWS[self.subset]
        return ModelConfig(
            arch=self.model,
            window=window,
            dropout=self.dropout,
            scinet_dropout=self.scinet_dropout,
            head_hidden=self.head_hidden,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_rmse: float
    val_score: float
    lr: float


@dataclass
class RunHistory:
    entries: list[EpochStats] = field(default_factory=list)

    @property
    def val_rmse(self) -> np.ndarray:
        return np.asarray([e.val_rmse for e in self.entries])

    @property
    def train_loss(self) -> np.ndarray:
        return np.asarray([e.train_loss for e in self.entries])

    def to_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_rmse,val_score,lr"]
        for e in self.entries:
            lines.append(
                f"{e.epoch},{e.train_loss!r},{e.val_rmse!r},{e.val_score!r},{e.lr!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "RunHistory":
        rows = Path(path).read_text().strip().splitlines()[1:]
        hist = cls()
        for row in rows:
            ep, tl, vr, vs, lr = row.split(",")
            hist.entries.append(
                EpochStats(int(ep), float(tl), float(vr), float(vs), float(lr))
            )
        return hist


@dataclass
class ValBundle:
    """Per-engine stacks of the last k holdout windows and their target."""

    x: np.ndarray  # (E, K, W, C) float32
    targets: np.ndarray  # (E,)
    offsets: np.ndarray  # (K,) decrements back from the segment end


def build_val_bundle(
    mats: list[np.ndarray],
    segments: list[windows.HoldoutSegment],
    engine_idx: Sequence[int],
    window: int,
    cap: int,
    k: int,
) -> ValBundle:
    seg_by_engine = {s.engine: s for s in segments}
    stacks = []
    targets = []
    for e in engine_idx:
        seg = seg_by_engine[int(e)]
        ends = windows.validation_ends(seg, k)
        stacks.append(
            np.stack([windows.extract_window(mats[int(e)], end, window) for end in ends])
        )
        targets.append(windows.rul_at_cycle(len(mats[int(e)]), seg.end, cap))
    return ValBundle(
        x=np.stack(stacks).astype(np.float32),
        targets=np.asarray(targets, dtype=float),
        offsets=np.arange(k, dtype=float),
    )


def evaluate_val_bundle(model: nn.Module, bundle: ValBundle) -> tuple[float, float]:
    e, k, w, c = bundle.x.shape
    preds = evaluation.batch_predict(model, bundle.x.reshape(e * k, w, c))
    per_window = preds.reshape(e, k) - bundle.offsets
    estimates = np.clip(per_window.mean(axis=1), 0.0, None)
    return rmse(bundle.targets, estimates), phm_score(bundle.targets, estimates)


def train_model(
    model: nn.Module,
    train_x: np.ndarray,
    train_y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    val: ValBundle | None = None,
    n_epochs: int | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_epochs: Collection[int] = (),
) -> RunHistory:
    """Train in place for n_epochs (default cfg.max_epochs).

    Fresh Gaussian noise is drawn for every batch; the validation bundle,
    when given, is scored in eval mode after each epoch. Raises
    TrainingDiverged as soon as the loss stops being finite.
    """
    if None in (cfg.window, cfg.batch_size, cfg.lr_min, cfg.lr_max):
        raise ValueError("config has unresolved fields; call cfg.resolve() first")
    n = len(train_x)
    if n == 0:
        raise ValueError("no training windows")
    n_epochs = cfg.max_epochs if n_epochs is None else n_epochs
    batch = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    half_period = max(1, round(cfg.cycle_epochs * steps_per_epoch / 2))
    opt = AdamW(
        model.parameters(),
        lr=cfg.lr_min,
        weight_decay=cfg.weight_decay,
    )
    history = RunHistory()
    global_step = 0
    for epoch in range(1, n_epochs + 1):
        model.train()
        perm = rng.permutation(n)
        loss_sum = 0.0
        for step in range(steps_per_epoch):
            idx = perm[step * batch : (step + 1) * batch]
            xb = windows.add_noise(train_x[idx], cfg.noise_sigma, rng)
            xt = torch.as_tensor(xb)
            yt = torch.as_tensor(train_y[idx])
            out = model(xt)
            loss, _ = composite_loss(
                out.prediction,
                out.block_predictions,
                out.block_latents,
                yt,
                lam=cfg.loss_lambda,
                sigma=cfg.loss_sigma,
                beta=cfg.huber_beta,
                eps=cfg.cosine_eps,
                aux_predictions=out.aux_predictions,
            )
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, step)
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(model.parameters(), cfg.clip_norm)
            opt.lr = triangular_cyclic_lr(
                global_step, cfg.lr_min, cfg.lr_max, half_period, cfg.lr_cycle_decay
            )
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            global_step += 1
        train_loss = loss_sum / n
        if val is not None:
            val_rmse, val_score = evaluate_val_bundle(model, val)
        else:
            val_rmse, val_score = float("nan"), float("nan")
        history.entries.append(
            EpochStats(epoch, train_loss, val_rmse, val_score, opt.lr)
        )
        if checkpoint_dir is not None and epoch in set(checkpoint_epochs):
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:03d}.npz",
                model,
                meta={"epoch": epoch, "arch": cfg.model, "window": cfg.window},
            )
    return history


def select_plateau_epoch(val_rmse: Sequence[float], window: int = 5) -> int:
    """Epoch (1-based) minimizing the centered moving average of val RMSE.

    Series shorter than the smoothing window fall back to the raw argmin.
    Ties resolve to the earliest epoch.
    """
    series = np.asarray(val_rmse, dtype=float)
    if series.size == 0:
        raise ValueError("empty validation series")
    if not np.isfinite(series).all():
        raise ValueError("validation series contains non-finite values")
    if series.size < window:
        return int(np.argmin(series)) + 1
    half = window // 2
    smoothed = np.convolve(series, np.ones(window) / window, mode="valid")
    return int(np.argmin(smoothed)) + half + 1


@dataclass
class CvResult:
    fold_histories: list[RunHistory]
    plateau_epoch: int
    mean_val_rmse: np.ndarray


def run_cv(
    cfg: TrainConfig,
    mats: list[np.ndarray],
    run_dir: str | Path | None = None,
    verbose: bool = False,
) -> CvResult:
    """K-fold CV over engines; returns histories and the plateau epoch.

    Every engine draws one holdout segment per fold. Training windows of
    training engines exclude windows contained in their own segment;
    validation engines contribute their segment's last windows.
    """
    lengths = [len(m) for m in mats]
    fold_rng = np.random.default_rng([cfg.seed, 977])
    folds = windows.cv_engine_folds(len(mats), cfg.n_folds, fold_rng)
    histories = []
    for f, (train_idx, val_idx) in enumerate(folds):
        rng = np.random.default_rng([cfg.seed, f])
        segments = windows.sample_holdout_segments(lengths, cfg.window, rng)
        index = windows.training_index(
            lengths,
            cfg.window,
            cfg.rul_cap,
            cfg.capped_stride,
            segments=segments,
            engines=train_idx,
        )
        x = windows.assemble_windows(mats, index, cfg.window)
        y = windows.targets_for_index(lengths, index, cfg.rul_cap)
        bundle = build_val_bundle(
            mats, segments, val_idx, cfg.window, cfg.rul_cap, cfg.eval_windows
        )
        seed_torch(cfg.seed * 10000 + f)
        model = build_model(cfg.model_config())
        history = train_model(model, x, y, cfg, rng, val=bundle)
        histories.append(history)
        if run_dir is not None:
            fold_dir = Path(run_dir) / "cv" / f"fold_{f}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            history.to_csv(fold_dir / "history.csv")
        if verbose:
            best = float(np.min(history.val_rmse))
            print(f"  fold {f}: best val rmse {best:.3f}")
    mean_curve = np.mean([h.val_rmse for h in histories], axis=0)
    plateau = select_plateau_epoch(mean_curve)
    if run_dir is not None:
        payload = {
            "plateau_epoch": plateau,
            "mean_val_rmse": [float(v) for v in mean_curve],
        }
        (Path(run_dir) / "cv" / "plateau.json").write_text(
            json.dumps(payload, indent=2) + "\n"
        )
    return CvResult(histories, plateau, mean_curve)


def retrain_full(
    cfg: TrainConfig,
    mats: list[np.ndarray],
    plateau_epoch: int,
    run_dir: str | Path,
) -> tuple[list[Path], RunHistory]:
    """Retrain on all engines and persist the averaging checkpoints.

    Runs to plateau + avg_epochs - 1 and saves exactly those last
    avg_epochs checkpoints.
    """
    lengths = [len(m) for m in mats]
    index = windows.training_index(
        lengths, cfg.window, cfg.rul_cap, cfg.capped_stride
    )
    x = windows.assemble_windows(mats, index, cfg.window)
    y = windows.targets_for_index(lengths, index, cfg.rul_cap)
    last_epoch = plateau_epoch + cfg.avg_epochs - 1
    keep = range(plateau_epoch, last_epoch + 1)
    ckpt_dir = Path(run_dir) / "retrain" / "checkpoints"
    rng = np.random.default_rng([cfg.seed, 31337])
    seed_torch(cfg.seed * 10000 + 9999)
    model = build_model(cfg.model_config())
    history = train_model(
        model,
        x,
        y,
        cfg,
        rng,
        n_epochs=last_epoch,
        checkpoint_dir=ckpt_dir,
        checkpoint_epochs=keep,
    )
    history.to_csv(Path(run_dir) / "retrain" / "history.csv")
    paths = [ckpt_dir / f"epoch_{e:03d}.npz" for e in keep]
    return paths, history


def checkpoint_average_predict(
    checkpoint_paths: Sequence[str | Path],
    cfg: TrainConfig,
    test_mats: list[np.ndarray],
) -> np.ndarray:
    """Per-engine RUL estimates averaged over the plateau checkpoints."""
    from .nn import load_checkpoint

    if not checkpoint_paths:
        raise ValueError("no checkpoints to average")
    model = build_model(cfg.model_config())
    acc = np.zeros(len(test_mats))
    for path in checkpoint_paths:
        load_checkpoint(path, model)
        acc += evaluation.predict_per_engine(
            model, test_mats, cfg.window, cfg.eval_windows
        )
    return acc / len(checkpoint_paths)


def write_manifest(
    run_dir: str | Path,
    cfg: TrainConfig,
    dataset_hash: str,
    command: str,
) -> None:
    """One immutable manifest per run directory; no wall-clock fields."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": f"rulkit {__version__}",
        "command": command,
        "config": cfg.to_dict(),
        "dataset_hash": dataset_hash,
    }
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    lines = [f"{k} = {v}" for k, v in sorted(cfg.to_dict().items())]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n")


def load_manifest(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


def run_pipeline(
    cfg: TrainConfig,
    data_root: str | Path,
    run_dir: str | Path,
    verbose: bool = False,
) -> dict:
    """CV, retrain, and checkpoint-averaged test evaluation for one seed."""
    cfg = cfg.resolve()
    run_dir = Path(run_dir)
    # Smoke runs on reduced fixtures skip the published-size gate.
    train_mats, test_mats, test_rul, _ = cmapss.load_normalized_subset(
        data_root, cfg.subset, check_counts=cfg.max_engines is None
    )
    if cfg.max_engines is not None:
        train_mats = train_mats[: cfg.max_engines]
        test_mats = test_mats[: cfg.max_engines]
        test_rul = test_rul[: cfg.max_engines]
    write_manifest(run_dir, cfg, cmapss.dataset_hash(data_root, cfg.subset), "train")
    if verbose:
        print(f"[{cfg.model}/{cfg.subset}] seed {cfg.seed}: cross-validation")
    cv = run_cv(cfg, train_mats, run_dir=run_dir, verbose=verbose)
    if verbose:
        print(f"  plateau epoch {cv.plateau_epoch}; retraining on all engines")
    paths, _ = retrain_full(cfg, train_mats, cv.plateau_epoch, run_dir)
    preds = checkpoint_average_predict(paths, cfg, test_mats)
    report = evaluation.build_report(preds, test_rul, cfg.rul_cap)
    report.save(run_dir / "eval")
    summary = {
        "model": cfg.model,
        "subset": cfg.subset,
        "seed": cfg.seed,
        "plateau_epoch": cv.plateau_epoch,
        "rmse": report.rmse,
        "score": report.score,
    }
    if verbose:
        print(f"  test rmse {report.rmse:.3f}, score {report.score:.1f}")
    return summary


def aggregate_runs(summaries: Sequence[dict]) -> dict:
    """Mean and sample std of rmse/score across seed runs."""
    if not summaries:
        raise ValueError("no runs to aggregate")
    out: dict = {"n_runs": len(summaries), "seeds": [s["seed"] for s in summaries]}
    for key in ("rmse", "score"):
        vals = np.asarray([s[key] for s in summaries], dtype=float)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def multi_run(
    cfg: TrainConfig,
    seeds: Sequence[int],
    data_root: str | Path,
    out_dir: str | Path,
    verbose: bool = False,
) -> dict:
    """Run the pipeline once per seed and aggregate the test metrics."""
    out_dir = Path(out_dir)
    summaries = []
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=int(seed))
        summary = run_pipeline(
            run_cfg, data_root, out_dir / f"seed_{seed}", verbose=verbose
        )
        summaries.append(summary)
    agg = aggregate_runs(summaries)
    agg["runs"] = summaries
    (out_dir / "aggregate.json").write_text(json.dumps(agg, indent=2) + "\n")
    return agg
