"""Test-time evaluation: per-engine estimates, ablation, and trajectory plots.

A test engine's RUL estimate averages the predictions of its last k
windows, each corrected by its distance from the final cycle, clamped at
zero. Reports carry RMSE and the asymmetric score against cap-limited
targets.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .metrics import phm_score, rmse
from .windows import EVAL_WINDOWS, RUL_CAP, extract_window, piecewise_rul


def batch_predict(
    model: nn.Module,
    x: np.ndarray,
    batch_size: int = 512,
    latent_mask: Sequence[bool] | None = None,
) -> np.ndarray:
    """Fused predictions for an (N, W, C) array, in eval mode."""
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xt = torch.as_tensor(np.ascontiguousarray(x[i : i + batch_size]))
            out = model(xt, latent_mask=latent_mask)
            preds.append(out.prediction.cpu().numpy())
    return np.concatenate(preds) if preds else np.empty(0)


def predict_engine_rul(
    model: nn.Module,
    mat: np.ndarray,
    window: int,
    k: int = EVAL_WINDOWS,
    latent_mask: Sequence[bool] | None = None,
) -> float:
    """RUL estimate at the engine's last observed cycle.

    Uses the k windows ending at the last cycles; the window ending j
    cycles before the end predicts a value j higher, so each prediction
    is reduced by its offset before averaging. Estimates never go below
    zero. Short trajectories are left-padded by the first row.
    """
    n_cycles = len(mat)
    offsets = [j for j in range(k) if n_cycles - j >= 1]
    stack = np.stack(
        [extract_window(mat, n_cycles - j, window) for j in offsets]
    ).astype(np.float32)
    preds = batch_predict(model, stack, latent_mask=latent_mask)
    estimate = float(np.mean(preds - np.asarray(offsets, dtype=float)))
    return max(0.0, estimate)


def predict_per_engine(
    model: nn.Module,
    mats: list[np.ndarray],
    window: int,
    k: int = EVAL_WINDOWS,
    latent_mask: Sequence[bool] | None = None,
) -> np.ndarray:
    """Vector of per-engine estimates, batched across engines."""
    stacks = []
    offsets = []
    counts = []
    for mat in mats:
        n_cycles = len(mat)
        offs = [j for j in range(k) if n_cycles - j >= 1]
        stacks.extend(extract_window(mat, n_cycles - j, window) for j in offs)
        offsets.extend(offs)
        counts.append(len(offs))
    preds = batch_predict(
        model, np.stack(stacks).astype(np.float32), latent_mask=latent_mask
    )
    corrected = preds - np.asarray(offsets, dtype=float)
    out = np.empty(len(mats))
    pos = 0
    for i, c in enumerate(counts):
        out[i] = max(0.0, float(corrected[pos : pos + c].mean()))
        pos += c
    return out


@dataclass
class EvalReport:
    rmse: float
    score: float
    predictions: np.ndarray
    targets: np.ndarray

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "n_engines": int(len(self.predictions)),
            "rmse": self.rmse,
            "score": self.score,
        }
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
        lines = ["engine,target,prediction,error"]
        for i, (t, p) in enumerate(zip(self.targets, self.predictions), start=1):
            t, p = float(t), float(p)
            lines.append(f"{i},{t!r},{p!r},{p - t!r}")
        (out_dir / "per_engine.csv").write_text("\n".join(lines) + "\n")


def build_report(
    predictions: np.ndarray, test_rul: np.ndarray, cap: int = RUL_CAP
) -> EvalReport:
    """Score predictions against cap-limited true RUL values."""
    targets = np.minimum(np.asarray(test_rul, dtype=float), cap)
    predictions = np.asarray(predictions, dtype=float)
    return EvalReport(
        rmse=rmse(targets, predictions),
        score=phm_score(targets, predictions),
        predictions=predictions,
        targets=targets,
    )


def evaluate_model(
    model: nn.Module,
    test_mats: list[np.ndarray],
    test_rul: np.ndarray,
    window: int,
    k: int = EVAL_WINDOWS,
    cap: int = RUL_CAP,
) -> EvalReport:
    preds = predict_per_engine(model, test_mats, window, k)
    return build_report(preds, test_rul, cap)


def ablation_masks(n_blocks: int) -> list[tuple[bool, ...]]:
    """All keep/drop combinations, full model first."""
    return list(itertools.product((True, False), repeat=n_blocks))


def ablation_report(
    model: nn.Module,
    test_mats: list[np.ndarray],
    test_rul: np.ndarray,
    window: int,
    k: int = EVAL_WINDOWS,
    cap: int = RUL_CAP,
) -> list[dict]:
    """Test metrics for every latent mask of a multi-block model."""
    n_blocks = getattr(model, "n_blocks", 0)
    if n_blocks < 2:
        raise ValueError("ablation needs a model with at least two blocks")
    rows = []
    for mask in ablation_masks(n_blocks):
        preds = predict_per_engine(model, test_mats, window, k, latent_mask=mask)
        report = build_report(preds, test_rul, cap)
        rows.append(
            {
                "mask": "".join("1" if m else "0" for m in mask),
                "n_active": sum(mask),
                "rmse": report.rmse,
                "score": report.score,
            }
        )
    return rows


def save_ablation_csv(rows: list[dict], path: str | Path) -> None:
    lines = ["mask,n_active,rmse,score"]
    for r in rows:
        lines.append(f"{r['mask']},{r['n_active']},{r['rmse']!r},{r['score']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def trajectory_curve(
    model: nn.Module,
    mat: np.ndarray,
    window: int,
    batch_size: int = 256,
) -> np.ndarray:
    """Prediction at every cycle of one trajectory, earliest first.

    Cycles before the first full window use left-padded windows, so the
    curve has exactly one value per observed cycle.
    """
    n_cycles = len(mat)
    stack = np.stack(
        [extract_window(mat, c, window) for c in range(1, n_cycles + 1)]
    ).astype(np.float32)
    return batch_predict(model, stack, batch_size=batch_size)


def lowess_smooth(y: np.ndarray, frac: float = 0.11) -> np.ndarray:
    """Locally weighted linear smoother over an equally spaced series.

    Tricube weights over the ceil(frac*n) nearest points. Exact on
    constant and linear inputs.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if not 0 < frac <= 1:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    if n < 3:
        return y.copy()
    q = max(2, min(n, int(np.ceil(frac * n))))
    x = np.arange(n, dtype=float)
    out = np.empty(n)
    for i in range(n):
        d = np.abs(x - x[i])
        idx = np.argpartition(d, q - 1)[:q]
        dmax = d[idx].max()
        if dmax == 0:
            out[i] = y[idx].mean()
            continue
        w = np.clip(1.0 - (d[idx] / dmax) ** 3, 0.0, None) ** 3
        sw = w.sum()
        xb = (w * x[idx]).sum() / sw
        yb = (w * y[idx]).sum() / sw
        var = (w * (x[idx] - xb) ** 2).sum()
        if var > 0:
            beta = (w * (x[idx] - xb) * (y[idx] - yb)).sum() / var
        else:
            beta = 0.0
        out[i] = yb + beta * (x[i] - xb)
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_history(history, path: str | Path) -> None:
    plt = _pyplot()
    epochs = [e.epoch for e in history.entries]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, [e.train_loss for e in history.entries], label="train loss")
    val = [e.val_rmse for e in history.entries]
    if np.isfinite(val).any():
        ax1.plot(epochs, val, label="val rmse")
    ax1.set_xlabel("epoch")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectory(
    curve: np.ndarray,
    path: str | Path,
    target_curve: np.ndarray | None = None,
    smooth_frac: float | None = None,
    title: str = "",
) -> None:
    """Per-cycle predictions with optional true RUL line and smoothing."""
    plt = _pyplot()
    cycles = np.arange(1, len(curve) + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(cycles, curve, lw=1.0, alpha=0.8, label="predicted")
    if smooth_frac is not None:
        ax.plot(cycles, lowess_smooth(curve, smooth_frac), lw=2.0, label="smoothed")
    if target_curve is not None:
        ax.plot(cycles, target_curve, "k--", lw=1.5, label="true")
    ax.set_xlabel("cycle")
    ax.set_ylabel("RUL")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list[dict], path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    masks = [r["mask"] for r in rows]
    ax.bar(masks, [r["rmse"] for r in rows])
    ax.set_xlabel("active blocks mask")
    ax.set_ylabel("test RMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def true_rul_curve(n_cycles: int, cap: int = RUL_CAP) -> np.ndarray:
    return piecewise_rul(n_cycles, cap).astype(float)
