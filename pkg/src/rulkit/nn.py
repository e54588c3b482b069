"""Neural building blocks shared by the model zoo.

Stacked LSTM with inter-layer dropout, single-head self-attention,
latent unit-normalization, a from-scratch decoupled-weight-decay Adam,
a triangular cyclic learning rate, and npz checkpoints with a JSON
manifest sidecar.
"""

from __future__ import annotations

import io
import json
import math
import os
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

NORM_EPS = 1e-12


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)


def unit_normalize(z: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Scale the last axis to unit norm; all-zero vectors stay zero."""
    norm = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    return z / norm.clamp_min(eps)


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over a token axis.

    Queries, keys and values are linear maps of the input; there is no
    positional encoding, so the module is equivariant to token order.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q = self.query(x)
        k = self.key(x)
        v = self.value(x)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_model)
        return torch.softmax(scores, dim=-1) @ v


class LstmStack(nn.Module):
    """Stacked LSTM, zero initial state, dropout between layers.

    Weights keep the default uniform fan-in initialization; forget-gate
    biases are raised to 1 so gates start mostly open.
    """

    def __init__(self, d_in: int, hidden: int, layers: int, dropout: float):
        super().__init__()
        self.lstm = nn.LSTM(
            d_in,
            hidden,
            num_layers=layers,
            batch_first=True,
            dropout=dropout if layers > 1 else 0.0,
        )
        self._raise_forget_bias()

    def _raise_forget_bias(self) -> None:
        h = self.lstm.hidden_size
        with torch.no_grad():
            for name, p in self.lstm.named_parameters():
                if name.startswith("bias_ih"):
                    p[h : 2 * h] = 1.0
                elif name.startswith("bias_hh"):
                    p[h : 2 * h] = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.lstm(x)
        return out


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    The decay multiplies parameters by (1 - lr * weight_decay) before the
    moment update, so it never enters the adaptive denominators. `lr` is
    a plain attribute and may be reassigned between steps by a schedule.
    """

    def __init__(
        self,
        params: Iterable[nn.Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.params = [p for p in params if p.requires_grad]
        if not self.params:
            raise ValueError("no trainable parameters")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [torch.zeros_like(p) for p in self.params]
        self._v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bc1, denom, value=-self.lr)


def triangular_cyclic_lr(
    step: int,
    lr_min: float,
    lr_max: float,
    half_period: int,
    decay: float = 1.0,
) -> float:
    """Triangle wave from lr_min up to lr_max and back, period 2*half_period.

    Step 0 sits at lr_min, step half_period at lr_max. `decay` shrinks the
    amplitude by that factor each full cycle; 1.0 leaves it fixed.
    """
    if not lr_min <= lr_max:
        raise ValueError(f"need lr_min <= lr_max, got [{lr_min}, {lr_max}]")
    if half_period < 1:
        raise ValueError(f"half_period must be >= 1, got {half_period}")
    cycle, phase = divmod(step, 2 * half_period)
    amp = (lr_max - lr_min) * decay**cycle
    frac = phase / half_period
    if frac > 1.0:
        frac = 2.0 - frac
    return lr_min + amp * frac


def clip_grad_norm(params: Iterable[nn.Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm."""
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, model: nn.Module, meta: dict | None = None) -> None:
    """Write model weights as an npz plus a JSON manifest, atomically.

    The manifest records parameter shapes so a stale or mismatched file is
    rejected at load time instead of silently reshaping.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **state)
    _atomic_write_bytes(path, buf.getvalue())
    manifest = {
        "format": "npz-state-dict",
        "parameters": {k: list(v.shape) for k, v in state.items()},
        "param_count": int(sum(v.size for v in state.values())),
        "meta": meta or {},
    }
    _atomic_write_bytes(
        path.with_suffix(path.suffix + ".json"),
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode(),
    )


def load_checkpoint(path: str | Path, model: nn.Module) -> dict:
    """Load npz weights into the model; returns the manifest dict."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    state = model.state_dict()
    if set(arrays) != set(state):
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        raise ValueError(f"{path}: state mismatch, missing {missing}, extra {extra}")
    for k, v in state.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise ValueError(
                f"{path}: shape mismatch for {k}: "
                f"{tuple(arrays[k].shape)} vs {tuple(v.shape)}"
            )
    model.load_state_dict(
        {k: torch.as_tensor(a, dtype=state[k].dtype) for k, a in arrays.items()}
    )
    manifest_path = path.with_suffix(path.suffix + ".json")
    if manifest_path.exists():
        return json.loads(manifest_path.read_text())
    return {}
