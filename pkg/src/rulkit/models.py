"""Model zoo: LSTM/CNN baselines and the attention-fused block models.

The shared extractor transposes a (window, sensors) input so each sensor
becomes a token of length `window`, runs a stacked LSTM with an additive
skip, applies single-head self-attention over the sensor tokens, and
flattens to a unit-normalized latent. The fused models combine two or
three such latents (the third from a sample-interaction convolution tree)
with attention over the latents themselves, and every block also carries
its own scalar regression head so each latent is trained to predict RUL
on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .nn import LstmStack, SelfAttention, unit_normalize

MODEL_TAGS = ("lstm", "cnn", "tfm", "dtfm", "tfim")
PROTOCOL_WINDOWS = (32, 40)


@dataclass
class ModelConfig:
    arch: str
    window: int
    n_sensors: int = 21
    lstm_layers: int = 3
    dropout: float = 0.5
    head_hidden: int = 256
    baseline_lstm_hidden: int = 21
    baseline_mlp_hidden: int = 126
    cnn_channels: tuple[int, int] = (5, 10)
    cnn_kernels: tuple[int, int] = (7, 3)
    cnn_pools: tuple[tuple[int, int], tuple[int, int]] = ((3, 2), (3, 1))
    cnn_hidden: tuple[int, int] = (60, 120)
    scinet_hidden: int = 16
    scinet_kernel: int = 3
    scinet_levels: int = 3
    scinet_dropout: float = 0.65
    scinet_stacks: int = 2

    def validate(self, strict_protocol: bool = False) -> None:
        if self.arch not in MODEL_TAGS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {MODEL_TAGS}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.n_sensors < 1:
            raise ValueError(f"n_sensors must be >= 1, got {self.n_sensors}")
        if self.arch == "tfim" and self.window % 2**self.scinet_levels != 0:
            raise ValueError(
                f"window {self.window} must be divisible by "
                f"2^{self.scinet_levels} for the interaction tree"
            )
        if strict_protocol and self.window not in PROTOCOL_WINDOWS:
            raise ValueError(
                f"protocol window must be one of {PROTOCOL_WINDOWS}, got {self.window}"
            )

    @property
    def latent_dim(self) -> int:
        return self.window * self.n_sensors


@dataclass
class ForwardOutput:
    """Fused prediction plus the per-block byproducts the loss consumes."""

    prediction: torch.Tensor  # (B,)
    block_predictions: list[torch.Tensor] = field(default_factory=list)
    block_latents: list[torch.Tensor] = field(default_factory=list)
    aux_predictions: list[torch.Tensor] = field(default_factory=list)


class BlockHead(nn.Module):
    """Scalar head on a latent: dropout, linear to 1, SiLU."""

    def __init__(self, d_in: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(nn.Dropout(dropout), nn.Linear(d_in, 1), nn.SiLU())

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


class MainHead(nn.Module):
    """Fused head: linear to hidden, SiLU, dropout, linear to 1."""

    def __init__(self, d_in: int, hidden: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


class TfmExtractor(nn.Module):
    """Sensors-as-tokens extractor producing a unit-normalized latent.

    Input (B, W, C) is transposed to (B, C, W), run through a stacked
    LSTM with hidden size W and an additive skip, then attention over
    the C tokens, then flattened to (B, C*W) and normalized.
    """

    def __init__(self, window: int, n_sensors: int, layers: int, dropout: float):
        super().__init__()
        self.lstm = LstmStack(window, window, layers, dropout)
        self.attention = SelfAttention(window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = x.transpose(1, 2)  # (B, C, W)
        h = self.lstm(tokens) + tokens
        h = self.attention(h)
        return unit_normalize(h.flatten(1))


class Interactor(nn.Module):
    """One even/odd interaction node of the convolution tree.

    Each branch is pad, conv down to a hidden channel count, LeakyReLU,
    dropout, conv back, tanh. The exponential gating keeps scales in a
    bounded band since tanh output lies in (-1, 1).
    """

    def __init__(self, channels: int, hidden: int, kernel: int, dropout: float):
        super().__init__()
        self.phi = self._branch(channels, hidden, kernel, dropout)
        self.psi = self._branch(channels, hidden, kernel, dropout)
        self.rho = self._branch(channels, hidden, kernel, dropout)
        self.eta = self._branch(channels, hidden, kernel, dropout)

    @staticmethod
    def _branch(channels: int, hidden: int, kernel: int, dropout: float) -> nn.Module:
        pad = (kernel - 1) // 2 + 1
        return nn.Sequential(
            nn.ReplicationPad1d((pad, pad)),
            nn.Conv1d(channels, hidden, kernel),
            nn.LeakyReLU(0.01),
            nn.Dropout(dropout),
            nn.Conv1d(hidden, channels, kernel),
            nn.Tanh(),
        )

    @staticmethod
    def _convolve(branch: nn.Module, x: torch.Tensor) -> torch.Tensor:
        # Branches convolve over time, so swap to channels-first and back.
        return branch(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        even = x[:, 0::2]
        odd = x[:, 1::2]
        d = odd * torch.exp(self._convolve(self.phi, even))
        c = even * torch.exp(self._convolve(self.psi, odd))
        even_out = c + self._convolve(self.eta, d)
        odd_out = d - self._convolve(self.rho, c)
        return even_out, odd_out


def interleave(even: torch.Tensor, odd: torch.Tensor) -> torch.Tensor:
    """Merge even/odd sub-sequences back into original time order."""
    b, n_even, c = even.shape
    n = min(n_even, odd.shape[1])
    merged = torch.stack((even[:, :n], odd[:, :n]), dim=2).reshape(b, 2 * n, c)
    if n_even > n:
        merged = torch.cat([merged, even[:, n:]], dim=1)
    elif odd.shape[1] > n:
        merged = torch.cat([merged, odd[:, n:]], dim=1)
    return merged


class ScinetTree(nn.Module):
    """Recursive split-interact-merge tree over the time axis."""

    def __init__(self, channels: int, hidden: int, kernel: int, dropout: float, levels: int):
        super().__init__()
        self.interactor = Interactor(channels, hidden, kernel, dropout)
        self.levels = levels
        if levels > 1:
            self.even_child = ScinetTree(channels, hidden, kernel, dropout, levels - 1)
            self.odd_child = ScinetTree(channels, hidden, kernel, dropout, levels - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        even, odd = self.interactor(x)
        if self.levels > 1:
            even = self.even_child(even)
            odd = self.odd_child(odd)
        return interleave(even, odd)


class ScinetExtractor(nn.Module):
    """Stacked interaction trees with residual sums and mid-stack heads.

    Produces the final unit-normalized latent plus one intermediate RUL
    estimate per gap between consecutive trees.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trees = nn.ModuleList(
            ScinetTree(
                cfg.n_sensors,
                cfg.scinet_hidden,
                cfg.scinet_kernel,
                cfg.scinet_dropout,
                cfg.scinet_levels,
            )
            for _ in range(cfg.scinet_stacks)
        )
        self.mid_heads = nn.ModuleList(
            BlockHead(cfg.latent_dim, cfg.dropout) for _ in range(cfg.scinet_stacks - 1)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        aux = []
        h = x
        for i, tree in enumerate(self.trees):
            h = tree(h) + h
            if i < len(self.trees) - 1:
                aux.append(self.mid_heads[i](unit_normalize(h.flatten(1))))
        return unit_normalize(h.flatten(1)), aux


def _apply_mask(
    latents: list[torch.Tensor], latent_mask: Sequence[bool] | None
) -> list[torch.Tensor]:
    if latent_mask is None:
        return latents
    if len(latent_mask) != len(latents):
        raise ValueError(f"mask length {len(latent_mask)} for {len(latents)} blocks")
    return [z if keep else torch.zeros_like(z) for z, keep in zip(latents, latent_mask)]


class LstmBaseline(nn.Module):
    """Stacked LSTM over raw windows with a flattened MLP head."""

    n_blocks = 0

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.baseline_lstm_hidden
        self.lstm = LstmStack(cfg.n_sensors, hidden, cfg.lstm_layers, cfg.dropout)
        flat = cfg.window * hidden
        self.head = nn.Sequential(
            nn.Linear(flat, cfg.baseline_mlp_hidden),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.baseline_mlp_hidden, 1),
        )

    def forward(
        self, x: torch.Tensor, latent_mask: Sequence[bool] | None = None
    ) -> ForwardOutput:
        h = self.lstm(x).flatten(1)
        return ForwardOutput(prediction=self.head(h).squeeze(-1))


class CnnBaseline(nn.Module):
    """Two conv/pool stages over time and a three-layer MLP head.

    The flattened size after the second pool is computed from the window
    length at build time rather than hard-coded.
    """

    n_blocks = 0

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.cnn_channels
        k1, k2 = cfg.cnn_kernels
        (pk1, ps1), (pk2, ps2) = cfg.cnn_pools
        self.features = nn.Sequential(
            nn.Conv1d(cfg.n_sensors, c1, k1),
            nn.ReLU(),
            nn.MaxPool1d(pk1, ps1),
            nn.Conv1d(c1, c2, k2),
            nn.ReLU(),
            nn.MaxPool1d(pk2, ps2),
        )
        length = cfg.window - k1 + 1
        length = (length - pk1) // ps1 + 1
        length = length - k2 + 1
        length = (length - pk2) // ps2 + 1
        if length < 1:
            raise ValueError(f"window {cfg.window} too short for the conv stack")
        h1, h2 = cfg.cnn_hidden
        self.head = nn.Sequential(
            nn.Linear(length * c2, h1),
            nn.ReLU(),
            nn.Linear(h1, h2),
            nn.ReLU(),
            nn.Linear(h2, 1),
        )

    def forward(
        self, x: torch.Tensor, latent_mask: Sequence[bool] | None = None
    ) -> ForwardOutput:
        h = self.features(x.transpose(1, 2)).flatten(1)
        return ForwardOutput(prediction=self.head(h).squeeze(-1))


class Tfm(nn.Module):
    """Single extractor block with its own head and the fused head."""

    n_blocks = 1

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.latent_dim
        self.block = TfmExtractor(cfg.window, cfg.n_sensors, cfg.lstm_layers, cfg.dropout)
        self.block_head = BlockHead(d, cfg.dropout)
        self.head = MainHead(d, cfg.head_hidden, cfg.dropout)

    def forward(
        self, x: torch.Tensor, latent_mask: Sequence[bool] | None = None
    ) -> ForwardOutput:
        latents = _apply_mask([self.block(x)], latent_mask)
        return ForwardOutput(
            prediction=self.head(latents[0]),
            block_predictions=[self.block_head(latents[0])],
            block_latents=latents,
        )


class _FusedBlocks(nn.Module):
    """Shared plumbing for the two- and three-block fused models."""

    def __init__(self, cfg: ModelConfig, n_blocks: int, with_interaction: bool):
        super().__init__()
        d = cfg.latent_dim
        extractors: list[nn.Module] = [
            TfmExtractor(cfg.window, cfg.n_sensors, cfg.lstm_layers, cfg.dropout)
            for _ in range(n_blocks - (1 if with_interaction else 0))
        ]
        if with_interaction:
            extractors.append(ScinetExtractor(cfg))
        self.extractors = nn.ModuleList(extractors)
        self.block_heads = nn.ModuleList(
            BlockHead(d, cfg.dropout) for _ in range(n_blocks)
        )
        self.attention = SelfAttention(d)
        self.head = MainHead(n_blocks * d, cfg.head_hidden, cfg.dropout)

    def forward(
        self, x: torch.Tensor, latent_mask: Sequence[bool] | None = None
    ) -> ForwardOutput:
        latents = []
        aux: list[torch.Tensor] = []
        for ext in self.extractors:
            out = ext(x)
            if isinstance(out, tuple):
                z, extra = out
                aux.extend(extra)
            else:
                z = out
            latents.append(z)
        latents = _apply_mask(latents, latent_mask)
        preds = [head(z) for head, z in zip(self.block_heads, latents)]
        tokens = torch.stack(latents, dim=1)  # (B, P, D)
        fused = self.attention(tokens).flatten(1)
        return ForwardOutput(
            prediction=self.head(fused),
            block_predictions=preds,
            block_latents=latents,
            aux_predictions=aux,
        )


class Dtfm(_FusedBlocks):
    """Two extractor blocks fused by attention over their latents."""

    n_blocks = 2

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, n_blocks=2, with_interaction=False)


class Tfim(_FusedBlocks):
    """Two extractor blocks plus the interaction-tree block, fused."""

    n_blocks = 3

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, n_blocks=3, with_interaction=True)


_REGISTRY = {
    "lstm": LstmBaseline,
    "cnn": CnnBaseline,
    "tfm": Tfm,
    "dtfm": Dtfm,
    "tfim": Tfim,
}


def build_model(cfg: ModelConfig) -> nn.Module:
    cfg.validate()
    return _REGISTRY[cfg.arch](cfg)
