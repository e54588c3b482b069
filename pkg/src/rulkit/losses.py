"""Training losses: Huber regression terms and the latent separation term.

The composite objective is the Huber loss of the fused prediction plus a
lambda-weighted sum of the per-block Huber losses plus a sigma-weighted
cosine term that pushes the block latents toward mutual orthogonality.
"""

from __future__ import annotations

from typing import Sequence

import torch

HUBER_BETA = 1.0
COSINE_EPS = 1e-7
LAMBDA_BLOCKS = 0.3
SIGMA_COSINE = 1.0


def huber(pred: torch.Tensor, target: torch.Tensor, beta: float = HUBER_BETA) -> torch.Tensor:
    """Mean Huber loss: quadratic inside +-beta, linear outside."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    d = pred - target
    abs_d = d.abs()
    quad = 0.5 * d * d
    lin = beta * (abs_d - 0.5 * beta)
    return torch.where(abs_d <= beta, quad, lin).mean()


def mcosine_loss(latents: Sequence[torch.Tensor], eps: float = COSINE_EPS) -> torch.Tensor:
    """Clipped pairwise cosine similarity, summed over ordered block pairs.

    Each batch item contributes relu(cos(z_i, z_j)) for every ordered pair
    i != j, so identical latents score 2 per pair-of-blocks while orthogonal
    or opposed latents score 0; the batch dimension is averaged.
    """
    if len(latents) == 0:
        raise ValueError("need at least one latent")
    if len(latents) == 1:
        return torch.zeros((), dtype=latents[0].dtype, device=latents[0].device)
    z = torch.stack(tuple(latents), dim=1)  # (B, P, D)
    norms = torch.linalg.vector_norm(z, dim=-1)  # (B, P)
    dots = torch.einsum("bid,bjd->bij", z, z)
    denom = (norms.unsqueeze(2) * norms.unsqueeze(1)).clamp_min(eps)
    cos = dots / denom
    p = z.shape[1]
    off = ~torch.eye(p, dtype=torch.bool, device=z.device)
    return torch.relu(cos)[:, off].sum(dim=-1).mean()


def composite_loss(
    prediction: torch.Tensor,
    block_predictions: Sequence[torch.Tensor],
    block_latents: Sequence[torch.Tensor],
    target: torch.Tensor,
    lam: float = LAMBDA_BLOCKS,
    sigma: float = SIGMA_COSINE,
    beta: float = HUBER_BETA,
    eps: float = COSINE_EPS,
    aux_predictions: Sequence[torch.Tensor] = (),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total training loss and its detached parts.

    Block and auxiliary predictions each add a lambda-weighted Huber term
    against the same target; the cosine term only applies when there are
    at least two latents. Baselines pass empty sequences and degenerate to
    the plain Huber loss.
    """
    if len(block_predictions) != len(block_latents):
        raise ValueError(
            f"{len(block_predictions)} block predictions for "
            f"{len(block_latents)} latents"
        )
    main = huber(prediction, target, beta)
    total = main
    block_part = torch.zeros((), dtype=main.dtype, device=main.device)
    for bp in list(block_predictions) + list(aux_predictions):
        block_part = block_part + huber(bp, target, beta)
    total = total + lam * block_part
    if len(block_latents) >= 2:
        cos_part = mcosine_loss(block_latents, eps)
    else:
        cos_part = torch.zeros((), dtype=main.dtype, device=main.device)
    total = total + sigma * cos_part
    parts = {
        "huber_main": float(main.detach()),
        "huber_blocks": float(block_part.detach()),
        "mcosine": float(cos_part.detach()),
    }
    return total, parts
