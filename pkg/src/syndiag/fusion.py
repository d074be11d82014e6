"""Similarity-weighted prompt mixing and the gated fusion unit."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import DTYPE, normal, rng


def synergy_weights(v_g: torch.Tensor, t_g: torch.Tensor) -> torch.Tensor:
    """Softmax over raw cosine similarities of ``v_g`` (``[D]`` or ``[B, D]``) to ``[C, D]`` class features."""
    if t_g.shape[0] < 2:
        raise ValueError("synergy weights need at least two classes")
    return torch.softmax(v_g @ t_g.T, dim=-1)


def mix_embeddings(weights: torch.Tensor, T: torch.Tensor) -> torch.Tensor:
    """Convex combination ``sum_c w_c T_c`` of ``[C, N_t, D]`` sequences."""
    if weights.shape[-1] != T.shape[0]:
        raise ValueError(f"{weights.shape[-1]} weights for {T.shape[0]} class sequences")
    return torch.einsum("...c,cnd->...nd", weights, T)


def mixed_text_feature(weights: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
    """Global feature of the mixed text: pooling commutes with mixing, then L2-normalise.

    ``pooled`` holds each class's (masked) token mean, ``[C, D]``.
    """
    return F.normalize(weights @ pooled, dim=-1)


class GatedFusion(nn.Module):
    """``z = sigmoid(W_g [v; t] + b_g)``, ``h = z * v + (1 - z) * t``."""

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        gen = rng(seed, 404)
        self.weight = nn.Parameter(normal(gen, (2 * dim, dim), (2 * dim) ** -0.5))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    def gate(self, v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(torch.cat([v, t], dim=-1) @ self.weight + self.bias)

    def forward(self, v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.dim or t.shape[-1] != self.dim:
            raise ValueError(f"gate expects dimension {self.dim}")
        z = self.gate(v, t)
        return z * v + (1 - z) * t


def gated_fuse(v_g: torch.Tensor, t_mix: torch.Tensor, params: GatedFusion) -> torch.Tensor:
    return params(v_g, t_mix)
