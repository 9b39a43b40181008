"""Transformer reconstruction decoder and its spatial mixers.

The default mixer is kernelised linear attention with ``phi(x) = elu(x) + 1``;
softmax attention and depthwise convolutions are kept for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ConfigurationError

MIXERS = ("linear_attention", "softmax_attention", "conv1", "conv3", "conv5")


@dataclass
class DecoderConfig:
    num_layers: int = 8
    embed_dim: int = 768
    num_heads: int | None = None  # None -> embed_dim // 64
    mixer: str = "linear_attention"
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.num_heads is None:
            self.num_heads = max(1, self.embed_dim // 64)
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.mixer not in MIXERS:
            raise ConfigurationError(f"mixer must be one of {MIXERS}, got {self.mixer!r}")
        if self.num_layers < 1:
            raise ConfigurationError("decoder needs at least one layer")


def elu_feature_map(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x) + 1.0


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``phi(Q) (phi(K)^T V)`` normalised row-wise by ``phi(Q) (phi(K)^T 1)``.

    Works on ``(..., N, d_h)`` tensors; cost is O(N d_h^2).
    """
    q, k = elu_feature_map(q), elu_feature_map(k)
    kv = k.transpose(-2, -1) @ v  # (..., d_h, d_v)
    norm = q @ k.sum(dim=-2, keepdim=True).transpose(-2, -1)  # (..., N, 1)
    if not bool((norm > 0).all()):
        raise FloatingPointError("linear attention normaliser underflowed to zero")
    return (q @ kv) / norm


def linear_attention_weights(q, k):
    """Explicit ``N x N`` row-stochastic weights of :func:`linear_attention` (analysis only)."""
    a = elu_feature_map(q) @ elu_feature_map(k).transpose(-2, -1)
    return a / a.sum(-1, keepdim=True)


def softmax_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return softmax_attention_weights(q, k) @ v


def softmax_attention_weights(q, k):
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)


class AttentionMixer(nn.Module):
    def __init__(self, dim: int, num_heads: int, kind: str = "linear_attention"):
        super().__init__()
        self.num_heads = num_heads
        self.kind = kind
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def heads(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads)
        return qkv.permute(2, 0, 3, 1, 4)  # 3 x (B, h, N, d_h)

    def attention_weights(self, x):
        q, k, _ = self.heads(x)
        fn = linear_attention_weights if self.kind == "linear_attention" else softmax_attention_weights
        return fn(q, k)

    def forward(self, x, grid=None):
        B, N, C = x.shape
        q, k, v = self.heads(x)
        fn = linear_attention if self.kind == "linear_attention" else softmax_attention
        out = fn(q, k, v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class ConvMixer(nn.Module):
    """Depthwise ``k x k`` convolution over the token grid followed by a pointwise projection."""

    def __init__(self, dim: int, kernel_size: int):
        super().__init__()
        self.dw = nn.Conv2d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, grid):
        B, N, C = x.shape
        h, w = grid
        y = self.dw(x.transpose(1, 2).reshape(B, C, h, w))
        return self.proj(y.flatten(2).transpose(1, 2))


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mixer: str, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        if mixer.startswith("conv"):
            self.mixer = ConvMixer(dim, int(mixer[4:]))
        else:
            self.mixer = AttentionMixer(dim, num_heads, mixer)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, grid):
        x = x + self.mixer(self.norm1(x), grid)
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class Decoder(nn.Module):
    """Stack of pre-norm blocks; returns every block output, first block first.

    Block ``j`` (1-based) is paired with the ``j``-th deepest tapped encoder
    layer, so the returned list is ordered deepest-target first.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.embed_dim, cfg.num_heads, cfg.mixer, cfg.mlp_ratio) for _ in range(cfg.num_layers)
        )
        self.apply(_init_weights)

    def zero_init_residual_(self):
        """Zero the last projection of every residual branch (blocks become identities)."""
        for blk in self.blocks:
            for lin in (blk.mixer.proj, blk.fc2):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        return self

    def forward(self, z: torch.Tensor, grid: tuple[int, int]) -> list[torch.Tensor]:
        if z.shape[1] != grid[0] * grid[1]:
            raise ValueError(f"{z.shape[1]} tokens do not fill grid {grid}")
        outs = []
        x = z
        for blk in self.blocks:
            x = blk(x, grid)
            outs.append(x)
        return outs


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
