"""Feature aggregation and the dropout-bearing MLP bottleneck."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ConfigurationError, FeatureStack, ShapeError

NOISE_MODES = ("dropout", "feature_jitter", "none")


class NumericError(FloatingPointError):
    pass


@dataclass
class BottleneckConfig:
    num_layers: int = 3
    hidden_dim: Optional[int] = None  # None -> 4 * embed_dim
    dropout_rate: float = 0.2
    noise_mode: str = "dropout"
    jitter_scale: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_layers < 1:
            raise ConfigurationError("bottleneck needs at least one layer")
        if self.hidden_dim is not None and self.hidden_dim <= 0:
            raise ConfigurationError("hidden_dim must be positive")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigurationError(f"noise_mode must be one of {NOISE_MODES}")


def aggregate(stack: FeatureStack) -> torch.Tensor:
    """Sum the patch tokens of every layer in the stack -> ``(B, N, d)``."""
    tensors = [stack.layers[i].patches for i in stack.indices]
    shape = tensors[0].shape
    for i, t in zip(stack.indices, tensors):
        if t.shape != shape:
            raise ShapeError(f"layer {i} has shape {tuple(t.shape)}, expected {tuple(shape)}")
    return torch.stack(tensors).sum(0)


def feature_jitter(z0: torch.Tensor, scale: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Gaussian noise with per-token std ``scale * ||z0_n||_2 / d``."""
    d = z0.shape[-1]
    std = scale * z0.norm(dim=-1, keepdim=True) / d
    noise = torch.randn(z0.shape, generator=generator, device=z0.device, dtype=z0.dtype)
    return z0 + noise * std


class NoisyBottleneck(nn.Module):
    """MLP ``d -> 4d -> 4d -> d`` whose every layer output is hit by inverted dropout in training.

    Randomness is explicit: a training-mode call takes ``seed`` and draws all
    masks from a private generator, one independent mask per layer.
    """

    def __init__(self, embed_dim: int, cfg: BottleneckConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BottleneckConfig()
        hidden = cfg.hidden_dim or 4 * embed_dim
        widths = [embed_dim] + [hidden] * (cfg.num_layers - 1) + [embed_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths, widths[1:]))
        for m in self.layers:
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)

    def _generator(self, seed, device):
        if seed is None:
            seed = int(torch.randint(0, 2**62, (1,)).item())
        g = torch.Generator(device=device)
        g.manual_seed(int(seed))
        return g

    def forward(self, z0: torch.Tensor, training: bool = False, seed: int | None = None,
                trace: list | None = None) -> torch.Tensor:
        """Run the bottleneck.

        Args:
            z0: aggregated tokens ``(..., d)``.
            training: enables the configured noise.
            seed: seeds the noise generator for this call.
            trace: if given, receives one ``(unmasked, mask)`` pair per layer;
                ``mask`` already carries the ``1 / (1 - p)`` rescale, or is
                ``None`` when no masking happened.
        """
        if not torch.isfinite(z0).all():
            raise NumericError("non-finite values entering the bottleneck")
        cfg = self.cfg
        g = None
        if training and cfg.noise_mode != "none":
            g = self._generator(seed, z0.device)
        x = z0
        if training and cfg.noise_mode == "feature_jitter":
            x = feature_jitter(x, cfg.jitter_scale, g)
        keep = 1.0 - cfg.dropout_rate
        last = len(self.layers) - 1
        for j, layer in enumerate(self.layers):
            x = layer(x)
            if j < last:
                x = F.gelu(x)
            mask = None
            if training and cfg.noise_mode == "dropout" and cfg.dropout_rate > 0:
                mask = torch.bernoulli(torch.full_like(x, keep), generator=g) / keep
            if trace is not None:
                trace.append((x, mask))
            if mask is not None:
                x = x * mask
        return x
