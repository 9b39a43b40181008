"""Encoder + noisy bottleneck + decoder wired together from a :class:`RunConfig`."""

from __future__ import annotations

import torch
from torch import nn

from .bottleneck import NoisyBottleneck, aggregate
from .config import RunConfig
from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, EncoderSpec, FeatureStack, recenter, select_layers
from .objective import build_groups, make_scheme
from .scoring import fuse_rgb_3d


def encoder_spec(cfg: RunConfig) -> EncoderSpec:
    e = cfg.encoder
    return EncoderSpec(depth=e.depth, embed_dim=e.embed_dim, patch_size=e.patch_size,
                       num_prefix_tokens=e.num_prefix_tokens, weight_id=e.weight_id,
                       num_heads=e.num_heads, mean=e.mean, std=e.std)


class AnomalyModel(nn.Module):
    def __init__(self, cfg: RunConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        spec = encoder_spec(cfg)
        selection = select_layers(spec, cfg.encoder.layers or None)
        self.encoder = Encoder(spec, selection, backbone=backbone, recenter=cfg.encoder.recenter)
        d = spec.embed_dim
        self.bottleneck = NoisyBottleneck(d, cfg.bottleneck)
        dc = cfg.decoder
        self.decoder = Decoder(DecoderConfig(dc.num_layers, d, dc.num_heads, dc.mixer, dc.mlp_ratio))
        self.scheme = make_scheme(cfg.objective.scheme, selection.indices, dc.num_layers)

    def trainable_modules(self) -> nn.ModuleDict:
        return nn.ModuleDict({"bottleneck": self.bottleneck, "decoder": self.decoder})

    def trainable_parameters(self):
        return list(self.bottleneck.parameters()) + list(self.decoder.parameters())

    def encode(self, images: torch.Tensor, depth: torch.Tensor | None = None) -> FeatureStack:
        """Encoder features (fused with depth features when given), recentered if enabled."""
        stack = self.encoder.extract(images)
        if depth is not None:
            stack = fuse_rgb_3d(stack, self.encoder.extract(depth))
        return recenter(stack) if self.encoder.apply_recentering else stack

    def reconstruct(self, stack: FeatureStack, training: bool = False, seed: int | None = None):
        z = self.bottleneck(aggregate(stack), training=training, seed=seed)
        return self.decoder(z, stack.grid)

    def pairs(self, stack: FeatureStack, training: bool = False, seed: int | None = None):
        return build_groups(stack, self.reconstruct(stack, training, seed), self.scheme)

    def forward(self, images, depth=None, training=False, seed=None):
        return self.pairs(self.encode(images, depth), training, seed)
