"""Frozen vision-transformer feature extraction.

The encoder wraps any backbone exposing ``forward_layers(x) -> list[Tensor]``
(one ``(B, prefix + N, d)`` token array per transformer block) and turns its
output into a :class:`FeatureStack` restricted to the tapped layers.  Only the
class token and the patch tokens are kept; register tokens are dropped.

Backbones are resolved from a ``weight_id`` in this order: a local file, a
file named ``<weight_id>.pt`` inside ``$DINOLAB_CACHE``, then a named hook
(``"<hook>:<arg>"``) registered with :func:`register_weight_hook`.  The
``toy`` hook builds a randomly initialised ViT, which is what the test-suite
and the desk-scale experiments use.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigurationError(ValueError):
    """Raised for invalid or unsupported configuration values."""


class ShapeError(ValueError):
    pass


class WeightLoadError(RuntimeError):
    pass


@dataclass
class EncoderSpec:
    depth: int = 12
    embed_dim: int = 768
    patch_size: int = 14
    num_prefix_tokens: int = 1
    weight_id: str = "toy:0"
    num_heads: int = 12
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.depth < 4:
            raise ConfigurationError(f"encoder depth must be >= 4, got {self.depth}")
        if self.embed_dim <= 0:
            raise ConfigurationError("embed_dim must be positive")
        if self.num_prefix_tokens < 1:
            raise ConfigurationError("a class token is required (num_prefix_tokens >= 1)")
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)

    @property
    def num_register_tokens(self) -> int:
        return self.num_prefix_tokens - 1


@dataclass(frozen=True)
class LayerSelection:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigurationError(f"layer indices must be strictly increasing: {idx}")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


class LayerTokens(NamedTuple):
    cls: torch.Tensor  # (B, d)
    patches: torch.Tensor  # (B, N, d)


@dataclass
class FeatureStack:
    """Per-layer tokens for a batch of images, keyed by 1-based layer index."""

    layers: dict[int, LayerTokens]
    grid: tuple[int, int]
    recentered: bool = False

    @property
    def indices(self) -> list[int]:
        return sorted(self.layers)

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def patches(self, index: int) -> torch.Tensor:
        return self.layers[index].patches

    def to(self, device) -> "FeatureStack":
        layers = {i: LayerTokens(t.cls.to(device), t.patches.to(device)) for i, t in self.layers.items()}
        return FeatureStack(layers, self.grid, self.recentered)

    def select(self, rows) -> "FeatureStack":
        """Index the batch dimension of every layer."""
        layers = {i: LayerTokens(t.cls[rows], t.patches[rows]) for i, t in self.layers.items()}
        return FeatureStack(layers, self.grid, self.recentered)

    @staticmethod
    def cat(stacks: Sequence["FeatureStack"]) -> "FeatureStack":
        first = stacks[0]
        layers = {
            i: LayerTokens(
                torch.cat([s.layers[i].cls for s in stacks]),
                torch.cat([s.layers[i].patches for s in stacks]),
            )
            for i in first.layers
        }
        return FeatureStack(layers, first.grid, first.recentered)


def select_layers(spec: EncoderSpec, explicit: Sequence[int] | None = None) -> LayerSelection:
    """Pick the tapped layers: middle 8 of 12, or every other layer 5..19 of 24."""
    if explicit:
        sel = LayerSelection(tuple(explicit))
        if sel.indices[0] < 1 or sel.indices[-1] > spec.depth:
            raise ConfigurationError(f"layer indices {sel.indices} outside [1, {spec.depth}]")
        return sel
    if spec.depth == 12:
        return LayerSelection(tuple(range(3, 11)))
    if spec.depth == 24:
        return LayerSelection(tuple(range(5, 20, 2)))
    raise ConfigurationError(
        f"no built-in layer policy for depth {spec.depth}; pass an explicit layer list"
    )


def recenter(stack: FeatureStack) -> FeatureStack:
    """Subtract each layer's class token from all of that layer's patch tokens."""
    if stack.recentered:
        raise ValueError("stack is already recentered")
    layers = {i: LayerTokens(t.cls, t.patches - t.cls.unsqueeze(1)) for i, t in stack.layers.items()}
    return FeatureStack(layers, stack.grid, recentered=True)


def uncenter(stack: FeatureStack) -> FeatureStack:
    layers = {i: LayerTokens(t.cls, t.patches + t.cls.unsqueeze(1)) for i, t in stack.layers.items()}
    return FeatureStack(layers, stack.grid, recentered=False)


# ---------------------------------------------------------------------------
# Toy ViT backbone


def sincos_pos_embed(dim: int, rows: int, cols: int) -> torch.Tensor:
    if dim % 4:
        raise ConfigurationError("embed_dim must be divisible by 4 for sin-cos positions")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    yy, xx = torch.meshgrid(
        torch.arange(rows, dtype=torch.float64), torch.arange(cols, dtype=torch.float64), indexing="ij"
    )
    out_y = yy.reshape(-1, 1) * omega
    out_x = xx.reshape(-1, 1) * omega
    emb = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return emb.float()


class _Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        B, T, C = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(B, T, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(a.transpose(1, 2).reshape(B, T, C))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class ToyViT(nn.Module):
    """Plain pre-norm ViT with a class token, optional registers and sin-cos positions."""

    def __init__(self, depth=12, embed_dim=128, num_heads=2, patch_size=14, num_register_tokens=0):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.patch_embed = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, embed_dim) * 0.02)
        self.num_register_tokens = num_register_tokens
        self.register_tokens = nn.Parameter(torch.randn(1, num_register_tokens, embed_dim) * 0.02)
        self.blocks = nn.ModuleList(_Block(embed_dim, num_heads) for _ in range(depth))

    def forward_layers(self, x: torch.Tensor, max_layer: int | None = None) -> list[torch.Tensor]:
        x = self.patch_embed(x)
        rows, cols = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        x = x + sincos_pos_embed(self.embed_dim, rows, cols).to(x)
        B = x.shape[0]
        prefix = [self.cls_token.expand(B, -1, -1), self.register_tokens.expand(B, -1, -1)]
        x = torch.cat(prefix + [x], dim=1)
        outs = []
        for blk in self.blocks[: max_layer or len(self.blocks)]:
            x = blk(x)
            outs.append(x)
        return outs


class HubViTAdapter(nn.Module):
    """Adapter for DINOv2-style hub models (``prepare_tokens_with_masks`` + ``blocks``)."""

    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model

    def forward_layers(self, x, max_layer=None):
        x = self.model.prepare_tokens_with_masks(x)
        outs = []
        for blk in list(self.model.blocks)[: max_layer or len(self.model.blocks)]:
            x = blk(x)
            outs.append(x)
        return outs


# ---------------------------------------------------------------------------
# Weight resolution

WeightHook = Callable[[EncoderSpec], nn.Module]
_WEIGHT_HOOKS: dict[str, WeightHook] = {}


def register_weight_hook(name: str, hook: WeightHook) -> None:
    _WEIGHT_HOOKS[name] = hook


def _toy_hook(spec: EncoderSpec) -> nn.Module:
    _, _, arg = spec.weight_id.partition(":")
    seed = int(arg or 0)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyViT(spec.depth, spec.embed_dim, spec.num_heads, spec.patch_size, spec.num_register_tokens)


def _torchhub_hook(spec: EncoderSpec) -> nn.Module:
    # e.g. "torchhub:facebookresearch/dinov2/dinov2_vitb14_reg"
    _, _, arg = spec.weight_id.partition(":")
    repo, _, name = arg.rpartition("/")
    return HubViTAdapter(torch.hub.load(repo, name))


register_weight_hook("toy", _toy_hook)
register_weight_hook("torchhub", _torchhub_hook)


def save_backbone(model: ToyViT, path: str | Path) -> None:
    cfg = dict(
        depth=len(model.blocks),
        embed_dim=model.embed_dim,
        num_heads=model.blocks[0].num_heads,
        patch_size=model.patch_size,
        num_register_tokens=model.num_register_tokens,
    )
    torch.save({"arch": "toy_vit", "config": cfg, "state_dict": model.state_dict()}, path)


def _load_file(path: Path) -> nn.Module:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise WeightLoadError(f"cannot read backbone weights from {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("arch") != "toy_vit":
        raise WeightLoadError(f"{path} is not a dinolab backbone file")
    model = ToyViT(**blob["config"])
    model.load_state_dict(blob["state_dict"])
    return model


def load_backbone(spec: EncoderSpec) -> nn.Module:
    path = Path(spec.weight_id)
    if path.is_file():
        return _load_file(path)
    cache = os.environ.get("DINOLAB_CACHE")
    if cache:
        cached = Path(cache) / f"{spec.weight_id}.pt"
        if cached.is_file():
            return _load_file(cached)
    hook = _WEIGHT_HOOKS.get(spec.weight_id.partition(":")[0])
    if hook is None:
        raise WeightLoadError(
            f"cannot resolve weights {spec.weight_id!r}: not a file, not in $DINOLAB_CACHE, no matching hook"
        )
    return hook(spec)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Encoder(nn.Module):
    """Frozen backbone that returns a :class:`FeatureStack` of the tapped layers."""

    def __init__(self, spec: EncoderSpec, selection: LayerSelection | None = None,
                 backbone: nn.Module | None = None, recenter: bool = True):
        super().__init__()
        self.spec = spec
        self.selection = selection or select_layers(spec)
        if self.selection.indices[-1] > spec.depth:
            raise ConfigurationError("selected layer beyond encoder depth")
        self.backbone = backbone if backbone is not None else load_backbone(spec)
        self.backbone.requires_grad_(False)
        self.backbone.eval()
        self.apply_recentering = recenter

    def train(self, mode: bool = True):
        # the backbone never leaves eval mode
        super().train(mode)
        self.backbone.eval()
        return self

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        p = self.spec.patch_size
        if height % p or width % p:
            raise ShapeError(f"image size {height}x{width} not divisible by patch size {p}")
        return height // p, width // p

    @torch.no_grad()
    def extract(self, images: torch.Tensor | np.ndarray) -> FeatureStack:
        """Raw (not recentered) features for ``(B, 3, H, W)`` or a single ``(H, W, 3)`` array."""
        if isinstance(images, np.ndarray):
            if images.ndim != 3:
                raise ShapeError("numpy input must be a single H x W x C image")
            images = torch.from_numpy(np.ascontiguousarray(images.transpose(2, 0, 1)))[None]
        if images.ndim == 3:
            images = images[None]
        grid = self.grid_for(*images.shape[-2:])
        param = next(self.backbone.parameters())
        images = images.to(device=param.device, dtype=param.dtype)
        outs = self.backbone.forward_layers(images, max_layer=self.selection.indices[-1])
        n_prefix = self.spec.num_prefix_tokens
        layers = {}
        for i in self.selection:
            tok = outs[i - 1]
            if tok.shape[1] != n_prefix + grid[0] * grid[1]:
                raise ShapeError(f"layer {i}: got {tok.shape[1]} tokens, expected {n_prefix + grid[0] * grid[1]}")
            layers[i] = LayerTokens(tok[:, 0].contiguous(), tok[:, n_prefix:].contiguous())
        return FeatureStack(layers, grid)

    def features(self, images) -> FeatureStack:
        """Extraction followed by recentering when it is enabled."""
        stack = self.extract(images)
        return recenter(stack) if self.apply_recentering else stack


def patch_grid(image_size: int, patch_size: int) -> tuple[int, int]:
    n = image_size / patch_size
    if not n.is_integer():
        raise ShapeError(f"{image_size} not divisible by {patch_size}")
    return int(n), int(n)


__all__ = [
    "ConfigurationError", "ShapeError", "WeightLoadError", "EncoderSpec", "LayerSelection",
    "LayerTokens", "FeatureStack", "select_layers", "recenter", "uncenter", "ToyViT",
    "HubViTAdapter", "register_weight_hook", "load_backbone", "save_backbone",
    "parameter_checksum", "Encoder", "patch_grid", "sincos_pos_embed",
]
