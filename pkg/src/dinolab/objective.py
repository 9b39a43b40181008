"""Reconstruction targets, the loose (hard-mining) cosine loss and its schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .encoder import ConfigurationError, FeatureStack

SCHEMES = (
    "layer2layer_last1",
    "layer2layer_dense",
    "layer2layer_sparse2",
    "layer2layer_sparse4",
    "group1",
    "group2",
    "group4",
)
EPS = 1e-8


@dataclass(frozen=True)
class GroupingScheme:
    """Paired encoder-layer sets and decoder-block sets (both 1-based)."""

    mode: str
    encoder_sets: tuple[tuple[int, ...], ...]
    decoder_sets: tuple[tuple[int, ...], ...]

    def validate(self, selected: tuple[int, ...], num_blocks: int) -> None:
        if len(self.encoder_sets) != len(self.decoder_sets) or not self.encoder_sets:
            raise ConfigurationError("encoder and decoder group counts differ")
        for side, sets, universe in (
            ("encoder", self.encoder_sets, set(selected)),
            ("decoder", self.decoder_sets, set(range(1, num_blocks + 1))),
        ):
            flat = [i for s in sets for i in s]
            if len(flat) != len(set(flat)):
                raise ConfigurationError(f"{side} groups overlap")
            if not set(flat) <= universe:
                raise ConfigurationError(f"{side} groups reference {sorted(set(flat) - universe)}")


def make_scheme(mode: str, selected: tuple[int, ...], num_blocks: int | None = None) -> GroupingScheme:
    """Build a named scheme for tapped layers ``selected`` (shallow to deep).

    Decoder block ``j`` targets ``selected[-j]``; i.e. the first block
    reconstructs the deepest tapped layer.
    """
    n = len(selected)
    num_blocks = num_blocks or n
    if num_blocks != n:
        raise ConfigurationError(f"{n} tapped layers but {num_blocks} decoder blocks")
    block_of = {layer: n - pos for pos, layer in enumerate(selected)}  # layer -> 1-based block

    def chunks(size):
        return [tuple(selected[i:i + size]) for i in range(0, n, size)]

    if mode == "group1":
        groups = chunks(n)
    elif mode == "group2":
        groups = chunks(n // 2)
    elif mode == "group4":
        groups = chunks(n // 4)
    elif mode == "layer2layer_dense":
        groups = chunks(1)
    elif mode == "layer2layer_sparse2":
        groups = [(layer,) for layer in selected[1::2]]
    elif mode == "layer2layer_sparse4":
        groups = [(layer,) for layer in selected[3::4]]
    elif mode == "layer2layer_last1":
        groups = [(selected[-1],)]
    else:
        raise ConfigurationError(f"unknown grouping scheme {mode!r}; choose from {SCHEMES}")
    dec = tuple(tuple(sorted(block_of[layer] for layer in g)) for g in groups)
    scheme = GroupingScheme(mode, tuple(groups), dec)
    scheme.validate(tuple(selected), num_blocks)
    return scheme


def build_groups(stack: FeatureStack, decoded: list[torch.Tensor], scheme: GroupingScheme):
    """Summed targets ``g_k`` and summed reconstructions ``g_hat_k`` for every group."""
    scheme.validate(tuple(stack.indices), len(decoded))
    pairs = []
    for enc, dec in zip(scheme.encoder_sets, scheme.decoder_sets):
        g = sum(stack.layers[i].patches for i in enc)
        g_hat = sum(decoded[j - 1] for j in dec)
        pairs.append((g, g_hat))
    return pairs


@dataclass
class LooseLossConfig:
    discard_rate_final: float = 0.9
    warmup_iters: int = 1000
    grad_scale: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.discard_rate_final < 1.0:
            raise ConfigurationError("discard_rate_final must be in [0, 1)")
        if not 0.0 < self.grad_scale <= 1.0:
            raise ConfigurationError("grad_scale must be in (0, 1]")


def discard_rate(iteration: int, cfg: LooseLossConfig | None = None) -> float:
    cfg = cfg or LooseLossConfig()
    if cfg.warmup_iters <= 0:
        return cfg.discard_rate_final
    return min(iteration / cfg.warmup_iters, 1.0) * cfg.discard_rate_final


class _ScaleGrad(torch.autograd.Function):
    """Identity forward; backward multiplies the incoming gradient by ``factor``."""

    @staticmethod
    def forward(ctx, x, factor):
        ctx.save_for_backward(factor)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        (factor,) = ctx.saved_tensors
        return grad * factor, None


def scale_grad(x: torch.Tensor, factor: torch.Tensor) -> torch.Tensor:
    return _ScaleGrad.apply(x, factor.to(x.dtype))


def cosine_distance(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``1 - cos(a, b)`` along ``dim``; zero-norm inputs give distance 1."""
    dot = (a * b).sum(dim)
    denom = (a.norm(dim=dim) * b.norm(dim=dim)).clamp_min(EPS)
    return 1.0 - (dot / denom).clamp(-1.0, 1.0)


def token_distances(g: torch.Tensor, g_hat: torch.Tensor) -> torch.Tensor:
    """Per-token cosine distance ``(B, N)``."""
    return cosine_distance(g, g_hat, dim=-1)


def global_cosine(g: torch.Tensor, g_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample cosine distance of the fully flattened feature maps ``(B,)``."""
    return cosine_distance(g.flatten(1), g_hat.flatten(1), dim=-1)


def plain_cosine_loss(pairs) -> torch.Tensor:
    if not pairs:
        raise ValueError("no feature pairs")
    return torch.stack([global_cosine(g, gh).mean() for g, gh in pairs]).mean()


def easy_token_mask(dist: torch.Tensor, rate: float) -> torch.Tensor:
    """Boolean mask over ``dist`` marking the ``floor(rate * numel)`` smallest values.

    Ties are broken by flat index through a stable sort.
    """
    flat = dist.reshape(-1)
    count = int(math.floor(rate * flat.numel() + 1e-9))
    mask = torch.zeros_like(flat, dtype=torch.bool)
    if count:
        order = torch.sort(flat, stable=True).indices
        mask[order[:count]] = True
    return mask.view_as(dist)


def loose_loss(pairs, iteration: int, cfg: LooseLossConfig | None = None) -> torch.Tensor:
    """Global cosine loss whose well-reconstructed tokens receive down-scaled gradients.

    Per group, tokens are ranked by their cosine distance across the whole
    batch; the easiest ``discard_rate(iteration)`` fraction passes through a
    gradient scaler of ``cfg.grad_scale``.  The forward value equals
    :func:`plain_cosine_loss`.
    """
    if not pairs:
        raise ValueError("no feature pairs")
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    cfg = cfg or LooseLossConfig()
    rate = discard_rate(iteration, cfg)
    losses = []
    for g, g_hat in pairs:
        g = g.detach()
        with torch.no_grad():
            easy = easy_token_mask(token_distances(g, g_hat), rate)
        factor = torch.where(easy, cfg.grad_scale, 1.0).unsqueeze(-1)
        modulated = scale_grad(g_hat, factor)
        losses.append(global_cosine(g, modulated).mean())
    return torch.stack(losses).mean()
