"""Learning-rate schedule and the StableAdamW optimizer."""

from __future__ import annotations

import math

import torch


def lr_schedule(iteration: int, lr_peak: float = 2e-3, lr_floor: float = 2e-4,
                warmup_iters: int = 100, total_iters: int = 10_000) -> float:
    """Linear warm-up ``0 -> lr_peak``, then cosine annealing to ``lr_floor`` at ``total_iters``."""
    if iteration < warmup_iters:
        return lr_peak * iteration / warmup_iters
    progress = min((iteration - warmup_iters) / max(total_iters - warmup_iters, 1), 1.0)
    return lr_floor + (lr_peak - lr_floor) * (1 + math.cos(math.pi * progress)) / 2


class StableAdamW(torch.optim.Optimizer):
    """AdamW with per-tensor update clipping.

    Moments use bias-corrected decay factors
    ``beta_hat = beta * (1 - beta**(t-1)) / (1 - beta**t)``.  For each tensor
    ``rms = sqrt(mean(g**2 / max(v, eps**2)))`` and the step size becomes
    ``lr / max(1, rms / clip_threshold)``; weight decay is decoupled and uses
    the same clipped step size.
    """

    def __init__(self, params, lr=2e-3, betas=(0.9, 0.999), eps=1e-10, weight_decay=1e-4,
                 clip_threshold=1.0):
        if lr < 0 or eps < 0 or weight_decay < 0:
            raise ValueError("lr, eps and weight_decay must be non-negative")
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                        clip_threshold=clip_threshold)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            eps, wd, clip = group["eps"], group["weight_decay"], group["clip_threshold"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                b1 = beta1 * (1 - beta1 ** (t - 1)) / (1 - beta1 ** t)
                b2 = beta2 * (1 - beta2 ** (t - 1)) / (1 - beta2 ** t)
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                rms = (g.pow(2) / v.clamp_min(eps * eps)).mean().sqrt().item()
                lr = group["lr"] / max(1.0, rms / clip)
                if wd:
                    p.mul_(1 - lr * wd)
                p.addcdiv_(m, v.sqrt().add_(eps), value=-lr)
        return loss
