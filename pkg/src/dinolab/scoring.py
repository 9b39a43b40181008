"""Anomaly maps, image/object scores, modality fusion and map export."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .encoder import FeatureStack, LayerTokens, ShapeError
from .objective import token_distances

AMAP_MAGIC = b"AMAP"
AMAP_HEADER = struct.Struct("<4sIII")


@dataclass
class AnomalyMap:
    token_map: np.ndarray  # (rows, cols), values in [0, 2]
    full_map: np.ndarray  # (H, W)
    image_id: str = ""


@dataclass
class ScoreRecord:
    image_score: float
    category: str = ""
    object_score: float | None = None
    view: str | None = None
    modality: str | None = None
    image_id: str = ""


def token_maps(pairs, grid: tuple[int, int]) -> torch.Tensor:
    """Mean over groups of the per-token cosine distance, shaped ``(B, rows, cols)``."""
    maps = []
    for g, g_hat in pairs:
        if g.shape[-2] != grid[0] * grid[1]:
            raise ShapeError(f"{g.shape[-2]} tokens do not match grid {grid}")
        maps.append(token_distances(g, g_hat))
    m = torch.stack(maps).mean(0)
    return m.reshape(-1, *grid)


def upsample_and_smooth(token_map, size: tuple[int, int], sigma: float = 4.0) -> np.ndarray:
    """Bilinear upsampling of ``(B, rows, cols)`` maps to ``size`` then Gaussian smoothing."""
    t = torch.as_tensor(token_map, dtype=torch.float32)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None]
    up = F.interpolate(t[:, None], size=size, mode="bilinear", align_corners=False)[:, 0].numpy()
    if sigma > 0:
        up = np.stack([gaussian_filter(m, sigma=sigma, mode="reflect", truncate=4.0) for m in up])
    return up[0] if squeeze else up


def anomaly_map(pairs, grid, image_size, sigma: float = 4.0, image_id: str = "") -> AnomalyMap:
    """Anomaly map for one image from ``(g_k, g_hat_k)`` pairs of shape ``(N, d)`` or ``(1, N, d)``."""
    pairs = [(g if g.ndim == 3 else g[None], gh if gh.ndim == 3 else gh[None]) for g, gh in pairs]
    if pairs[0][0].shape[0] != 1:
        raise ShapeError("anomaly_map expects a single image; use token_maps for batches")
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    tm = token_maps(pairs, grid)[0].detach().cpu()
    full = upsample_and_smooth(tm, tuple(image_size), sigma)
    return AnomalyMap(tm.numpy(), full, image_id)


def _topk_budget(z_percent: float, n_pixels: int) -> int:
    z = Fraction(str(z_percent))
    if not 0 < z <= 100:
        raise ValueError(f"z_percent must be in (0, 100], got {z_percent}")
    return max(1, math.ceil(z * n_pixels / 100))


def _topk_mean(values: np.ndarray, k: int) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    top = np.partition(values, values.size - k)[values.size - k:]
    # exact rational mean, correctly rounded once: independent of summation
    # order, and V copies of a map give bit-identical results
    return float(sum(map(Fraction, top.tolist()), Fraction(0)) / k)


def _as_full(m) -> np.ndarray:
    return np.asarray(m.full_map if isinstance(m, AnomalyMap) else m)


def image_score(amap, z_percent: float = 1.0) -> float:
    """Mean of the top ``z_percent`` % pixels of the full-resolution map."""
    full = _as_full(amap)
    return _topk_mean(full, _topk_budget(z_percent, full.size))


def object_score(maps: Sequence, z_percent: float = 1.0) -> float:
    """Top-z% mean over the concatenation of several views' maps.

    The pixel budget is the sum of the per-view budgets, so ``V`` copies of
    one map score exactly like that map alone.
    """
    if not maps:
        raise ValueError("object_score needs at least one map")
    fulls = [_as_full(m) for m in maps]
    k = sum(_topk_budget(z_percent, f.size) for f in fulls)
    return _topk_mean(np.concatenate([f.ravel() for f in fulls]), k)


def fuse_rgb_3d(stack_rgb: FeatureStack, stack_depth: FeatureStack) -> FeatureStack:
    """Element-wise average of two feature stacks from the same encoder."""
    if stack_rgb.grid != stack_depth.grid or stack_rgb.indices != stack_depth.indices:
        raise ShapeError("RGB and depth stacks differ in grid or layer selection")
    layers = {}
    for i in stack_rgb.indices:
        a, b = stack_rgb.layers[i], stack_depth.layers[i]
        if a.patches.shape != b.patches.shape:
            raise ShapeError(f"layer {i}: shapes {tuple(a.patches.shape)} vs {tuple(b.patches.shape)}")
        layers[i] = LayerTokens((a.cls + b.cls) / 2, (a.patches + b.patches) / 2)
    return FeatureStack(layers, stack_rgb.grid, stack_rgb.recentered)


def multimodal_score(scores: Iterable[float]) -> float:
    """Object score for non-aligned modalities: the sum of per-modality image scores."""
    scores = list(scores)
    if not scores:
        raise ValueError("need at least one modality score")
    return math.fsum(scores)


# ---------------------------------------------------------------------------
# export


def write_amap(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError("map must be 2-D")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(AMAP_HEADER.pack(AMAP_MAGIC, h, w, 0))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_amap(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, h, w, _ = AMAP_HEADER.unpack(fh.read(AMAP_HEADER.size))
        if magic != AMAP_MAGIC:
            raise ValueError(f"{path}: not an AMAP file")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float32)


def normalize_for_display(array: np.ndarray) -> np.ndarray:
    """Min-max scale to 8-bit; a constant map becomes all zeros."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def write_visualization(path: str | Path, array: np.ndarray) -> None:
    Image.fromarray(normalize_for_display(array), mode="L").save(path)


def safe_name(image_id: str) -> str:
    return image_id.replace("/", "__").replace("\\", "__")


def write_index(path: str | Path, entries: list[dict]) -> None:
    """Dataset-level index: ``{"version": 1, "maps": {image_id: {...}}}``."""
    doc = {"version": 1, "maps": {e["image_id"]: {k: v for k, v in e.items() if k != "image_id"} for e in entries}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_index(path: str | Path) -> dict[str, dict]:
    doc = json.loads(Path(path).read_text())
    return doc["maps"]
