"""Inference: anomaly maps, image and object scores, map export and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import SampleRecord, group_views, load_mask, pair_modalities
from .metrics import EvalReport, assemble, evaluate
from .model import AnomalyModel
from .scoring import (
    image_score,
    multimodal_score,
    object_score,
    read_amap,
    read_index,
    safe_name,
    token_maps,
    upsample_and_smooth,
    write_amap,
    write_index,
    write_visualization,
)
from .train import ImageLoader, encode_items, preprocess_spec

log = logging.getLogger(__name__)


@dataclass
class Prediction:
    image_id: str
    category: str
    label: int
    score: float
    full_map: np.ndarray | None = None
    token_map: np.ndarray | None = None
    object_id: str | None = None
    object_score: float | None = None
    view: str | None = None
    modality: str = "rgb"
    mask_path: str | None = None
    extra: dict = field(default_factory=dict)

    def entry(self) -> dict:
        """Index entry without the arrays."""
        d = {
            "image_id": self.image_id,
            "category": self.category,
            "label": self.label,
            "score": self.score,
            "object_id": self.object_id,
            "object_score": self.object_score,
            "view": self.view,
            "modality": self.modality,
        }
        d.update(self.extra)
        return d


def _units(cfg: RunConfig, records: Sequence[SampleRecord]) -> list[list]:
    """Test units grouped by object; each unit is a record or an ``(rgb, depth)`` pair."""
    test = [r for r in records if r.split == "test"]
    if cfg.data.fusion == "rgb_depth":
        return [[p] for p in pair_modalities(test)]
    return [g.members for g in group_views(test)]


def _object_score(preds: list[Prediction], maps: list[np.ndarray], z: float) -> float:
    by_mod: dict[str, list[np.ndarray]] = {}
    for p, m in zip(preds, maps):
        by_mod.setdefault(p.modality, []).append(m)
    if len(by_mod) == 1:
        return object_score(maps, z)
    # non-aligned modalities: score each on its own, then add
    return multimodal_score(object_score(ms, z) for _, ms in sorted(by_mod.items()))


@torch.no_grad()
def iter_predictions(model: AnomalyModel, records: Sequence[SampleRecord], cfg: RunConfig,
                     batch_size: int | None = None) -> Iterator[Prediction]:
    """Stream predictions for the test split, object by object.

    Views of one object are scored together, so peak memory is bounded by
    one batch plus the maps of a single object.
    """
    model.eval()
    loader = ImageLoader(preprocess_spec(cfg), cfg.data.workers)
    bs = batch_size or cfg.train.batch_size
    size = (cfg.image_size, cfg.image_size)
    z = cfg.z_percent
    units = _units(cfg, records)
    flat = [(gi, u) for gi, members in enumerate(units) for u in members]
    pending: dict[int, list[tuple[Prediction, np.ndarray]]] = {}
    for start in range(0, len(flat), bs):
        chunk = flat[start:start + bs]
        items = [u for _, u in chunk]
        stack = encode_items(model, items, loader, cfg.train.device)
        tmaps = token_maps(model.pairs(stack), stack.grid).float().cpu()
        fulls = upsample_and_smooth(tmaps, size, cfg.scoring.sigma)
        for (gi, unit), tm, full in zip(chunk, tmaps.numpy(), fulls):
            rec = unit[0] if isinstance(unit, tuple) else unit
            pred = Prediction(rec.image_id, rec.category, rec.label, image_score(full, z), full, tm,
                              rec.object_id, None, rec.view, rec.modality, rec.mask_path)
            pending.setdefault(gi, []).append((pred, full))
            if len(pending[gi]) == len(units[gi]):
                done = pending.pop(gi)
                preds = [p for p, _ in done]
                if preds[0].object_id is not None:
                    o = _object_score(preds, [m for _, m in done], z)
                    for p in preds:
                        p.object_score = o
                yield from preds


def predict(model: AnomalyModel, records: Sequence[SampleRecord], cfg: RunConfig,
            keep_maps: bool = True, batch_size: int | None = None) -> list[Prediction]:
    out = []
    for p in iter_predictions(model, records, cfg, batch_size):
        if not keep_maps:
            p.full_map = p.token_map = None
        out.append(p)
    return out


def export_maps(predictions: Sequence[Prediction] | Iterator[Prediction], out_dir: str | Path,
                png: bool = False) -> Path:
    """Write one AMAP file per image (plus optional PNG) and ``index.json``.

    Returns the index path.
    """
    out_dir = Path(out_dir)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    if png:
        (out_dir / "png").mkdir(exist_ok=True)
    entries = []
    for p in predictions:
        if p.full_map is None:
            raise ValueError(f"{p.image_id}: prediction carries no map")
        name = safe_name(p.image_id)
        rel = f"maps/{name}.amap"
        write_amap(out_dir / rel, p.full_map)
        entry = p.entry()
        entry["map"] = rel
        entry["mask_path"] = p.mask_path
        if png:
            write_visualization(out_dir / "png" / f"{name}.png", p.full_map)
            entry["png"] = f"png/{name}.png"
        entries.append(entry)
    index = out_dir / "index.json"
    write_index(index, entries)
    return index


def evaluation_items(predictions: Sequence[Prediction]):
    """:class:`EvalItem` s straight from in-memory predictions."""
    preds = {p.image_id: {"score": p.score, "object_id": p.object_id, "object_score": p.object_score,
                          "_map": p.full_map} for p in predictions}
    truth = {p.image_id: {"category": p.category, "label": p.label, "mask_path": p.mask_path}
             for p in predictions}
    return assemble(preds, truth, load_map=lambda e: e["_map"], load_mask=_mask_loader)


def _mask_loader(gt: dict, shape: tuple) -> np.ndarray | None:
    if not gt.get("mask_path"):
        return None
    return load_mask(gt["mask_path"], shape) > 0


def evaluate_predictions(predictions: Sequence[Prediction], cfg: RunConfig,
                         unified: bool = False) -> EvalReport:
    return evaluate(evaluation_items(predictions), "unified" if unified else "per_category",
                    cfg.scoring.fpr_limit)


def index_items(index_path: str | Path, records: Sequence[SampleRecord],
                map_reader: Callable[[Path], np.ndarray] = read_amap):
    """:class:`EvalItem` s for exported maps joined with the scanned ground truth."""
    index_path = Path(index_path)
    entries = read_index(index_path)
    truth = {r.image_id: {"category": r.category, "label": r.label, "mask_path": r.mask_path}
             for r in records if r.split == "test"}
    load = lambda e: map_reader(index_path.parent / e["map"]) if e.get("map") else None
    return assemble(entries, truth, load_map=load, load_mask=_mask_loader)


def evaluate_index(index_path: str | Path, records: Sequence[SampleRecord], cfg: RunConfig,
                   unified: bool = False) -> EvalReport:
    """Evaluate exported maps against the scanned ground truth."""
    return evaluate(index_items(index_path, records), "unified" if unified else "per_category",
                    cfg.scoring.fpr_limit)
