"""Dataset ingestion, preprocessing, few-shot subsetting and batch sampling."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .encoder import IMAGENET_MEAN, IMAGENET_STD, ConfigurationError

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MODALITIES = ("rgb", "depth", "ir")
AUGMENTATIONS = ("hflip", "vflip", "rotate", "translate")
CSV_COLUMNS = ("image_path", "category", "split", "label", "mask_path", "view", "modality", "object_id")


class DataError(ValueError):
    pass


class IngestionError(DataError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    category: str
    split: str
    label: int
    mask_path: str | None = None
    view: str | None = None
    modality: str = "rgb"
    object_id: str | None = None
    image_id: str = ""
    augment: tuple[str, ...] = ()

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"{self.image_path}: split must be train/test, got {self.split!r}")
        if self.label not in (0, 1):
            raise DataError(f"{self.image_path}: label must be 0 or 1")
        if self.split == "train" and self.label != 0:
            raise DataError(f"{self.image_path}: anomalous sample in the training split")
        if self.modality not in MODALITIES:
            raise DataError(f"{self.image_path}: unknown modality {self.modality!r}")
        if not self.image_id:
            object.__setattr__(self, "image_id", self.image_path)


@dataclass
class PreprocessSpec:
    image_size: int = 392
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    interpolation: str = "bilinear"


@dataclass
class FewShotSpec:
    shots_per_class: int
    seed: int = 0
    augmentations: tuple[str, ...] = AUGMENTATIONS
    rotate_degrees: float = 15.0
    translate_fraction: float = 0.1
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.shots_per_class < 1:
            raise ConfigurationError("shots_per_class must be >= 1")
        bad = set(self.augmentations) - set(AUGMENTATIONS)
        if bad:
            raise ConfigurationError(f"unknown augmentations {sorted(bad)}")


# ---------------------------------------------------------------------------
# scanning


def _images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    for name in (f"{stem}_mask", stem):
        for ext in (".png", ".bmp", ".jpg", ".tif", ".tiff"):
            p = gt_dir / f"{name}{ext}"
            if p.is_file():
                return p
    return None


def _scan_mvtec(root: Path) -> list[SampleRecord]:
    records = []
    for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cat = cls_dir.name
        train = _images(cls_dir / "train" / "good")
        if not train:
            raise DataError(f"category {cat!r} has an empty train/good split")
        for p in train:
            records.append(SampleRecord(str(p), cat, "train", 0, image_id=f"{cat}/train/good/{p.stem}"))
        test_dir = cls_dir / "test"
        for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []:
            defect = defect_dir.name
            for p in _images(defect_dir):
                image_id = f"{cat}/test/{defect}/{p.stem}"
                if defect == "good":
                    records.append(SampleRecord(str(p), cat, "test", 0, image_id=image_id))
                    continue
                mask = _find_mask(cls_dir / "ground_truth" / defect, p.stem)
                if mask is None:
                    log.warning("no ground-truth mask for anomalous image %s", p)
                records.append(SampleRecord(str(p), cat, "test", 1, str(mask) if mask else None, image_id=image_id))
    return records


def _none_if_blank(v):
    v = (v or "").strip()
    return v or None


def _scan_flat_csv(root: Path) -> list[SampleRecord]:
    index = root / "index.csv" if root.is_dir() else root
    base = index.parent
    records = []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS[:4]) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{index}: missing columns {sorted(missing)}")
        for row in reader:
            path = base / row["image_path"]
            mask = _none_if_blank(row.get("mask_path"))
            label = int(row["label"])
            if label == 1 and mask is None:
                log.warning("no ground-truth mask for anomalous image %s", path)
            records.append(SampleRecord(
                image_path=str(path),
                category=row["category"],
                split=row["split"],
                label=label,
                mask_path=str(base / mask) if mask else None,
                view=_none_if_blank(row.get("view")),
                modality=_none_if_blank(row.get("modality")) or "rgb",
                object_id=_none_if_blank(row.get("object_id")),
                image_id=row["image_path"],
            ))
    for cat in sorted({r.category for r in records}):
        if not any(r.category == cat and r.split == "train" for r in records):
            raise DataError(f"category {cat!r} has no training images")
    return records


def scan_dataset(root: str | Path, layout: str = "mvtec") -> list[SampleRecord]:
    """Enumerate a dataset as :class:`SampleRecord` s.

    ``mvtec``: ``<class>/train/good``, ``<class>/test/<defect>``,
    ``<class>/ground_truth/<defect>/<stem>_mask.png``.
    ``flat_csv``: ``index.csv`` with columns ``image_path, category, split,
    label, mask_path, view, modality, object_id`` (paths relative to the file).
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    if layout == "mvtec":
        return _scan_mvtec(root)
    if layout == "flat_csv":
        return _scan_flat_csv(root)
    raise ConfigurationError(f"unknown dataset layout {layout!r}")


def default_data_root() -> str | None:
    return os.environ.get("DINOLAB_DATA")


# ---------------------------------------------------------------------------
# preprocessing

_RESAMPLE = {"bilinear": Image.BILINEAR, "bicubic": Image.BICUBIC, "nearest": Image.NEAREST}


def _to_unit_float(img: Image.Image) -> np.ndarray:
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.float32) / 65535.0
    if img.mode == "I":
        a = np.asarray(img, dtype=np.float32)
        return a / 65535.0 if a.max() > 255 else a / 255.0
    if img.mode == "F":
        return np.asarray(img, dtype=np.float32)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def preprocess(image: str | Path | Image.Image, spec: PreprocessSpec) -> np.ndarray:
    """Decode, square-resize, replicate single channels to 3, normalise -> ``(H, W, 3)`` float32."""
    if not isinstance(image, Image.Image):
        try:
            with Image.open(image) as im:
                im.load()
                image = im.copy()
        except Exception as exc:
            raise IngestionError(f"cannot decode image {image}: {exc}") from exc
    size = (spec.image_size, spec.image_size)
    arr = _to_unit_float(image)
    if arr.ndim == 2:
        resized = np.asarray(Image.fromarray(arr, mode="F").resize(size, _RESAMPLE[spec.interpolation]))
        arr = np.repeat(resized[..., None], 3, axis=2)
    else:
        arr = arr[..., :3]
        chans = [np.asarray(Image.fromarray(np.ascontiguousarray(arr[..., c]), mode="F").resize(size, _RESAMPLE[spec.interpolation]))
                 for c in range(3)]
        arr = np.stack(chans, axis=2)
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    return ((arr - mean) / std).astype(np.float32)


def load_mask(path: str | Path | None, size: tuple[int, int] | int) -> np.ndarray:
    """Binary ground-truth mask resized (nearest) to ``size``; ``None`` -> all normal."""
    if isinstance(size, int):
        size = (size, size)
    if path is None:
        return np.zeros(size, dtype=bool)
    with Image.open(path) as im:
        m = im.convert("L").resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(m) > 0


def to_tensor_batch(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays).transpose(0, 3, 1, 2).copy())


# ---------------------------------------------------------------------------
# few-shot + augmentation


def few_shot_subset(records: Sequence[SampleRecord], spec: FewShotSpec) -> list[SampleRecord]:
    """Seeded choice of ``K`` training records per class; test records pass through."""
    by_cat: dict[str, list[SampleRecord]] = defaultdict(list)
    for r in records:
        if r.split == "train":
            by_cat[r.category].append(r)
    short = sorted(c for c, rs in by_cat.items() if len(rs) < spec.shots_per_class)
    if short:
        raise DataError(f"fewer than {spec.shots_per_class} training images in: {', '.join(short)}")
    rng = np.random.default_rng(spec.seed)
    chosen = []
    for cat in sorted(by_cat):
        rs = sorted(by_cat[cat], key=lambda r: r.image_id)
        idx = np.sort(rng.choice(len(rs), size=spec.shots_per_class, replace=False))
        chosen.extend(replace(rs[i], augment=tuple(spec.augmentations)) for i in idx)
    return chosen + [r for r in records if r.split != "train"]


def augment_batch(images: torch.Tensor, flags: Sequence[Sequence[str]], generator: torch.Generator,
                  rotate_degrees: float = 15.0, translate_fraction: float = 0.1,
                  flip_prob: float = 0.5) -> torch.Tensor:
    """Random flips, rotation and translation applied per image according to its flags."""
    if not any(flags):
        return images
    B = images.shape[0]
    u = torch.rand(B, 5, generator=generator)
    theta = torch.zeros(B, 2, 3)
    for b in range(B):
        f = set(flags[b])
        sx = -1.0 if "hflip" in f and u[b, 0] < flip_prob else 1.0
        sy = -1.0 if "vflip" in f and u[b, 1] < flip_prob else 1.0
        ang = math.radians((2 * u[b, 2].item() - 1) * rotate_degrees) if "rotate" in f else 0.0
        tx, ty = ((2 * u[b, 3:5] - 1) * 2 * translate_fraction).tolist() if "translate" in f else (0.0, 0.0)
        c, s = math.cos(ang), math.sin(ang)
        theta[b] = torch.tensor([[c * sx, -s * sy, tx], [s * sx, c * sy, ty]])
    grid = F.affine_grid(theta.to(images), list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


# ---------------------------------------------------------------------------
# grouping + sampling


@dataclass
class ObjectGroup:
    object_id: str
    category: str
    members: list[SampleRecord] = field(default_factory=list)

    @property
    def label(self) -> int:
        return max(m.label for m in self.members)

    @property
    def modalities(self) -> set[str]:
        return {m.modality for m in self.members}


def group_views(records: Sequence[SampleRecord]) -> list[ObjectGroup]:
    """Group records by ``object_id``; records without one form singleton groups."""
    groups: dict[str, ObjectGroup] = {}
    for r in records:
        key = r.object_id or r.image_id
        g = groups.get(key)
        if g is None:
            g = groups[key] = ObjectGroup(key, r.category)
        elif g.category != r.category:
            raise DataError(f"object {key!r} mixes categories {g.category!r} and {r.category!r}")
        g.members.append(r)
    return list(groups.values())


def pair_modalities(records: Sequence[SampleRecord]) -> list[tuple[SampleRecord, SampleRecord]]:
    """(rgb, depth) pairs sharing an ``object_id``, for aligned feature fusion."""
    pairs = []
    for g in group_views(records):
        by_mod = {m.modality: m for m in g.members}
        if "rgb" not in by_mod or "depth" not in by_mod:
            raise DataError(f"object {g.object_id!r} lacks an rgb/depth pair")
        pairs.append((by_mod["rgb"], by_mod["depth"]))
    return pairs


def batch_sampler(items: Sequence, batch_size: int, seed: int, iterations: int,
                  start: int = 0) -> Iterator[list]:
    """Deterministic stream of ``iterations`` batches over the pooled training items.

    Items are shuffled once per epoch from ``seed``; batches run across epoch
    boundaries so every batch is full.  ``start`` skips the first batches,
    which makes resumed runs see the same sequence.
    """
    if not items:
        raise DataError("cannot sample from an empty training set")
    for it in items:
        recs = it if isinstance(it, tuple) else (it,)
        if any(getattr(r, "label", 0) for r in recs):
            raise DataError(f"anomalous sample in training set: {recs[0].image_path}")
    n = len(items)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pos = 0
    for i in range(iterations):
        batch_idx = []
        while len(batch_idx) < batch_size:
            if pos == n:
                perm = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(batch_idx), n - pos)
            batch_idx.extend(perm[pos:pos + take].tolist())
            pos += take
        if i >= start:
            yield [items[j] for j in batch_idx]
