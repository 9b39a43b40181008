"""Training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, config_from_dict
from .data import (
    FewShotSpec,
    PreprocessSpec,
    SampleRecord,
    augment_batch,
    batch_sampler,
    default_data_root,
    few_shot_subset,
    pair_modalities,
    preprocess,
    scan_dataset,
    to_tensor_batch,
)
from .encoder import ConfigurationError, FeatureStack, parameter_checksum
from .model import AnomalyModel
from .objective import LooseLossConfig, discard_rate, loose_loss, plain_cosine_loss
from .optim import StableAdamW, lr_schedule

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


def preprocess_spec(cfg: RunConfig) -> PreprocessSpec:
    return PreprocessSpec(cfg.image_size, cfg.encoder.mean, cfg.encoder.std)


def load_records(cfg: RunConfig) -> list[SampleRecord]:
    root = cfg.data.root or default_data_root()
    if root is None:
        raise ConfigurationError("data.root unset and $DINOLAB_DATA not defined")
    records = scan_dataset(root, cfg.data.layout)
    if cfg.data.categories:
        keep = set(cfg.data.categories)
        records = [r for r in records if r.category in keep]
    return records


def training_items(cfg: RunConfig, records: Sequence[SampleRecord]) -> list:
    """Training units: single records, or ``(rgb, depth)`` pairs when fusing."""
    train = [r for r in records if r.split == "train"]
    if cfg.data.few_shot:
        spec = FewShotSpec(cfg.data.few_shot, cfg.data.few_shot_seed, tuple(cfg.data.augmentations),
                           cfg.data.rotate_degrees, cfg.data.translate_fraction)
        train = [r for r in few_shot_subset(train, spec) if r.split == "train"]
    if cfg.data.fusion == "rgb_depth":
        return pair_modalities(train)
    return train


def _key(item) -> tuple:
    return tuple(r.image_id for r in item) if isinstance(item, tuple) else (item.image_id,)


class ImageLoader:
    def __init__(self, spec: PreprocessSpec, workers: int = 0):
        self.spec = spec
        self.pool = ThreadPoolExecutor(workers) if workers > 0 else None

    def __call__(self, records: Sequence[SampleRecord]) -> torch.Tensor:
        paths = [r.image_path for r in records]
        fn = lambda p: preprocess(p, self.spec)
        arrays = list(self.pool.map(fn, paths)) if self.pool else [fn(p) for p in paths]
        return to_tensor_batch(arrays)


def encode_items(model: AnomalyModel, items, loader: ImageLoader, device, generator=None,
                 aug: dict | None = None) -> FeatureStack:
    """Feature stacks for a list of items; augmentation flags are honoured when a generator is given."""
    fused = isinstance(items[0], tuple)
    rgb = [it[0] if fused else it for it in items]
    images = loader(rgb).to(device)
    depth = loader([it[1] for it in items]).to(device) if fused else None
    flags = [r.augment for r in rgb]
    if generator is not None and any(flags):
        aug = aug or {}
        state = generator.get_state()
        images = augment_batch(images, flags, generator, **aug)
        if depth is not None:
            generator.set_state(state)  # identical geometry for the aligned depth map
            depth = augment_batch(depth, flags, generator, **aug)
    return model.encode(images, depth)


@dataclass
class TrainResult:
    model: AnomalyModel
    checkpoint: Path | None
    log: list[dict] = field(default_factory=list)
    skipped_steps: int = 0
    encoder_checksum: tuple[str, str] = ("", "")


def _iteration_seed(seed: int, iteration: int) -> int:
    return (seed * 1_000_003 + iteration) % (2**62)


def save_checkpoint(path: Path, model: AnomalyModel, cfg: RunConfig, iteration: int,
                    optimizer: StableAdamW | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "version": CHECKPOINT_VERSION,
        "trainable": model.trainable_modules().state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": cfg.to_dict(),
        "config_digest": cfg.model_digest(),
        "encoder_weight_id": cfg.encoder.weight_id,
        "iteration": iteration,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def load_model(path: str | Path, cfg: RunConfig | None = None, backbone=None) -> tuple[AnomalyModel, dict]:
    """Rebuild the model from a checkpoint.

    If ``cfg`` is given its model-shaping sections must match the checkpoint;
    otherwise the configuration stored in the checkpoint is used.
    """
    blob = read_checkpoint(path)
    if cfg is None:
        cfg = config_from_dict(blob["config"])
    else:
        if cfg.encoder.weight_id != blob["encoder_weight_id"]:
            raise CheckpointMismatch(
                f"checkpoint was trained on encoder {blob['encoder_weight_id']!r}, config asks for {cfg.encoder.weight_id!r}")
        if cfg.model_digest() != blob["config_digest"]:
            raise CheckpointMismatch(
                "model configuration differs from the checkpoint (encoder/bottleneck/decoder/scheme); "
                "drop the config or restore the original model sections")
    model = AnomalyModel(cfg, backbone=backbone)
    model.trainable_modules().load_state_dict(blob["trainable"])
    model.to(cfg.train.device)
    model.eval()
    return model, blob


class Trainer:
    def __init__(self, cfg: RunConfig, records: Sequence[SampleRecord] | None = None, backbone=None):
        self.cfg = cfg
        torch.manual_seed(cfg.train.seed)
        self.model = AnomalyModel(cfg, backbone=backbone).to(cfg.train.device)
        self.records = list(records) if records is not None else load_records(cfg)
        self.items = training_items(cfg, self.records)
        self.loader = ImageLoader(preprocess_spec(cfg), cfg.data.workers)
        t = cfg.train
        self.optimizer = StableAdamW(self.model.trainable_parameters(), lr=t.lr_peak, betas=t.betas,
                                     eps=t.eps, weight_decay=t.weight_decay, clip_threshold=t.clip_threshold)
        o = cfg.objective
        self.loss_cfg = LooseLossConfig(o.discard_rate_final, o.warmup_iters, o.grad_scale)
        self._cache: tuple[dict, FeatureStack] | None = None

    # feature cache ---------------------------------------------------
    def _augmenting(self) -> bool:
        return any((it[0] if isinstance(it, tuple) else it).augment for it in self.items)

    def _build_cache(self):
        unique = {}
        for it in self.items:
            unique.setdefault(_key(it), it)
        keys = list(unique)
        stacks = []
        bs = self.cfg.train.batch_size
        for i in range(0, len(keys), bs):
            stacks.append(encode_items(self.model, [unique[k] for k in keys[i:i + bs]], self.loader,
                                       self.cfg.train.device))
        self._cache = ({k: j for j, k in enumerate(keys)}, FeatureStack.cat(stacks))
        log.info("cached encoder features for %d training items", len(keys))

    def features(self, batch, iteration: int) -> FeatureStack:
        if self._cache is not None:
            index, stack = self._cache
            rows = torch.tensor([index[_key(it)] for it in batch], device=stack.layers[stack.indices[0]].cls.device)
            return stack.select(rows)
        g = torch.Generator().manual_seed(_iteration_seed(self.cfg.train.seed + 7, iteration))
        d = self.cfg.data
        return encode_items(self.model, batch, self.loader, self.cfg.train.device, g,
                            dict(rotate_degrees=d.rotate_degrees, translate_fraction=d.translate_fraction))

    # main loop -------------------------------------------------------
    def run(self, resume: str | Path | None = None, stop_at: int | None = None,
            checkpoint_path: str | Path | None = None) -> TrainResult:
        cfg, t = self.cfg, self.cfg.train
        total = cfg.total_iters
        out_dir = Path(t.out_dir)
        ckpt_path = Path(checkpoint_path) if checkpoint_path else out_dir / "checkpoint.pt"
        start = 0
        if resume is not None:
            blob = read_checkpoint(resume)
            if blob["config_digest"] != cfg.model_digest():
                raise CheckpointMismatch("cannot resume: model configuration changed")
            self.model.trainable_modules().load_state_dict(blob["trainable"])
            if blob["optimizer"] is not None:
                self.optimizer.load_state_dict(blob["optimizer"])
            start = blob["iteration"]
        end = total if stop_at is None else min(stop_at, total)

        if t.cache_features and not self._augmenting() and self._cache is None:
            self._build_cache()
        enc_before = parameter_checksum(self.model.encoder)

        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a")
        history, bad_streak, skipped = [], 0, 0
        t0 = time.time()
        self.model.train()
        sampler = batch_sampler(self.items, t.batch_size, t.seed, end, start=start)
        params = self.model.trainable_parameters()
        try:
            for it, batch in zip(range(start, end), sampler):
                lr = lr_schedule(it, t.lr_peak, t.lr_floor, t.warmup_iters, total)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                stack = self.features(batch, it)
                with torch.autocast(device_type=torch.device(t.device).type, enabled=t.mixed_precision):
                    pairs = self.model.pairs(stack, training=True, seed=_iteration_seed(t.seed, it))
                pairs = [(g.float(), gh.float()) for g, gh in pairs]
                if cfg.objective.loss == "loose":
                    loss = loose_loss(pairs, it, self.loss_cfg)
                else:
                    loss = plain_cosine_loss(pairs)
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                finite = torch.isfinite(loss) and all(p.grad is None or torch.isfinite(p.grad).all() for p in params)
                if finite:
                    self.optimizer.step()
                    bad_streak = 0
                else:
                    skipped += 1
                    bad_streak += 1
                    log.warning("non-finite loss/gradient at iteration %d; step skipped", it)
                    if bad_streak > t.max_bad_steps:
                        raise TrainingAborted(
                            f"{bad_streak} consecutive non-finite steps at iteration {it} (lr={lr:.3g}, loss={loss.item()})")
                rec = {
                    "iter": it,
                    "loss": float(loss.item()),
                    "lr": lr,
                    "discard_rate": discard_rate(it, self.loss_cfg) if cfg.objective.loss == "loose" else 0.0,
                    "wall_time": time.time() - t0,
                }
                history.append(rec)
                if t.log_every and (it % t.log_every == 0 or it == end - 1):
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if t.checkpoint_every and (it + 1) % t.checkpoint_every == 0 and it + 1 < end:
                    save_checkpoint(ckpt_path, self.model, cfg, it + 1, self.optimizer)
        finally:
            log_file.close()
        self.model.eval()
        enc_after = parameter_checksum(self.model.encoder)
        if enc_before != enc_after:
            raise RuntimeError("encoder parameters changed during training")
        saved = save_checkpoint(ckpt_path, self.model, cfg, end, self.optimizer)
        return TrainResult(self.model, saved, history, skipped, (enc_before, enc_after))


def train(cfg: RunConfig, records=None, backbone=None, **kwargs) -> TrainResult:
    return Trainer(cfg, records, backbone).run(**kwargs)


def windowed_decrease_fraction(losses: Sequence[float], window: int = 20) -> float:
    """Fraction of consecutive ``window``-iteration blocks whose mean loss fell."""
    arr = np.asarray(losses, dtype=np.float64)
    n = arr.size // window
    means = arr[: n * window].reshape(n, window).mean(1)
    if n < 2:
        return float("nan")
    return float(np.mean(np.diff(means) < 0))
