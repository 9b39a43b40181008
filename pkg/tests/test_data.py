import csv
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dinolab.data import (
    DataError,
    FewShotSpec,
    IngestionError,
    PreprocessSpec,
    SampleRecord,
    augment_batch,
    batch_sampler,
    few_shot_subset,
    group_views,
    load_mask,
    pair_modalities,
    preprocess,
    scan_dataset,
)
from dinolab.encoder import ConfigurationError


def _png(path, arr, mode=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)


def _mvtec(root, classes=("a", "b"), n_train=3, with_mask=True):
    rgb = np.zeros((8, 8, 3), np.uint8)
    for c in classes:
        for i in range(n_train):
            _png(root / c / "train" / "good" / f"{i:03d}.png", rgb)
        _png(root / c / "test" / "good" / "000.png", rgb)
        _png(root / c / "test" / "crack" / "000.png", rgb)
        if with_mask:
            _png(root / c / "ground_truth" / "crack" / "000_mask.png", np.full((8, 8), 255, np.uint8))
    return root


def _rec(i, cat="a", split="train", label=0, **kw):
    return SampleRecord(f"{cat}/{i}.png", cat, split, label, **kw)


class TestScan:
    def test_mvtec_layout(self, tmp_path):
        recs = scan_dataset(_mvtec(tmp_path))
        train = [r for r in recs if r.split == "train"]
        assert len(train) == 6 and all(r.label == 0 for r in train)
        good = [r for r in recs if r.image_id == "a/test/good/000"][0]
        assert good.label == 0 and good.mask_path is None
        crack = [r for r in recs if r.image_id == "a/test/crack/000"][0]
        assert crack.label == 1 and crack.mask_path.endswith("000_mask.png")

    def test_missing_mask_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            recs = scan_dataset(_mvtec(tmp_path, with_mask=False))
        assert "no ground-truth mask" in caplog.text
        assert [r for r in recs if r.label == 1][0].mask_path is None

    def test_empty_train_errors(self, tmp_path):
        (tmp_path / "a" / "train" / "good").mkdir(parents=True)
        with pytest.raises(DataError):
            scan_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DataError):
            scan_dataset(tmp_path / "nope")

    def test_unknown_layout(self, tmp_path):
        with pytest.raises(ConfigurationError):
            scan_dataset(tmp_path, "coco")

    def test_flat_csv(self, tmp_path):
        for name in ("t0.png", "v0.png", "v1.png"):
            _png(tmp_path / name, np.zeros((4, 4, 3), np.uint8))
        rows = [
            ["image_path", "category", "split", "label", "mask_path", "view", "modality", "object_id"],
            ["t0.png", "c", "train", "0", "", "", "", ""],
            ["v0.png", "c", "test", "1", "", "front", "rgb", "obj1"],
            ["v1.png", "c", "test", "0", "", "", "ir", "obj1"],
        ]
        with open(tmp_path / "index.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        recs = scan_dataset(tmp_path, "flat_csv")
        assert [r.modality for r in recs] == ["rgb", "rgb", "ir"]
        assert recs[1].view == "front" and recs[1].object_id == "obj1"
        assert recs[0].object_id is None

    def test_train_anomaly_rejected(self):
        with pytest.raises(DataError):
            _rec(0, label=1)


class TestPreprocess:
    def test_resize(self, tmp_path):
        _png(tmp_path / "x.png", np.zeros((700, 700, 3), np.uint8))
        assert preprocess(tmp_path / "x.png", PreprocessSpec(392)).shape == (392, 392, 3)

    def test_constant_image(self):
        img = Image.fromarray(np.full((10, 12, 3), 51, np.uint8))
        spec = PreprocessSpec(14, (0.1, 0.2, 0.3), (0.5, 0.25, 2.0))
        out = preprocess(img, spec)
        expect = (0.2 - np.array(spec.mean)) / np.array(spec.std)
        assert np.allclose(out, expect.astype(np.float32), atol=1e-6)

    def test_grayscale_replicated(self):
        rng = np.random.default_rng(0)
        img = Image.fromarray(rng.integers(0, 255, (20, 20), dtype=np.uint8))
        out = preprocess(img, PreprocessSpec(14, (0.0,) * 3, (1.0,) * 3))
        assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])

    def test_16bit_depth(self):
        img = Image.fromarray(np.full((6, 6), 65535, np.uint16))
        out = preprocess(img, PreprocessSpec(14, (0.0,) * 3, (1.0,) * 3))
        assert np.allclose(out, 1.0)

    def test_undecodable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"garbage")
        with pytest.raises(IngestionError, match="bad.png"):
            preprocess(bad, PreprocessSpec(14))

    def test_load_mask(self, tmp_path):
        m = np.zeros((10, 10), np.uint8)
        m[:5] = 255
        _png(tmp_path / "m.png", m)
        out = load_mask(tmp_path / "m.png", 20)
        assert out.dtype == bool and out.shape == (20, 20) and out[:10].all() and not out[10:].any()
        assert not load_mask(None, 4).any()


class TestFewShot:
    def _pool(self, per_class=10, classes=15):
        return [_rec(i, f"c{k}") for k in range(classes) for i in range(per_class)]

    def test_counts(self):
        out = few_shot_subset(self._pool(), FewShotSpec(4))
        assert len(out) == 60
        assert all(r.augment for r in out)

    def test_deterministic(self):
        a = few_shot_subset(self._pool(), FewShotSpec(4, seed=9))
        b = few_shot_subset(self._pool(), FewShotSpec(4, seed=9))
        assert [r.image_id for r in a] == [r.image_id for r in b]

    def test_full_k_identity(self):
        pool = self._pool(per_class=5, classes=2)
        out = few_shot_subset(pool, FewShotSpec(5))
        assert sorted(r.image_id for r in out) == sorted(r.image_id for r in pool)

    def test_short_class(self):
        pool = self._pool(per_class=3, classes=2) + [_rec(0, "tiny")]
        with pytest.raises(DataError, match="tiny"):
            few_shot_subset(pool, FewShotSpec(2))

    def test_test_records_pass_through(self):
        pool = self._pool(per_class=5, classes=1) + [_rec(99, "c0", "test", 1)]
        out = few_shot_subset(pool, FewShotSpec(2))
        assert sum(r.split == "test" for r in out) == 1

    def test_bad_spec(self):
        with pytest.raises(ConfigurationError):
            FewShotSpec(0)
        with pytest.raises(ConfigurationError):
            FewShotSpec(2, augmentations=("shear",))


class TestAugment:
    def test_no_flags_identity(self):
        x = torch.randn(2, 3, 14, 14)
        assert augment_batch(x, [(), ()], torch.Generator().manual_seed(0)) is x

    def test_hflip_only(self):
        x = torch.randn(1, 3, 8, 8)
        out = augment_batch(x, [("hflip",)], torch.Generator().manual_seed(0), flip_prob=1.0)
        assert torch.allclose(out, x.flip(-1), atol=1e-5)

    def test_seeded(self):
        x = torch.randn(2, 3, 14, 14)
        flags = [("rotate", "translate")] * 2
        a = augment_batch(x, flags, torch.Generator().manual_seed(5))
        b = augment_batch(x, flags, torch.Generator().manual_seed(5))
        assert torch.equal(a, b) and not torch.allclose(a, x)

    def test_label_and_category_preserved(self):
        rec = few_shot_subset([_rec(i) for i in range(3)], FewShotSpec(2))[0]
        assert rec.label == 0 and rec.category == "a"


class TestGrouping:
    def test_five_views_normal(self):
        groups = group_views([_rec(v, split="test", object_id="o", view=str(v)) for v in range(5)])
        assert len(groups) == 1 and groups[0].label == 0 and len(groups[0].members) == 5

    def test_max_label(self):
        recs = [_rec(v, split="test", object_id="o") for v in range(4)] + [_rec(9, split="test", label=1, object_id="o")]
        assert group_views(recs)[0].label == 1

    def test_rgb_ir_pair(self):
        recs = [_rec(0, split="test", object_id="o", modality="rgb"), _rec(1, split="test", object_id="o", modality="ir")]
        g = group_views(recs)
        assert len(g) == 1 and g[0].modalities == {"rgb", "ir"}

    def test_mixed_categories(self):
        with pytest.raises(DataError):
            group_views([_rec(0, "a", object_id="o"), _rec(1, "b", object_id="o")])

    def test_singletons_without_object_id(self):
        assert len(group_views([_rec(0), _rec(1)])) == 2

    def test_pair_modalities(self):
        recs = [_rec(0, object_id="o", modality="depth"), _rec(1, object_id="o", modality="rgb")]
        (rgb, depth), = pair_modalities(recs)
        assert rgb.modality == "rgb" and depth.modality == "depth"
        with pytest.raises(DataError):
            pair_modalities([_rec(0, object_id="p")])


class TestSampler:
    def test_count_and_size(self):
        batches = list(batch_sampler([_rec(i) for i in range(37)], 16, 0, 100))
        assert len(batches) == 100 and all(len(b) == 16 for b in batches)

    def test_seeded(self):
        items = [_rec(i) for i in range(20)]
        ids = lambda s: [[r.image_id for r in b] for b in batch_sampler(items, 4, s, 30)]
        assert ids(1) == ids(1) and ids(1) != ids(2)

    def test_epoch_covers_all(self):
        items = [_rec(i) for i in range(12)]
        first = [r.image_id for b in batch_sampler(items, 4, 0, 3) for r in b]
        assert sorted(first) == sorted(r.image_id for r in items)

    def test_start_offset(self):
        items = [_rec(i) for i in range(10)]
        full = list(batch_sampler(items, 3, 4, 12))
        assert list(batch_sampler(items, 3, 4, 12, start=5)) == full[5:]

    def test_single_class(self):
        assert all(r.category == "a" for b in batch_sampler([_rec(i) for i in range(5)], 4, 0, 5) for r in b)

    def test_empty(self):
        with pytest.raises(DataError):
            list(batch_sampler([], 4, 0, 1))

    def test_anomaly_rejected(self):
        with pytest.raises(DataError):
            list(batch_sampler([_rec(0), _rec(1, split="test", label=1)], 2, 0, 1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 40))
    def test_properties(self, n, bs, iters):
        items = [_rec(i) for i in range(n)]
        batches = list(batch_sampler(items, bs, 0, iters))
        assert len(batches) == iters
        assert all(len(b) == bs and all(r.label == 0 for r in b) for b in batches)
