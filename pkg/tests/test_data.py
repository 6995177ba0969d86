import numpy as np
import pytest

from mcseg.data import (
    Batch,
    Dataset,
    LabelMask,
    SynthConfig,
    Volume,
    apply_flip_rot,
    augment,
    generate_synthetic,
    invert_flip_rot,
    load_dataset,
    load_volume,
    sample_batch,
    sample_flip_rot,
    save_dataset,
    save_volume,
    split_labeled,
)
from mcseg.errors import (
    DtypeMismatchError,
    InvalidConfigError,
    MalformedHeaderError,
    TruncatedPayloadError,
)


def small_ds(n=10, seed=0, noise=0.3):
    return generate_synthetic(SynthConfig(num_cases=n, extents=(16, 16), noise_sigma=noise, seed=seed))


class TestGenerateSynthetic:
    def test_deterministic(self):
        cfg = SynthConfig(num_cases=5, extents=(32, 32), noise_sigma=0.4, seed=7)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        for (va, ma), (vb, mb) in zip(a.cases, b.cases):
            np.testing.assert_array_equal(va.data, vb.data)
            np.testing.assert_array_equal(ma.data, mb.data)

    def test_noiseless_threshold_recovers_mask(self):
        ds = generate_synthetic(SynthConfig(num_cases=4, extents=(32, 32), noise_sigma=0.0, seed=3))
        for vol, mask in ds.cases:
            levels = np.unique(vol.data)
            assert levels.size == 2
            midpoint = levels.mean()
            np.testing.assert_array_equal(vol.data > midpoint, mask.data == 1)

    def test_cardinality_and_unique_ids(self):
        ds = generate_synthetic(SynthConfig(num_cases=100, extents=(16, 16), seed=1))
        assert len(ds) == 100
        assert len({v.id for v, _ in ds.cases}) == 100
        assert all(m is not None for _, m in ds.cases)

    def test_normalized_intensities(self):
        for vol, _ in small_ds(3).cases:
            assert abs(float(vol.data.mean())) < 1e-5
            assert float(vol.data.std()) == pytest.approx(1.0, abs=1e-4)

    def test_ellipse_masks_simply_connected(self):
        from scipy import ndimage

        ds = generate_synthetic(SynthConfig(num_cases=20, extents=(32, 32), seed=5))
        for _, mask in ds.cases:
            fg = mask.data == 1
            assert fg.any()
            _, n_fg = ndimage.label(fg)
            assert n_fg == 1
            _, n_bg = ndimage.label(~fg)
            assert n_bg == 1  # no holes

    def test_3d_generation(self):
        ds = generate_synthetic(SynthConfig(num_cases=2, extents=(16, 16, 16), seed=2))
        assert ds.cases[0][0].data.shape == (16, 16, 16)

    def test_bad_config(self):
        with pytest.raises(InvalidConfigError):
            SynthConfig(extents=(8, 8))
        with pytest.raises(InvalidConfigError):
            SynthConfig(noise_sigma=-1)
        with pytest.raises(InvalidConfigError):
            SynthConfig(shape_family="cube")


class TestSplit:
    def test_paper_style_counts(self):
        ds = small_ds(80)
        split = split_labeled(ds, 0.2, seed=0)
        assert len(split.labeled_ids) == 16
        assert len(split.unlabeled_ids) == 64

    def test_full_fraction(self):
        split = split_labeled(small_ds(10), 1.0, seed=0)
        assert len(split.labeled_ids) == 10 and not split.unlabeled_ids

    def test_deterministic_and_seed_sensitive(self):
        ds = small_ds(40)
        a = split_labeled(ds, 0.25, seed=3)
        b = split_labeled(ds, 0.25, seed=3)
        assert a.labeled_ids == b.labeled_ids
        others = [split_labeled(ds, 0.25, seed=s).labeled_ids for s in range(10)]
        assert any(ids != a.labeled_ids for ids in others)

    def test_unlabeled_masks_dropped(self):
        split = split_labeled(small_ds(10), 0.3, seed=1)
        for vol, mask in split.cases:
            if vol.id in split.unlabeled_ids:
                assert mask is None
            else:
                assert mask is not None

    def test_empty_labeled_rejected(self):
        with pytest.raises(InvalidConfigError):
            split_labeled(small_ds(10), 0.01, seed=0)


class TestSampleBatch:
    def test_default_composition(self):
        split = split_labeled(small_ds(10), 0.5, seed=0)
        batch = sample_batch(split, (16, 16), np.random.default_rng(0))
        assert batch.images.shape == (4, 1, 16, 16)
        np.testing.assert_array_equal(batch.labeled_flags, [True, True, False, False])
        assert batch.masks.shape == (2, 16, 16)

    def test_fully_labeled_pool_fills_unlabeled_slots(self):
        ds = small_ds(6)  # everything labeled
        batch = sample_batch(ds, (16, 16), np.random.default_rng(1))
        assert batch.images.shape[0] == 4
        assert batch.masks.shape[0] == 2  # masks only for the labeled slots

    def test_identity_crop(self):
        ds = small_ds(4)
        batch = sample_batch(ds, (16, 16), np.random.default_rng(2), n_labeled=1, n_unlabeled=0)
        vol, mask = ds.case(batch.case_ids[0])
        np.testing.assert_array_equal(batch.images[0, 0], vol.data)
        np.testing.assert_array_equal(batch.masks[0], mask.data)

    def test_random_crop_and_mask_alignment(self):
        ds = generate_synthetic(SynthConfig(num_cases=3, extents=(32, 32), noise_sigma=0.0, seed=4))
        batch = sample_batch(ds, (16, 16), np.random.default_rng(3))
        for i in range(2):
            img = batch.images[i, 0]
            levels = np.unique(img)
            if levels.size == 2:
                np.testing.assert_array_equal(img > levels.mean(), batch.masks[i] == 1)

    def test_pad_when_patch_exceeds_volume(self):
        ds = small_ds(2)
        batch = sample_batch(ds, (24, 24), np.random.default_rng(0))
        assert batch.images.shape[2:] == (24, 24)


class TestAugment:
    def test_rot180_involution(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8))
        once = apply_flip_rot(img, (False, False), 2)
        twice = apply_flip_rot(once, (False, False), 2)
        np.testing.assert_array_equal(twice, img)

    def test_mask_optional(self):
        img, mask = augment(np.zeros((8, 8)), None, np.random.default_rng(0))
        assert mask is None and img.shape == (8, 8)

    def test_deterministic(self):
        img = np.arange(64.0).reshape(8, 8)
        a, _ = augment(img, None, np.random.default_rng(42))
        b, _ = augment(img, None, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_joint_transform_keeps_alignment(self):
        rng = np.random.default_rng(1)
        img = rng.random((8, 8))
        mask = (img > 0.5).astype(np.uint8)
        for _ in range(10):
            ai, am = augment(img, mask, rng)
            np.testing.assert_array_equal(ai > 0.5, am == 1)

    def test_inverse_restores_bit_exact(self):
        rng = np.random.default_rng(2)
        img = rng.random((4, 8, 8))
        for _ in range(16):
            flips, rot = sample_flip_rot(img.ndim, rng)
            fwd = apply_flip_rot(img, flips, rot)
            back = invert_flip_rot(fwd, flips, rot)
            np.testing.assert_array_equal(back, img)

    def test_group_closure(self):
        # composing two sampled transforms is still a flip/rot90 transform:
        # check it permutes the multiset of values and preserves shape
        rng = np.random.default_rng(3)
        img = np.arange(16.0).reshape(4, 4)
        f1, r1 = sample_flip_rot(2, rng)
        f2, r2 = sample_flip_rot(2, rng)
        out = apply_flip_rot(apply_flip_rot(img, f1, r1), f2, r2)
        assert out.shape == img.shape
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))


class TestVolumeIO:
    def test_round_trip_volume(self, tmp_path):
        vol = Volume(np.random.default_rng(0).random((5, 7)).astype(np.float32), (1.0, 2.0), "v1")
        save_volume(tmp_path / "v1.json", vol)
        back = load_volume(tmp_path / "v1.json")
        assert isinstance(back, Volume)
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.spacing == vol.spacing and back.id == "v1"

    def test_round_trip_mask(self, tmp_path):
        mask = LabelMask(np.array([[0, 1], [2, 3]], dtype=np.uint8), (1.0, 1.0), "m1")
        save_volume(tmp_path / "m1", mask)
        back = load_volume(tmp_path / "m1.json")
        assert isinstance(back, LabelMask)
        np.testing.assert_array_equal(back.data, mask.data)

    def test_truncated_payload(self, tmp_path):
        vol = Volume(np.zeros((4, 4), dtype=np.float32), (1.0, 1.0), "v")
        save_volume(tmp_path / "v.json", vol)
        raw = (tmp_path / "v.raw").read_bytes()
        (tmp_path / "v.raw").write_bytes(raw[:-4])
        with pytest.raises(TruncatedPayloadError):
            load_volume(tmp_path / "v.json")

    def test_malformed_header(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(MalformedHeaderError):
            load_volume(tmp_path / "bad.json")
        (tmp_path / "missing.json").write_text('{"id": "x"}', encoding="utf-8")
        with pytest.raises(MalformedHeaderError):
            load_volume(tmp_path / "missing.json")

    def test_dtype_mismatch(self, tmp_path):
        vol = Volume(np.zeros((2, 2), dtype=np.float32), (1.0, 1.0), "v")
        path = save_volume(tmp_path / "v.json", vol)
        header = path.read_text().replace('"f32"', '"f64"')
        path.write_text(header, encoding="utf-8")
        with pytest.raises(DtypeMismatchError):
            load_volume(path)

    def test_dataset_round_trip(self, tmp_path):
        split = split_labeled(small_ds(6), 0.5, seed=0)
        save_dataset(split, tmp_path)
        back = load_dataset(tmp_path, normalize=False)
        assert back.labeled_ids == split.labeled_ids
        assert back.unlabeled_ids == split.unlabeled_ids
        for (va, ma), (vb, mb) in zip(split.cases, back.cases):
            np.testing.assert_array_equal(va.data, vb.data)
            assert (ma is None) == (mb is None)


class TestDatasetInvariants:
    def test_duplicate_ids_rejected(self):
        vol = Volume(np.zeros((16, 16), np.float32), (1.0, 1.0), "dup")
        mask = LabelMask(np.zeros((16, 16), np.uint8), (1.0, 1.0), "dup")
        with pytest.raises(Exception):
            Dataset(cases=[(vol, mask), (vol, mask)], labeled_ids=["dup"], unlabeled_ids=[])

    def test_labeled_case_needs_mask(self):
        vol = Volume(np.zeros((16, 16), np.float32), (1.0, 1.0), "a")
        with pytest.raises(Exception):
            Dataset(cases=[(vol, None)], labeled_ids=["a"], unlabeled_ids=[])
