import struct

import numpy as np
import pytest

from bnnkit import data
from bnnkit.errors import ConfigError, FormatError


def rand_img(rng, h=32, w=32):
    return rng.random((3, h, w), dtype=np.float32)


class TestPrimitives:
    def test_hflip_involution(self):
        img = rand_img(np.random.default_rng(0))
        assert np.array_equal(data.hflip(data.hflip(img)), img)

    def test_hflip_moves_columns(self):
        img = np.zeros((3, 4, 4), dtype=np.float32)
        img[:, :, 0] = 1.0
        assert data.hflip(img)[0, 0, -1] == 1.0

    def test_jitter_zero_strengths_identity(self):
        img = rand_img(np.random.default_rng(1))
        out = data.color_jitter(img, 1.0, 1.0, 1.0, 0.0)
        assert np.allclose(out, img, atol=1e-5)

    def test_jitter_brightness_scales(self):
        img = rand_img(np.random.default_rng(2)) * 0.4
        out = data.color_jitter(img, 1.5, 1.0, 1.0, 0.0)
        assert np.allclose(out, img * 1.5, atol=1e-5)

    def test_jitter_saturation_zero_is_gray(self):
        img = rand_img(np.random.default_rng(3))
        out = data.color_jitter(img, 1.0, 1.0, 0.0, 0.0)
        assert np.allclose(out[0], out[1], atol=1e-5)
        assert np.allclose(out[1], out[2], atol=1e-5)

    def test_jitter_output_clipped(self):
        img = rand_img(np.random.default_rng(4))
        out = data.color_jitter(img, 1.9, 1.9, 1.9, 0.1)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_hue_full_turn_identity(self):
        img = rand_img(np.random.default_rng(5))
        out = data.color_jitter(img, 1.0, 1.0, 1.0, 1.0)
        ref = data.color_jitter(img, 1.0, 1.0, 1.0, 0.0)
        assert np.allclose(out, ref, atol=1e-4)

    def test_blur_tiny_sigma_identity(self):
        img = rand_img(np.random.default_rng(6))
        out = data.gaussian_blur(img, 0.1)
        assert np.max(np.abs(out - img)) <= 0.02 * max(1.0, img.max())

    def test_blur_preserves_constant(self):
        img = np.full((3, 8, 8), 0.7, dtype=np.float32)
        out = data.gaussian_blur(img, 2.0)
        assert np.allclose(out, img, atol=1e-6)

    def test_blur_smooths_impulse(self):
        img = np.zeros((3, 9, 9), dtype=np.float32)
        img[:, 4, 4] = 1.0
        out = data.gaussian_blur(img, 2.0)
        assert out[0, 4, 4] < 1.0
        assert out[0, 3, 4] > 0.0
        assert np.allclose(out.sum(axis=(1, 2)), 1.0, atol=1e-5)

    def test_crop_identity_config(self):
        img = rand_img(np.random.default_rng(7))
        cfg = data.AugConfig.identity()
        out = data.random_resized_crop(img, cfg, np.random.default_rng(0))
        assert np.allclose(out, img, atol=1e-5)

    def test_crop_shape_preserved(self):
        img = rand_img(np.random.default_rng(8))
        cfg = data.AugConfig.lite()
        out = data.random_resized_crop(img, cfg, np.random.default_rng(1))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6

    def test_crop_upsamples_small_box(self):
        # a 2x2 crop blown up to 4x4 keeps values inside the box's range
        img = np.zeros((3, 8, 8), dtype=np.float32)
        img[:, 0:2, 0:2] = 1.0
        p = data._params_from_rows([(0, 0, 2, 2, False, False,
                                     1.0, 1.0, 1.0, 0.0, False, False, 1.0)])
        out = data.apply_params_batch(img[None], p, out_hw=4)[0]
        assert np.allclose(out, 1.0)


class TestAugConfig:
    def test_variants(self):
        lite, van = data.AugConfig.lite(), data.AugConfig.vanilla()
        assert lite.jitter_p == 0.6 and lite.blur_p == 0.2
        assert van.jitter_p == 0.8 and van.blur_p == 0.5
        assert lite.crop_scale == van.crop_scale
        assert lite.brightness == van.brightness

    def test_named(self):
        assert data.AugConfig.named("lite").variant == "lite"
        assert data.AugConfig.named("vanilla").variant == "vanilla"
        with pytest.raises(ConfigError):
            data.AugConfig.named("heavy")

    def test_bad_probability(self):
        with pytest.raises(ConfigError):
            data.AugConfig(blur_p=1.5)

    def test_blur_rate_matches_p(self):
        cfg = data.AugConfig.vanilla()
        rng = np.random.default_rng(123)
        rows = [data.sample_params(cfg, rng, 32, 32) for _ in range(10_000)]
        rate = np.mean([r[11] for r in rows])
        assert abs(rate - cfg.blur_p) < 0.02

    def test_jitter_rate_matches_p(self):
        cfg = data.AugConfig.lite()
        rng = np.random.default_rng(321)
        rows = [data.sample_params(cfg, rng, 32, 32) for _ in range(10_000)]
        rate = np.mean([r[5] for r in rows])
        assert abs(rate - cfg.jitter_p) < 0.02


class TestTwoViews:
    def test_views_differ_and_are_valid(self):
        img = rand_img(np.random.default_rng(9))
        v1, v2 = data.two_views(img, data.AugConfig.vanilla(), np.random.default_rng(5))
        assert v1.shape == img.shape and v2.shape == img.shape
        assert not np.allclose(v1, v2)
        for v in (v1, v2):
            assert np.isfinite(v).all()
            assert v.min() >= 0.0 and v.max() <= 1.0

    def test_same_rng_seed_reproduces(self):
        img = rand_img(np.random.default_rng(10))
        cfg = data.AugConfig.lite()
        a = data.two_views(img, cfg, np.random.default_rng(7))
        b = data.two_views(img, cfg, np.random.default_rng(7))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_identity_config_passthrough(self):
        img = rand_img(np.random.default_rng(11))
        v1, v2 = data.two_views(img, data.AugConfig.identity(), np.random.default_rng(0))
        assert np.allclose(v1, img, atol=1e-5)
        assert np.allclose(v2, img, atol=1e-5)


class TestSynthetic:
    def test_deterministic(self):
        a = data.make_synthetic(64, seed=3)
        b = data.make_synthetic(64, seed=3)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a = data.make_synthetic(64, seed=3)
        b = data.make_synthetic(64, seed=4)
        assert not np.allclose(a.images, b.images)

    def test_shapes_and_range(self):
        h = data.make_synthetic(50, n_classes=5, seed=0, hw=16)
        assert h.images.shape == (50, 3, 16, 16)
        assert h.labels.shape == (50,)
        assert h.images.dtype == np.float32
        assert h.images.min() >= 0.0 and h.images.max() <= 1.0
        assert set(np.unique(h.labels)) <= set(range(5))

    def test_classes_are_distinguishable(self):
        # nearest-centroid on raw pixels beats chance by a wide margin,
        # so the labels really are recoverable from the images
        h = data.make_synthetic(800, seed=1)
        flat = h.images.reshape(800, -1)
        cents = np.stack([flat[h.labels == c].mean(axis=0) for c in range(10)])
        d = ((flat[:, None] - cents[None]) ** 2).sum(axis=2)
        acc = (d.argmin(axis=1) == h.labels).mean()
        assert acc > 0.5


class TestHandle:
    def test_mean_std_computed(self):
        h = data.make_synthetic(100, seed=0)
        assert h.mean.shape == (3,) and h.std.shape == (3,)
        ref = h.images.mean(axis=(0, 2, 3))
        assert np.allclose(h.mean, ref, atol=1e-6)
        z = h.normalize(h.images)
        assert abs(z.mean()) < 1e-3

    def test_subset_deterministic(self):
        h = data.make_synthetic(100, seed=0)
        s1, s2 = h.subset(20, seed=5), h.subset(20, seed=5)
        assert np.array_equal(s1.images, s2.images)
        assert s1.n == 20
        # subset keeps the parent's normalization stats
        assert np.array_equal(s1.mean, h.mean)

    def test_labeled_batches(self):
        h = data.make_synthetic(70, seed=0)
        xs, ys = [], []
        for x, y in h.labeled_batches(32):
            xs.append(x)
            ys.append(y)
        assert sum(x.shape[0] for x in xs) == 70
        assert np.array_equal(np.concatenate(ys), h.labels)

    def test_labeled_batches_requires_labels(self):
        h = data.make_synthetic(10, seed=0)
        h = data.DatasetHandle(h.images, None, "synthetic")
        with pytest.raises(ConfigError):
            next(h.labeled_batches(4))


class TestPretrainStream:
    def test_stream_holds_no_labels(self):
        h = data.make_synthetic(40, seed=0)
        s = h.pretrain_stream(data.AugConfig.lite(), seed=1, batch_size=16)
        assert not hasattr(s, "labels")
        for attr in vars(s).values():
            if isinstance(attr, np.ndarray):
                assert attr.dtype != np.int64 or attr.shape != (40,)

    def test_epoch_shapes(self):
        h = data.make_synthetic(40, seed=0)
        s = h.pretrain_stream(data.AugConfig.lite(), seed=1, batch_size=16)
        sizes = []
        for x1, x2 in s.epoch(0):
            assert x1.shape == x2.shape
            assert x1.shape[1:] == (3, 32, 32)
            sizes.append(x1.shape[0])
        assert sizes == [16, 16, 8]
        assert s.batches_per_epoch() == 3

    def test_epoch_deterministic(self):
        h = data.make_synthetic(30, seed=0)
        s = h.pretrain_stream(data.AugConfig.vanilla(), seed=9, batch_size=10)
        a = [pair for pair in s.epoch(2)]
        b = [pair for pair in s.epoch(2)]
        for (a1, a2), (b1, b2) in zip(a, b):
            assert np.array_equal(a1, b1)
            assert np.array_equal(a2, b2)

    def test_epochs_differ(self):
        h = data.make_synthetic(30, seed=0)
        s = h.pretrain_stream(data.AugConfig.lite(), seed=9, batch_size=30)
        (a1, _), = list(s.epoch(0))
        (b1, _), = list(s.epoch(1))
        assert not np.array_equal(a1, b1)

    def test_views_independent_of_batch_size(self):
        # same (seed, epoch, index, view) draw regardless of batching
        h = data.make_synthetic(24, seed=0)
        big = h.pretrain_stream(data.AugConfig.lite(), seed=4, batch_size=24)
        small = h.pretrain_stream(data.AugConfig.lite(), seed=4, batch_size=8)
        big_x1 = np.concatenate([x1 for x1, _ in big.epoch(1)])
        small_x1 = np.concatenate([x1 for x1, _ in small.epoch(1)])
        assert np.allclose(big_x1, small_x1, atol=1e-6)

    def test_single_view_matches_pair_first(self):
        h = data.make_synthetic(20, seed=0)
        s = h.pretrain_stream(data.AugConfig.lite(), seed=4, batch_size=20)
        (x1, _), = list(s.epoch(0))
        (only,) = list(s.epoch_single_view(0))
        assert np.array_equal(x1, only)

    def test_output_normalized(self):
        h = data.make_synthetic(512, seed=0)
        s = h.pretrain_stream(data.AugConfig.identity(), seed=0, batch_size=512)
        (x1, _), = list(s.epoch(0))
        assert abs(float(x1.mean())) < 0.05


class TestIdxFormat:
    def test_roundtrip_with_labels(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, (12, 8, 8), dtype=np.uint8)
        labs = rng.integers(0, 10, 12, dtype=np.uint8)
        ip = tmp_path / "train-images-idx3-ubyte"
        lp = tmp_path / "train-labels-idx1-ubyte"
        data.write_idx_images(str(ip), imgs)
        data.write_idx_labels(str(lp), labs)
        h = data.load_idx(str(ip))
        assert h.images.shape == (12, 3, 8, 8)
        assert np.array_equal(h.labels, labs.astype(np.int64))
        assert np.allclose(h.images[:, 0], imgs.astype(np.float32) / 255.0)
        # grayscale replicated across channels
        assert np.array_equal(h.images[:, 0], h.images[:, 2])

    def test_load_from_directory(self, tmp_path):
        imgs = np.zeros((3, 4, 4), dtype=np.uint8)
        data.write_idx_images(str(tmp_path / "t10k-images-idx3-ubyte"), imgs)
        data.write_idx_labels(str(tmp_path / "t10k-labels-idx1-ubyte"), [1, 2, 3])
        h = data.load_dataset(str(tmp_path), "idx")
        assert h.n == 3 and h.has_labels

    def test_images_only(self, tmp_path):
        imgs = np.zeros((2, 4, 4), dtype=np.uint8)
        p = tmp_path / "imgs.idx"
        data.write_idx_images(str(p), imgs)
        h = data.load_idx(str(p))
        assert not h.has_labels

    def test_bad_magic_offset(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"\x01\x00\x08\x03" + b"\x00" * 16)
        with pytest.raises(FormatError) as ei:
            data.read_idx(str(p))
        assert ei.value.offset == 0

    def test_bad_dtype_offset(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"\x00\x00\x0d\x03" + b"\x00" * 16)
        with pytest.raises(FormatError) as ei:
            data.read_idx(str(p))
        assert ei.value.offset == 2

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short"
        head = struct.pack(">I3I", data.IDX_MAGIC_IMAGES, 2, 4, 4)
        p.write_bytes(head + b"\x00" * 10)  # needs 32
        with pytest.raises(FormatError) as ei:
            data.read_idx(str(p))
        assert ei.value.offset == len(head) + 10
        assert "payload" in str(ei.value)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "long"
        head = struct.pack(">I1I", data.IDX_MAGIC_LABELS, 2)
        p.write_bytes(head + b"\x00\x01\xff")
        with pytest.raises(FormatError) as ei:
            data.read_idx(str(p))
        assert ei.value.offset == len(head) + 2

    def test_label_count_mismatch(self, tmp_path):
        data.write_idx_images(str(tmp_path / "x-images"), np.zeros((2, 4, 4), np.uint8))
        data.write_idx_labels(str(tmp_path / "x-labels"), [1, 2, 3])
        with pytest.raises(FormatError):
            data.load_idx(str(tmp_path / "x-images"))


class TestCifarFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        imgs = rng.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8)
        labs = np.array([0, 3, 9, 1, 2], dtype=np.uint8)
        p = tmp_path / "batch_1.bin"
        data.write_cifar_bin(str(p), imgs, labs)
        h = data.load_cifar_bin(str(p))
        assert h.images.shape == (5, 3, 32, 32)
        assert np.array_equal(h.labels, labs.astype(np.int64))
        assert np.allclose(h.images, imgs.astype(np.float32) / 255.0)

    def test_directory_concatenates(self, tmp_path):
        imgs = np.zeros((2, 3, 32, 32), dtype=np.uint8)
        data.write_cifar_bin(str(tmp_path / "a.bin"), imgs, [1, 2])
        data.write_cifar_bin(str(tmp_path / "b.bin"), imgs, [3, 4])
        h = data.load_dataset(str(tmp_path), "cifar")
        assert h.n == 4
        assert np.array_equal(h.labels, [1, 2, 3, 4])

    def test_bad_size_offset(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * (data.CIFAR_RECORD + 100))
        with pytest.raises(FormatError) as ei:
            data.load_cifar_bin(str(p))
        assert ei.value.offset == data.CIFAR_RECORD

    def test_bad_label_offset(self, tmp_path):
        rec = bytearray(data.CIFAR_RECORD * 2)
        rec[data.CIFAR_RECORD] = 77
        p = tmp_path / "bad.bin"
        p.write_bytes(bytes(rec))
        with pytest.raises(FormatError) as ei:
            data.load_cifar_bin(str(p))
        assert ei.value.offset == data.CIFAR_RECORD


class TestDispatch:
    def test_synth_spec(self):
        h = data.load_dataset("n=64,seed=2,hw=16", "synth")
        assert h.n == 64 and h.images.shape[2] == 16

    def test_synth_default(self):
        h = data.load_dataset("", "synth")
        assert h.n == 1000

    def test_synth_bad_key(self):
        with pytest.raises(ConfigError):
            data.load_dataset("bogus=1", "synth")

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            data.load_dataset("x", "tar")
