import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from drstage import preprocess as pp
from drstage.errors import DegenerateImageError, StageError
from drstage.preprocess import AugmentConfig, ImageTensor

from oracles import bilinear_half_pixel


def raw(px):
    return ImageTensor(np.asarray(px, dtype=np.float64), pp.RAW)


def padded(px):
    return ImageTensor(np.asarray(px, dtype=np.float64), pp.PADDED)


def resized(px):
    return ImageTensor(np.asarray(px, dtype=np.float64), pp.RESIZED)


class TestCrop:
    def test_nothing_to_crop(self, rng):
        img = raw(rng.uniform(20, 255, size=(40, 30, 3)))
        out = pp.crop_black_rows(img)
        assert out.pixels.shape == (40, 30, 3)
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_bands_removed(self, rng):
        px = rng.uniform(50, 255, size=(100, 20, 3))
        px[:10] = 0
        px[95:] = rng.uniform(0, 9.9, size=(5, 20, 3))
        out = pp.crop_black_rows(raw(px))
        assert out.height == 85
        np.testing.assert_array_equal(out.pixels, px[10:95])

    def test_interior_dark_rows_kept(self, rng):
        px = rng.uniform(50, 255, size=(30, 8, 3))
        px[10:15] = 0
        assert pp.crop_black_rows(raw(px)).height == 30

    def test_single_bright_pixel_keeps_row(self):
        px = np.zeros((10, 10, 3))
        px[3, 7, 2] = 10.0
        px[6, 0, 0] = 200.0
        out = pp.crop_black_rows(raw(px))
        assert out.height == 4

    def test_all_black(self):
        with pytest.raises(DegenerateImageError):
            pp.crop_black_rows(raw(np.zeros((5, 5, 3))))

    def test_threshold_exposed(self):
        px = np.full((6, 4, 3), 30.0)
        px[0] = 20.0
        assert pp.crop_black_rows(raw(px), black_threshold=25).height == 5
        assert pp.crop_black_rows(raw(px), black_threshold=10).height == 6

    @settings(max_examples=80, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 25), st.integers(1, 6), st.just(3)), elements=st.sampled_from([0.0, 3.0, 9.99, 10.0, 128.0])))
    def test_idempotent_and_never_drops_bright_rows(self, px):
        if px.max() < pp.BLACK_THRESHOLD:
            return
        once = pp.crop_black_rows(raw(px))
        twice = pp.crop_black_rows(once)
        np.testing.assert_array_equal(once.pixels, twice.pixels)
        bright_rows = int((px.max(axis=(1, 2)) >= pp.BLACK_THRESHOLD).sum())
        assert int((once.pixels.max(axis=(1, 2)) >= pp.BLACK_THRESHOLD).sum()) == bright_rows


class TestPad:
    def test_square_unchanged(self, rng):
        px = rng.uniform(0, 255, size=(80, 80, 3))
        out = pp.pad_to_square(ImageTensor(px, pp.CROPPED))
        np.testing.assert_array_equal(out.pixels, px)

    def test_tall_image(self, rng):
        px = rng.integers(1, 256, size=(100, 60, 3)).astype(np.float64)
        out = pp.pad_to_square(ImageTensor(px, pp.CROPPED)).pixels
        assert out.shape == (100, 100, 3)
        assert not out[:, :20].any() and not out[:, 80:].any()
        np.testing.assert_array_equal(out[:, 20:80], px)
        assert out.sum() == px.sum()

    def test_requires_cropped(self, rng):
        with pytest.raises(StageError):
            pp.pad_to_square(raw(rng.uniform(size=(3, 4, 3))))


class TestResize:
    def test_constant(self):
        out = pp.resize_bilinear(padded(np.full((300, 300, 3), 77.25)))
        assert out.pixels.shape == (518, 518, 3)
        assert np.all(out.pixels == 77.25)

    def test_identity(self, rng):
        px = rng.uniform(0, 255, size=(518, 518, 3))
        np.testing.assert_array_equal(pp.resize_bilinear(padded(px)).pixels, px)

    def test_checkerboard_hand_oracle(self):
        board = np.array([[0.0, 255.0], [255.0, 0.0]])
        out = pp.resize_bilinear(padded(np.repeat(board[:, :, None], 3, axis=2)), side=4).pixels[:, :, 0]
        # half-pixel centres map output 0..3 to source -0.25 (clamped), 0.25, 0.75, 1.25 (edge)
        w = [0.0, 0.25, 0.75, 1.0]
        expected = np.array([[(1 - a) * ((1 - b) * 0 + b * 255) + a * ((1 - b) * 255 + b * 0) for b in w] for a in w])
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(out, bilinear_half_pixel(board.tolist(), 4, 4), atol=1e-12)
        assert np.all((out >= 0) & (out <= 255))

    def test_matches_torch_interpolate(self, rng):
        import torch
        import torch.nn.functional as F

        px = rng.uniform(0, 255, size=(37, 37, 3))
        ours = pp.resize_bilinear(padded(px), side=64).pixels
        ref = F.interpolate(torch.from_numpy(px.transpose(2, 0, 1)[None]), size=(64, 64), mode="bilinear", align_corners=False)
        np.testing.assert_allclose(ours, ref[0].numpy().transpose(1, 2, 0), atol=1e-10)


class TestChain:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(5, 120), st.integers(5, 120), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**32 - 1))
    def test_always_518(self, h, w, top, bottom, seed):
        px = np.random.default_rng(seed).uniform(20, 255, size=(h + top + bottom, w, 3))
        px[:top] = 0
        px[px.shape[0] - bottom :] = 0
        out = pp.preprocess(raw(px))
        assert out.pixels.shape == (518, 518, 3)
        assert np.isfinite(out.pixels).all()

    def test_pad_centering_arithmetic(self, rng):
        for _ in range(100):
            h, w = rng.integers(1, 200, size=2)
            px = rng.integers(11, 256, size=(h, w, 3)).astype(np.float64)
            out = pp.pad_to_square(ImageTensor(px, pp.CROPPED)).pixels
            side = max(h, w)
            top, left = (side - h) // 2, (side - w) // 2
            assert out.shape == (side, side, 3)
            np.testing.assert_array_equal(out[top : top + h, left : left + w], px)
            assert out.sum() == px.sum()

    def test_load_image_png(self, tmp_path, rng):
        px = rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8)
        Image.fromarray(px).save(tmp_path / "x.png")
        img = pp.load_image(tmp_path / "x.png")
        assert img.stage == pp.RAW
        np.testing.assert_array_equal(img.pixels, px.astype(np.float64))

    def test_stage_checks(self, rng):
        with pytest.raises(StageError):
            ImageTensor(rng.uniform(size=(3, 4, 3)), pp.RESIZED)
        with pytest.raises(StageError):
            pp.augment(raw(rng.uniform(size=(4, 4, 3))), AugmentConfig(), 0)


class TestAugment:
    def test_identity_config(self, rng):
        img = resized(rng.uniform(0, 255, size=(16, 16, 3)))
        for seed in range(5):
            np.testing.assert_array_equal(pp.augment(img, AugmentConfig.identity(seed), seed).pixels, img.pixels)

    def test_flip_only(self, rng):
        img = resized(rng.uniform(0, 255, size=(16, 16, 3)))
        cfg = AugmentConfig(1.0, 0.0, 0.0, 0.0)
        once = pp.augment(img, cfg, 3)
        np.testing.assert_array_equal(once.pixels, img.pixels[:, ::-1])
        np.testing.assert_array_equal(pp.augment(once, cfg, 4).pixels, img.pixels)

    def test_deterministic(self, rng):
        img = resized(rng.uniform(0, 255, size=(16, 16, 3)))
        cfg = AugmentConfig(seed=11)
        np.testing.assert_array_equal(pp.augment(img, cfg, 5).pixels, pp.augment(img, cfg, 5).pixels)
        assert not np.array_equal(pp.augment(img, cfg, 5).pixels, pp.augment(img, cfg, 6).pixels)

    def test_output_in_range(self, rng):
        img = resized(rng.uniform(0, 255, size=(24, 24, 3)))
        cfg = AugmentConfig(0.5, 0.9, 0.9, 0.5)
        for s in range(20):
            px = pp.augment(img, cfg, s).pixels
            assert px.min() >= 0 and px.max() <= 255

    def test_draws_independent_of_amplitudes(self, rng):
        # changing the hue amplitude must not change the flip decision
        img = resized(rng.uniform(0, 255, size=(8, 8, 3)))
        a = pp.augment(img, AugmentConfig(0.5, 0, 0, 0.0, seed=2), 9).pixels
        b = pp.augment(img, AugmentConfig(0.5, 0, 0, 1e-9, seed=2), 9).pixels
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            AugmentConfig(horizontal_flip_prob=1.5)
        with pytest.raises(ValueError):
            AugmentConfig(contrast_jitter=-0.1)


class TestModelInput:
    def test_black_and_white(self):
        mean, std = np.array(pp.IMAGENET_MEAN), np.array(pp.IMAGENET_STD)
        x0 = pp.to_model_input(resized(np.zeros((4, 4, 3))))
        x1 = pp.to_model_input(resized(np.full((4, 4, 3), 255.0)))
        assert x0.shape == (3, 4, 4) and x0.dtype == np.float32
        for c in range(3):
            np.testing.assert_allclose(x0[c], (0 - mean[c]) / std[c], rtol=1e-6)
            np.testing.assert_allclose(x1[c], (1 - mean[c]) / std[c], rtol=1e-6)

    def test_round_trip(self, rng):
        px = rng.uniform(0, 255, size=(8, 8, 3))
        back = pp.from_model_input(pp.to_model_input(resized(px))).pixels
        np.testing.assert_allclose(back / 255.0, px / 255.0, atol=1e-6)


class TestCache:
    def _image(self, tmp_path, rng):
        px = rng.integers(20, 256, size=(30, 40, 3), dtype=np.uint8)
        px[:4] = 0
        path = tmp_path / "f.png"
        Image.fromarray(px).save(path)
        return path

    def test_env_root_and_hit(self, tmp_path, rng, monkeypatch):
        path = self._image(tmp_path, rng)
        monkeypatch.setenv("DRSTAGE_CACHE", str(tmp_path / "cache"))
        first = pp.PreprocessCache(side=32).get("s1", path)
        files = list((tmp_path / "cache").rglob("*.npy"))
        assert len(files) == 1
        again = pp.PreprocessCache(side=32).get("s1", path)
        np.testing.assert_array_equal(first.pixels, again.pixels)
        direct = pp.preprocess(pp.load_image(path), side=32)
        np.testing.assert_allclose(first.pixels, direct.pixels, atol=1e-4)

    def test_chain_change_invalidates(self, tmp_path, rng):
        path = self._image(tmp_path, rng)
        pp.PreprocessCache(tmp_path / "c", side=32).get("s1", path)
        pp.PreprocessCache(tmp_path / "c", side=48).get("s1", path)
        assert len({p.parent for p in (tmp_path / "c").rglob("*.npy")}) == 2

    def test_memory_only_without_root(self, tmp_path, rng):
        path = self._image(tmp_path, rng)
        cache = pp.PreprocessCache(side=16)
        assert cache.root is None
        assert cache.get("s", path).pixels.shape == (16, 16, 3)


def test_hue_shift_against_colorsys(rng):
    from drstage import kernels

    px = rng.uniform(0, 255, size=(6, 7, 3))
    out = kernels.hue_shift(px, 0.1)
    for i in range(6):
        for j in range(7):
            h, s, v = colorsys.rgb_to_hsv(*(px[i, j] / 255.0))
            ref = np.array(colorsys.hsv_to_rgb((h + 0.1) % 1.0, s, v)) * 255.0
            np.testing.assert_allclose(out[i, j], ref, atol=1e-9)
