import numpy as np
import pytest

from deblurpair import datagen, imgproc
from deblurpair.datagen import BurstSequence, ImageTriple, SynthParams


def constant_frames(value, n, shape=(8, 8, 3)):
    return [np.full(shape, value) for _ in range(n)]


def params_for(f_scale, sigma_r=0.05, seed=0, n=4, shot_threshold=0.5):
    return SynthParams(
        f_scale=f_scale, sigma_r=sigma_r, n_frames_averaged=n,
        rng_seed=seed, shot_threshold=shot_threshold,
    )


class TestSynthBlurry:
    def test_identical_frames_no_noise(self, rng):
        frame = np.random.default_rng(1).uniform(size=(8, 8, 3))
        out = datagen.synth_blurry([frame] * 5, sigma_r=0.0, rng=rng)
        np.testing.assert_allclose(out, frame, rtol=0, atol=1e-15)

    def test_mean_of_two(self, rng):
        frames = [np.zeros((6, 6, 3)), np.ones((6, 6, 3))]
        out = datagen.synth_blurry(frames, sigma_r=0.0, rng=rng)
        np.testing.assert_allclose(out, 0.5)

    def test_noise_std_scales_with_n(self, rng):
        # readout std after averaging N frames is sigma_r / sqrt(N)
        frames = constant_frames(0.5, 10, shape=(16, 16, 3))
        draws = np.stack(
            [datagen.synth_blurry(frames, sigma_r=0.1, rng=rng) for _ in range(2000)]
        )
        measured = draws.std(axis=0).mean()
        assert measured == pytest.approx(0.1 / np.sqrt(10), rel=0.05)

    def test_empty_list_rejected(self, rng):
        with pytest.raises(ValueError):
            datagen.synth_blurry([], sigma_r=0.0, rng=rng)


class TestSynthNoisy:
    def test_zero_image_poisson_regime(self, rng):
        out = datagen.synth_noisy(np.zeros((8, 8, 3)), params_for(0.4), rng)
        np.testing.assert_array_equal(out, 0.0)

    def test_poisson_statistics_quantized_image(self):
        # 8-bit-quantized image: many unique intensities, clamping negligible
        rng = np.random.default_rng(5)
        sharp = rng.integers(20, 200, size=(12, 12, 3)) / 255.0
        params = params_for(0.4)
        scaled = imgproc.scale_exposure(sharp, 0.4)
        sigma_s = datagen.count_unique_intensities(scaled)
        assert sigma_s > 50
        draws = np.stack([datagen.synth_noisy(sharp, params, rng) for _ in range(4000)])
        np.testing.assert_allclose(draws.mean(axis=0), scaled, rtol=0, atol=4 / np.sqrt(sigma_s * 4000))
        rel_var_err = np.abs(draws.var(axis=0) - scaled / sigma_s) / (scaled / sigma_s)
        assert rel_var_err.mean() < 0.05

    def test_gaussian_regime_std(self):
        rng = np.random.default_rng(6)
        sharp = np.full((16, 16, 3), 0.5)
        params = params_for(0.7, sigma_r=0.08)
        draws = np.stack([datagen.synth_noisy(sharp, params, rng) for _ in range(3000)])
        assert draws.std(axis=0).mean() == pytest.approx(0.08, rel=0.05)
        assert draws.mean() == pytest.approx(0.35, abs=0.002)

    def test_regimes_selected_by_threshold(self):
        sharp = np.full((8, 8, 3), 0.5)
        # Poisson regime: constant image has one unique intensity, so the
        # output is quantized to multiples of 1/sigma_s = 1
        out_p = datagen.synth_noisy(sharp, params_for(0.4), np.random.default_rng(0))
        assert set(np.unique(out_p)) <= {0.0, 1.0}
        out_g = datagen.synth_noisy(sharp, params_for(0.6, sigma_r=0.05), np.random.default_rng(0))
        assert np.unique(out_g).size > 2

    def test_output_clamped(self):
        rng = np.random.default_rng(7)
        sharp = np.random.default_rng(8).uniform(size=(8, 8, 3))
        for f_scale in (0.35, 0.75):
            out = datagen.synth_noisy(sharp, params_for(f_scale, sigma_r=0.3), rng)
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestMakeTriple:
    def test_four_frames_blur_is_mean_of_last_two(self):
        frames = [np.full((6, 6, 3), v) for v in (0.1, 0.9, 0.2, 0.6)]
        seq = BurstSequence(frames=frames, scene_id="s")
        triple = datagen.make_triple(seq, params_for(0.7, sigma_r=0.0), np.random.default_rng(0))
        np.testing.assert_allclose(triple.blurry, 0.4)
        np.testing.assert_array_equal(triple.sharp, frames[0])

    def test_n_frames_recorded(self):
        frames = constant_frames(0.5, 13)
        seq = BurstSequence(frames=frames, scene_id="s")
        triple = datagen.make_triple(seq, params_for(0.7), np.random.default_rng(0))
        assert triple.params.n_frames_averaged == 11

    def test_deterministic(self):
        frames = [np.random.default_rng(i).uniform(size=(8, 8, 3)) for i in range(5)]
        seq = BurstSequence(frames=frames, scene_id="s")
        a = datagen.make_triple(seq, params_for(0.4, seed=3), np.random.default_rng(3))
        b = datagen.make_triple(seq, params_for(0.4, seed=3), np.random.default_rng(3))
        np.testing.assert_array_equal(a.noisy, b.noisy)
        np.testing.assert_array_equal(a.blurry, b.blurry)

    def test_second_frame_never_used(self):
        frames = [np.random.default_rng(i).uniform(size=(8, 8, 3)) for i in range(6)]
        seq = BurstSequence(frames=frames, scene_id="s")
        a = datagen.make_triple(seq, params_for(0.4, seed=3), np.random.default_rng(3))
        frames2 = list(frames)
        frames2[1] = np.random.default_rng(99).uniform(size=(8, 8, 3))
        b = datagen.make_triple(
            BurstSequence(frames=frames2, scene_id="s"), params_for(0.4, seed=3),
            np.random.default_rng(3),
        )
        np.testing.assert_array_equal(a.noisy, b.noisy)
        np.testing.assert_array_equal(a.blurry, b.blurry)
        np.testing.assert_array_equal(a.sharp, b.sharp)

    def test_too_few_frames(self):
        with pytest.raises(ValueError):
            BurstSequence(frames=constant_frames(0.5, 3), scene_id="s")

    def test_mismatched_shapes(self):
        frames = constant_frames(0.5, 4)
        frames[2] = np.zeros((4, 4, 3))
        with pytest.raises(ValueError):
            BurstSequence(frames=frames, scene_id="s")


class TestExposureRatio:
    def test_half_brightness(self):
        blurry = np.random.default_rng(0).uniform(0.2, 0.8, size=(8, 8, 3))
        assert datagen.estimate_exposure_ratio(0.5 * blurry, blurry) == pytest.approx(2.0)

    def test_identity(self):
        img = np.random.default_rng(1).uniform(size=(8, 8, 3))
        assert datagen.estimate_exposure_ratio(img, img) == pytest.approx(1.0)

    def test_synthetic_pair_mean_ratio(self):
        sharp = np.random.default_rng(2).uniform(0.1, 0.9, size=(16, 16, 3))
        noisy = imgproc.scale_exposure(sharp, 0.4)
        expected = sharp.mean() / noisy.mean()
        ratio = datagen.estimate_exposure_ratio(noisy, sharp)
        assert ratio == pytest.approx(expected, rel=1e-12)
        assert ratio == pytest.approx(2.5, rel=1e-9)

    def test_black_image_guard(self):
        assert np.isfinite(
            datagen.estimate_exposure_ratio(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5))
        )


class TestRandomCrop:
    def make_triple(self, h, w):
        # coordinate-encoding images: channel 0 = row / h, channel 1 = col / w
        yy, xx = np.mgrid[0:h, 0:w]
        coord = np.stack([yy / h, xx / w, np.zeros((h, w))], axis=2)
        return ImageTriple(
            noisy=coord, blurry=coord + 0.001, sharp=coord + 0.002,
            params=params_for(0.5), scene_id="s", index=0,
        )

    def test_exact_size_is_identity(self, rng):
        triple = self.make_triple(32, 32)
        out = datagen.random_crop_triple(triple, 32, rng)
        np.testing.assert_array_equal(out.sharp, triple.sharp)

    def test_alignment(self, rng):
        triple = self.make_triple(80, 45)
        out = datagen.random_crop_triple(triple, 32, rng)
        assert out.sharp.shape == (32, 32, 3)
        np.testing.assert_allclose(out.blurry, out.noisy + 0.001, atol=1e-12)
        np.testing.assert_allclose(out.sharp, out.noisy + 0.002, atol=1e-12)
        # offsets recoverable from the coordinate encoding and consistent
        y0 = out.noisy[0, 0, 0] * 80
        x0 = out.noisy[0, 0, 1] * 45
        rows = np.broadcast_to(y0 + np.arange(32)[:, None], (32, 32))
        cols = np.broadcast_to(x0 + np.arange(32)[None, :], (32, 32))
        np.testing.assert_allclose(out.noisy[:, :, 0] * 80, rows)
        np.testing.assert_allclose(out.noisy[:, :, 1] * 45, cols)

    def test_seed_reproducible(self):
        triple = self.make_triple(100, 100)
        a = datagen.random_crop_triple(triple, 32, np.random.default_rng(9))
        b = datagen.random_crop_triple(triple, 32, np.random.default_rng(9))
        np.testing.assert_array_equal(a.sharp, b.sharp)

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            datagen.random_crop_triple(self.make_triple(16, 40), 32, rng)


class TestBuildDataset:
    def test_build_and_manifest(self, toy_source, tmp_path):
        records = datagen.build_dataset(toy_source, tmp_path / "ds", seed=11)
        triples = [r for r in records if "error" not in r]
        assert len(triples) >= 4
        scene_splits = {}
        for r in triples:
            scene_splits.setdefault(r["scene_id"], set()).add(r["split"])
            for p in r["paths"].values():
                assert (tmp_path / "ds" / p).exists()
        # scenes belong to exactly one split, and both splits are present
        assert all(len(s) == 1 for s in scene_splits.values())
        assert {s for v in scene_splits.values() for s in v} == {"train", "eval"}

    def test_byte_identical_manifests(self, toy_source, tmp_path):
        datagen.build_dataset(toy_source, tmp_path / "a", seed=7)
        datagen.build_dataset(toy_source, tmp_path / "b", seed=7)
        assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (
            tmp_path / "b" / "manifest.jsonl"
        ).read_bytes()

    def test_seed_changes_output(self, toy_source, tmp_path):
        a = datagen.build_dataset(toy_source, tmp_path / "a", seed=1)
        b = datagen.build_dataset(toy_source, tmp_path / "b", seed=2)
        assert [r["f_scale"] for r in a] != [r["f_scale"] for r in b]

    def test_empty_source(self, tmp_path):
        (tmp_path / "empty").mkdir()
        records = datagen.build_dataset(tmp_path / "empty", tmp_path / "out", seed=0)
        assert records == []
        assert (tmp_path / "out" / "manifest.jsonl").read_text() == ""

    def test_bad_scene_recorded_and_skipped(self, tmp_path):
        from toydata import write_burst_tree

        src = write_burst_tree(tmp_path / "src", n_scenes=2, seed=3, h=32, w=32)
        # corrupt one scene with a mismatched frame
        bad = src / "scene001" / "0003.png"
        imgproc.save_png(bad, np.zeros((16, 16, 3)))
        records = datagen.build_dataset(src, tmp_path / "out", seed=0)
        errors = [r for r in records if "error" in r]
        assert [e["scene_id"] for e in errors] == ["scene001"]
        assert all(r["scene_id"] != "scene001" for r in records if "error" not in r)
        assert any(r["scene_id"] == "scene000" for r in records)

    def test_manifest_roundtrip(self, toy_source, tmp_path):
        datagen.build_dataset(toy_source, tmp_path / "ds", seed=11)
        records = datagen.read_manifest(tmp_path / "ds" / "manifest.jsonl")
        triples = [r for r in records if "error" not in r]
        t = datagen.load_triple(tmp_path / "ds", triples[0])
        assert t.sharp.shape == t.noisy.shape == t.blurry.shape
        assert t.params.n_frames_averaged == triples[0]["n_frames_averaged"]


class TestNoiseInvariants:
    def test_blur_variance_halves_when_n_doubles(self):
        rng = np.random.default_rng(10)
        var = {}
        for n in (5, 10):
            frames = constant_frames(0.5, n, shape=(16, 16, 3))
            draws = np.stack(
                [datagen.synth_blurry(frames, sigma_r=0.08, rng=rng) for _ in range(3000)]
            )
            var[n] = draws.var(axis=0).mean()
        assert var[5] / var[10] == pytest.approx(2.0, rel=0.1)

    def test_poisson_mean_converges_to_scaled(self):
        # low-intensity constant: clamping bias below the 2% tolerance
        rng = np.random.default_rng(11)
        sharp = np.full((8, 8, 3), 0.1)
        params = params_for(0.35)
        draws = np.stack([datagen.synth_noisy(sharp, params, rng) for _ in range(10_000)])
        assert draws.mean() == pytest.approx(0.035, rel=0.02)
