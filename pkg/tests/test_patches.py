import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from floodtile.patches import (
    AugmentConfig,
    DomainImage,
    NormStats,
    PatchPair,
    PatchSampler,
    PatchSamplingError,
    SamplerConfig,
    apply_transform,
    augment,
    denormalize,
    fit_norm_stats,
    inclusion_probability,
    normalize,
    sample_valid_patch,
)
from floodtile.raster_io import DEFAULT_NODATA, Raster


def make_image(mask, q=10.0, seed=0):
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    inputs = np.stack([rng.random((h, w)) * 10 + 100, np.full((h, w), q), mask.astype(float)]).astype(np.float32)
    target = np.where(mask, rng.random((h, w)), 0).astype(np.float32)
    return DomainImage(q, inputs, target, mask.astype(bool))


def random_pair(p=6, seed=0):
    rng = np.random.default_rng(seed)
    return PatchPair(rng.random((3, p, p)), rng.random((1, p, p)), rng.random((1, p, p)) < 0.5, (0, 0))


class TestSampler:
    def test_all_valid_first_attempt_in_bounds(self):
        img = make_image(np.ones((20, 30), bool))
        cfg = SamplerConfig(patch_size=8, max_attempts=1)
        rng = np.random.default_rng(0)
        for _ in range(50):
            pair = sample_valid_patch(img, cfg, rng)
            r, c = pair.origin
            assert 0 <= r <= 12 and 0 <= c <= 22
            np.testing.assert_array_equal(pair.inputs, img.inputs[:, r:r + 8, c:c + 8])

    def test_all_invalid_exhausts(self):
        img = make_image(np.zeros((16, 16), bool))
        with pytest.raises(PatchSamplingError):
            sample_valid_patch(img, SamplerConfig(patch_size=8, max_attempts=50), np.random.default_rng(0))

    def test_single_valid_pixel_always_covered(self):
        mask = np.zeros((24, 24), bool)
        mask[10, 17] = True
        img = make_image(mask)
        sampler = PatchSampler([img], SamplerConfig(patch_size=8))
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(1000):
            pair = sampler.sample(0, rng)
            r, c = pair.origin
            assert r <= 10 < r + 8 and c <= 17 < c + 8
            assert pair.mask.sum() == 1
            seen.add(pair.origin)
        admissible = {(r, c) for r in range(17) for c in range(17) if r <= 10 < r + 8 and c <= 17 < c + 8}
        assert seen == admissible

    def test_fraction_threshold(self):
        mask = np.zeros((32, 32), bool)
        mask[:, :12] = True
        cfg = SamplerConfig(patch_size=16, valid_threshold=0.5)
        assert cfg.min_valid == 128
        rng = np.random.default_rng(2)
        sampler = PatchSampler([make_image(mask)], cfg)
        for _ in range(40):
            assert sampler.sample(0, rng).mask.sum() >= 128

    def test_patch_larger_than_image(self):
        with pytest.raises(ValueError):
            PatchSampler([make_image(np.ones((8, 8), bool))], SamplerConfig(patch_size=16))

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            SamplerConfig(valid_threshold=1.5)

    def test_determinism(self):
        img = make_image(np.random.default_rng(5).random((40, 40)) < 0.3)
        sampler = PatchSampler([img], SamplerConfig(patch_size=8))
        a = [sampler.sample(0, np.random.default_rng([7, i])).origin for i in range(20)]
        b = [sampler.sample(0, np.random.default_rng([7, i])).origin for i in range(20)]
        assert a == b

    def test_corner_distribution_uniform(self):
        img = make_image(np.ones((40, 40), bool))
        sampler = PatchSampler([img], SamplerConfig(patch_size=8))
        rng = np.random.default_rng(11)
        # 33 x 33 corners folded onto a 3 x 3 grid of 11 x 11 bins
        counts = np.zeros((3, 3))
        for _ in range(9000):
            r, c = sampler.sample(0, rng).origin
            counts[r // 11, c // 11] += 1
        assert stats.chisquare(counts.ravel()).pvalue > 0.01

    def test_target_finite_on_mask(self):
        img = make_image(np.random.default_rng(3).random((30, 30)) < 0.5)
        pair = sample_valid_patch(img, SamplerConfig(patch_size=10), np.random.default_rng(0))
        assert np.isfinite(pair.target[pair.mask]).all()


class TestAugment:
    def test_hflip_reverses_columns_and_is_involution(self):
        pair = random_pair()
        cfg = AugmentConfig(1, 0, 0)
        out = augment(pair, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.inputs, pair.inputs[..., ::-1])
        np.testing.assert_array_equal(out.mask, pair.mask[..., ::-1])
        twice = augment(out, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(twice.inputs, pair.inputs)

    def test_zero_probabilities_identity(self):
        pair = random_pair()
        out = augment(pair, AugmentConfig(0, 0, 0), np.random.default_rng(0))
        np.testing.assert_array_equal(out.target, pair.target)
        assert out.transform == (False, False, 0)

    def test_half_turn_is_double_flip(self):
        x = np.arange(2 * 5 * 5).reshape(2, 5, 5)
        np.testing.assert_array_equal(apply_transform(x, (False, False, 2)), apply_transform(x, (True, True, 0)))

    def test_rotation_needs_square(self):
        pair = PatchPair(np.zeros((3, 4, 6)), np.zeros((1, 4, 6)), np.zeros((1, 4, 6), bool), (0, 0))
        with pytest.raises(ValueError):
            augment(pair, AugmentConfig(0, 0, 1), np.random.default_rng(0))

    def test_rotation_angles_cover_three_options(self):
        rng = np.random.default_rng(4)
        turns = {augment(random_pair(), AugmentConfig(0, 0, 1), rng).transform[2] for _ in range(60)}
        assert turns == {1, 2, 3}

    @settings(max_examples=40, deadline=None)
    @given(st.booleans(), st.booleans(), st.integers(0, 3), st.integers(0, 1000))
    def test_pairing_preserved(self, h, v, k, seed):
        pair = random_pair(seed=seed)
        t = (h, v, k)
        # the mask is recoverable from the transformed mask plane of the inputs
        pair.inputs[2] = pair.mask[0]
        out = apply_transform(pair.inputs, t)
        np.testing.assert_array_equal(out[2], apply_transform(pair.mask, t)[0])
        # discharge plane is constant before and after
        pair.inputs[1] = 7.0
        assert np.all(apply_transform(pair.inputs, t)[1] == 7.0)

    def test_normalize_augment_commute(self):
        norm = NormStats(100, 110, 5, 395, 0, 2)
        pair = random_pair(8, seed=3)
        t = (True, False, 3)
        a = apply_transform(norm.normalize_inputs(pair.inputs), t)
        b = norm.normalize_inputs(apply_transform(pair.inputs, t))
        np.testing.assert_array_equal(a, b)


class TestNormalization:
    def test_values(self):
        assert normalize(np.array([2.0, 4.0, 6.0]), 2, 6).tolist() == [0, 0.5, 1]

    def test_degenerate(self):
        assert normalize(np.array([5.0]), 5, 5).tolist() == [0]

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(0, 1))
    def test_round_trip(self, lo, span, frac):
        hi = lo + span
        v = lo + frac * span
        assert denormalize(normalize(v, lo, hi), lo, hi) == pytest.approx(v, rel=1e-12, abs=1e-9)

    def test_fit_elevation_and_discharge(self):
        dem = Raster(np.array([[183.25, 200.0], [226.39, DEFAULT_NODATA]]))
        water = Raster(np.array([[0.5, DEFAULT_NODATA], [1.5, DEFAULT_NODATA]]))
        imgs = [DomainImage.from_rasters(dem, q, water) for q in (5, 200, 395)]
        stats_ = fit_norm_stats(imgs, [5, 200, 395])
        assert (stats_.elev_min, stats_.elev_max) == (np.float32(183.25), np.float32(226.39))
        assert (stats_.q_min, stats_.q_max) == (5, 395)
        assert (stats_.target_min, stats_.target_max) == (0.5, 1.5)

    def test_fit_single_image(self):
        img = make_image(np.random.default_rng(0).random((10, 10)) < 0.5)
        s = fit_norm_stats([img], [img.discharge])
        assert s.target_min == img.target[img.mask].min()
        assert s.target_max == img.target[img.mask].max()
        assert s.elev_min == img.inputs[0].min()

    def test_fit_empty(self):
        with pytest.raises(ValueError):
            fit_norm_stats([], [])

    def test_json_round_trip(self, tmp_path):
        s = NormStats(1.5, 2.25, 5, 395, 0.0, 1.46, False)
        s.save(tmp_path / "n.json")
        assert NormStats.load(tmp_path / "n.json") == s

    def test_mask_plane_untouched(self):
        s = NormStats(0, 10, 0, 100, 0, 1)
        x = np.ones((3, 2, 2), np.float32)
        assert s.normalize_inputs(x)[2].tolist() == [[1, 1], [1, 1]]

    def test_target_norm_disabled_passthrough(self):
        s = NormStats(0, 1, 0, 1, 2, 4, target_norm_enabled=False)
        assert s.normalize_target(np.array([3.0])).tolist() == [3.0]
        assert s.denormalize_target(np.array([3.0])).tolist() == [3.0]


class TestInclusionProbability:
    def test_bey_value(self):
        assert inclusion_probability(65536, 585513, 400) >= 0.9999999

    def test_edges(self):
        assert inclusion_probability(10, 100, 0) == 0
        assert inclusion_probability(100, 100, 1) == 1

    def test_n_exceeds_m(self):
        with pytest.raises(ValueError):
            inclusion_probability(101, 100, 1)

    def test_interior_pixel_matches_sampler(self):
        # Under uniform corner sampling a pixel at least P-1 cells from every
        # edge is covered by P^2 of the (H-P+1)(W-P+1) corners, so the same
        # formula applies with M replaced by the corner count.
        img = make_image(np.ones((40, 40), bool))
        sampler = PatchSampler([img], SamplerConfig(patch_size=8))
        n_patches, trials = 20, 300
        hits = 0
        for t in range(trials):
            rng = np.random.default_rng([3, t])
            covered = False
            for _ in range(n_patches):
                r, c = sampler.sample(0, rng).origin
                covered |= r <= 20 < r + 8 and c <= 20 < c + 8
            hits += covered
        p = inclusion_probability(64, 33 * 33, n_patches)
        se = math.sqrt(p * (1 - p) / trials)
        assert abs(hits / trials - p) < 3 * se
