import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import K100
from mvspl.geometry import Camera, DepthMap
from mvspl.plane_sweep import (CostVolume, HypothesisSet, ProbabilityVolume, PyramidError,
                               build_hypotheses_coarse, build_hypotheses_refined,
                               calibrate_temperature, coarse_interval, cost_to_probability,
                               downsample_label, infer_depth_pyramid, matching_cost,
                               refine_high_resolution, regress_depth, upsample_depth)


def volume(costs, n_views=None):
    costs = np.asarray(costs, dtype=np.float64).reshape(1, 1, -1)
    n = np.full(costs.shape, 2) if n_views is None else np.asarray(n_views).reshape(costs.shape)
    return CostVolume(costs, n)


def prob_of(p):
    p = np.asarray(p, dtype=np.float64).reshape(1, 1, -1)
    return ProbabilityVolume(p, np.ones((1, 1), dtype=bool))


def interior(shape, margin):
    m = np.zeros(shape, dtype=bool)
    m[margin:-margin, margin:-margin] = True
    return m


class TestHypotheses:
    def test_coarse_examples(self):
        np.testing.assert_allclose(build_hypotheses_coarse(2, 4, 3).depths, [2, 3, 4])
        np.testing.assert_allclose(build_hypotheses_coarse(2, 4, 2).depths, [2, 4])
        with pytest.raises(ValueError):
            build_hypotheses_coarse(4, 2, 3)
        with pytest.raises(ValueError):
            build_hypotheses_coarse(2, 4, 1)

    def test_refined_arithmetic(self):
        h = build_hypotheses_refined(DepthMap.from_array(np.full((1, 1), 3.0)), 0.1, 4)
        np.testing.assert_allclose(h.depths[0, 0], [2.85, 2.95, 3.05, 3.15])

    def test_refined_clamped_positive(self):
        h = build_hypotheses_refined(DepthMap.from_array(np.full((1, 1), 0.05)), 0.1, 4)
        d = h.depths[0, 0]
        assert np.all(d > 0)
        np.testing.assert_allclose(np.diff(d), 0.1)
        assert d[0] == pytest.approx(0.05)

    def test_refined_invalid_prior_unrefinable(self):
        prior = DepthMap.from_array(np.array([[3.0, 0.0]]))
        h = build_hypotheses_refined(prior, 0.1, 4)
        assert h.valid.tolist() == [[True, False]]
        p = np.full((1, 2, 4), 0.25)
        d = regress_depth(ProbabilityVolume(p, np.ones((1, 2), dtype=bool)), h)
        assert d.mask.tolist() == [[True, False]]

    def test_refined_errors(self):
        prior = DepthMap.from_array(np.ones((1, 1)))
        with pytest.raises(ValueError):
            build_hypotheses_refined(prior, 0.0, 4)
        with pytest.raises(ValueError):
            build_hypotheses_refined(prior, 0.1, 3)

    def test_set_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            HypothesisSet(np.array([1.0, 1.0]), 0, 0.1)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-1, 10)), st.floats(1e-3, 1.0),
           st.sampled_from([2, 4, 8]))
    def test_refined_invariants(self, values, interval, M):
        h = build_hypotheses_refined(DepthMap.from_array(values), interval, M)
        assert np.all(h.depths > 0)
        np.testing.assert_allclose(np.diff(h.depths, axis=-1), interval, rtol=1e-6)


class TestProbability:
    def test_symmetric(self):
        np.testing.assert_allclose(cost_to_probability(volume([0, 0]), 1.0).prob.ravel(), [0.5, 0.5])

    def test_low_temperature_limit(self):
        p = cost_to_probability(volume([0, 1.0]), 1e-4).prob.ravel()
        assert p[0] == pytest.approx(1.0) and p[1] < 1e-300

    @pytest.mark.parametrize("tau", [1e-5, 3e-5, 0.1, 2.0])
    def test_closed_form(self, tau):
        # exp(0) / (exp(0) + exp(-ln 3)) = 1 / (1 + 1/3) = 3/4
        p = cost_to_probability(volume([0, tau * np.log(3)]), tau).prob.ravel()
        np.testing.assert_allclose(p, [0.75, 0.25], rtol=1e-12)

    def test_invalid_cells_zero(self):
        p = cost_to_probability(volume([0, 0, 0], n_views=[2, 1, 2]), 1.0)
        np.testing.assert_allclose(p.prob.ravel(), [0.5, 0, 0.5])

    def test_all_invalid_pixel(self):
        p = cost_to_probability(volume([0, 0], n_views=[1, 1]), 1.0)
        assert not p.valid[0, 0] and p.prob.sum() == 0

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(ValueError):
            cost_to_probability(volume([0, 1]), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 3, 6), elements=st.floats(0, 1e3)),
           arrays(np.int32, (2, 3, 6), elements=st.integers(1, 4)),
           st.floats(1e-6, 1e3))
    def test_sums_to_one(self, cost, n, tau):
        p = cost_to_probability(CostVolume(cost, n), tau)
        assert np.all((p.prob >= 0) & (p.prob <= 1))
        np.testing.assert_allclose(p.prob.sum(-1)[p.valid], 1.0, atol=1e-5)


class TestRegression:
    def test_delta(self):
        h = HypothesisSet(np.array([2.0, 3.0, 4.0]), 0, 1.0)
        assert regress_depth(prob_of([0, 1, 0]), h).values[0, 0] == 3.0

    def test_half_half(self):
        h = HypothesisSet(np.array([2.0, 4.0]), 0, 2.0)
        assert regress_depth(prob_of([0.5, 0.5]), h).values[0, 0] == 3.0

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(0.01, 1)), st.integers(0, 4), st.integers(0, 4),
           st.floats(0, 0.5))
    def test_shifting_mass_up_never_decreases(self, w, i, j, frac):
        lo, hi = min(i, j), max(i, j)
        h = HypothesisSet(np.linspace(2, 6, 5), 0, 1.0)
        p = w / w.sum()
        q = p.copy()
        moved = frac * q[lo]
        q[lo] -= moved
        q[hi] += moved
        assert regress_depth(prob_of(q), h).values[0, 0] >= regress_depth(prob_of(p), h).values[0, 0] - 1e-12

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 2, 4), elements=st.floats(0, 1e3)), st.floats(0.1, 5),
           st.floats(1e-3, 1))
    def test_within_hull(self, cost, center, interval):
        h = build_hypotheses_refined(DepthMap.from_array(np.full((2, 2), center)), interval, 4)
        d = regress_depth(cost_to_probability(CostVolume(cost, np.full(cost.shape, 2)), 1.0), h)
        assert np.all(d.values >= h.depths[..., 0]) and np.all(d.values <= h.depths[..., -1])


class TestMatchingCost:
    def test_identical_views_zero(self):
        cam = Camera(K100, np.eye(3), np.zeros(3), 1, 5)
        img = np.random.default_rng(0).random((20, 20, 3))
        c = matching_cost(img, [img, img], cam, [cam, cam], build_hypotheses_coarse(1, 5, 6))
        assert np.all(c.cost == 0)
        assert c.valid.all()

    def test_out_of_bounds_invalid(self):
        ref = Camera(K100, np.eye(3), np.zeros(3), 1, 5)
        far = Camera(K100, np.eye(3), np.array([1e4, 0.0, 0.0]), 1, 5)
        img = np.ones((10, 10))
        c = matching_cost(img, [img], ref, [far], build_hypotheses_coarse(1, 5, 3))
        assert not c.valid.any()

    def test_zero_sources(self):
        cam = Camera(K100, np.eye(3), np.zeros(3), 1, 5)
        with pytest.raises(ValueError):
            matching_cost(np.ones((4, 4)), [], cam, [], build_hypotheses_coarse(1, 5, 3))

    def test_argmin_at_true_plane(self, plane_noise):
        s = plane_noise
        hyps = HypothesisSet(np.linspace(3.0, 5.0, 21), 0, 0.1)
        assert 4.0 in np.round(hyps.depths, 12)
        srcs = s.pairs[0]
        c = matching_cost(s.images_low[0], [s.images_low[j] for j in srcs], s.cameras_low[0],
                          [s.cameras_low[j] for j in srcs], hyps)
        best = hyps.depths[np.argmin(np.where(c.valid, c.cost, np.inf), axis=-1)]
        m = interior(best.shape, 16) & c.valid.all(-1)
        assert np.mean(np.isclose(best[m], 4.0)) > 0.99


class TestPyramid:
    def test_single_level_is_coarse_sweep(self, plane_noise):
        s = plane_noise
        res = infer_depth_pyramid(s.images_low, s.cameras_low, 0, s.pairs[0], 1, 48, 8, 3e-5)
        assert len(res) == 1 and not res[0].hypotheses.per_pixel
        np.testing.assert_allclose(res[0].hypotheses.depths, np.linspace(2.5, 5.5, 48))

    def test_not_divisible(self, plane_noise):
        s = plane_noise
        imgs = [im[:126, :158] for im in s.images_low]
        with pytest.raises(PyramidError):
            infer_depth_pyramid(imgs, s.cameras_low, 0, s.pairs[0], 3, 48, 8, 3e-5)

    def test_textured_plane_two_levels(self, plane_noise):
        s = plane_noise
        res = infer_depth_pyramid(s.images_low, s.cameras_low, 0, s.pairs[0], 2, 48, 8, 3e-5)
        gt = s.gt_depths_low[0]
        d = res[-1].depth
        m = d.mask & gt.mask & interior(d.shape, 8)
        finest = coarse_interval(s.cameras_low[0], 48) / 2
        assert np.median(np.abs(d.values - gt.values)[m]) < finest

    def test_error_non_increasing_across_levels(self, sphere_noise):
        s = sphere_noise
        res = infer_depth_pyramid(s.images_low, s.cameras_low, 0, s.pairs[0], 2, 48, 8, 3e-5)
        gt = s.gt_depths_low[0]
        errs = []
        for r in res:
            # every level is compared on the finest grid
            up = upsample_depth(r.depth, s.resolution_low)
            m = up.mask & gt.mask & interior(up.shape, 8)
            errs.append(np.median(np.abs(up.values - gt.values)[m]))
        assert all(b <= a for a, b in zip(errs, errs[1:]))

    def test_textureless_low_confidence(self, plane_uniform, plane_noise):
        peaks = []
        for s in (plane_uniform, plane_noise):
            res = infer_depth_pyramid(s.images_low, s.cameras_low, 0, s.pairs[0], 1, 48, 8, 3e-5)
            p = res[0].probability
            peaks.append(np.median(p.prob.max(-1)[p.valid]))
        assert peaks[0] < 0.5 * peaks[1]


class TestRefinement:
    def test_equal_resolution_identity(self, plane_noise):
        s = plane_noise
        prior = s.gt_depths_low[0]
        out = refine_high_resolution(s.images_low, s.cameras_low, 0, s.pairs[0], prior, 2, 5, 48, 8, 3e-5)
        np.testing.assert_array_equal(out.values, prior.values)
        np.testing.assert_array_equal(out.mask, prior.mask)

    def test_improves_on_upsampled_prior(self, sphere_noise):
        s = sphere_noise
        res = infer_depth_pyramid(s.images_low, s.cameras_low, 0, s.pairs[0], 2, 48, 8, 3e-5)
        prior = res[-1].depth
        out = refine_high_resolution(s.images_high, s.cameras_high, 0, s.pairs[0], prior, 2, 5, 48, 8, 3e-5)
        up = upsample_depth(prior, s.resolution_high)
        gt = s.gt_depths_high[0]
        m = out.mask & up.mask & gt.mask & interior(gt.shape, 16)

        def rmse(d):
            return np.sqrt(np.mean((d.values[m] - gt.values[m]) ** 2))

        assert rmse(out) <= rmse(up)

    def test_invalid_prior_stays_invalid(self, plane_noise):
        s = plane_noise
        vals = s.gt_depths_low[0].values.copy()
        vals[:10, :10] = 0
        out = refine_high_resolution(s.images_high, s.cameras_high, 0, s.pairs[0],
                                     DepthMap.from_array(vals), 2, 5, 48, 8, 3e-5)
        assert not out.mask[:20, :20].any()

    def test_too_few_fine_levels(self, plane_noise):
        s = plane_noise
        with pytest.raises(PyramidError):
            refine_high_resolution(s.images_high, s.cameras_high, 0, s.pairs[0], s.gt_depths_low[0],
                                   2, 2, 48, 8, 3e-5)


class TestLabelResampling:
    def test_upsample_constant(self):
        up = upsample_depth(DepthMap.from_array(np.full((3, 4), 2.5)), (6, 8))
        assert up.mask.all() and np.allclose(up.values, 2.5)

    def test_upsample_mask_nearest(self):
        v = np.full((2, 2), 3.0)
        v[0, 0] = 0
        up = upsample_depth(DepthMap.from_array(v), (4, 4))
        assert not up.mask[:2, :2].any() and up.mask[2:, 2:].all()
        # masked neighbors do not bleed into valid values
        assert np.allclose(up.values[up.mask], 3.0)

    def test_upsample_incompatible(self):
        with pytest.raises(PyramidError):
            upsample_depth(DepthMap.from_array(np.ones((2, 2))), (5, 4))

    def test_downsample_pixel_centers(self):
        v = np.arange(16.0).reshape(4, 4) + 1
        d = downsample_label(DepthMap.from_array(v), (2, 2))
        assert d.values.tolist() == [[v[1, 1], v[1, 3]], [v[3, 1], v[3, 3]]]


def test_calibrated_temperature_gives_peak():
    # every pixel: costs {g, 0, g}; the calibrated tau must put 0.9 on the middle cell
    g = 0.02
    cost = np.tile([g, 0.0, g], (4, 4, 1))
    tau = calibrate_temperature(CostVolume(cost, np.full(cost.shape, 2)))
    p = cost_to_probability(CostVolume(cost, np.full(cost.shape, 2)), tau)
    np.testing.assert_allclose(p.prob[..., 1], 0.9, rtol=1e-9)
