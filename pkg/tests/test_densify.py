"""Propagation recurrence: affinities, anchoring, convergence, level logic."""

import numpy as np
import pytest

from rgbxalign.densify import (
    AffinityField,
    DensifyConfig,
    certainty_map,
    compute_affinities,
    densify_multilevel,
    init_dense,
    offset_list,
    propagate,
    threshold_sparse,
)
from rgbxalign.errors import DensifyError
from rgbxalign.imgcore import ConfidenceMap, Image, SparseMap
from rgbxalign.metrics import psnr


def reference_recurrence(l0, aff, xm, anchor, iters):
    """Separately coded scalar loop of the anchored-neighborhood recurrence."""
    cur = l0.copy()
    height, width = cur.shape
    for _ in range(iters):
        nxt = np.zeros_like(cur)
        for r in range(height):
            for c in range(width):
                acc = 0.0
                for k, (dr, dc) in enumerate(aff.offsets):
                    rr, cc = r + dr, c + dc
                    neighbor = cur[rr, cc] if 0 <= rr < height and 0 <= cc < width else 0.0
                    acc = acc + aff.weights[k, r, c] * neighbor
                nxt[r, c] = (1.0 - anchor[r, c]) * acc + anchor[r, c] * xm[r, c]
        cur = nxt
    return cur


def random_sparse(rng, shape, frac):
    counts = (rng.random(shape) < frac).astype(int)
    if counts.sum() == 0:
        counts[0, 0] = 1
    values = rng.random(shape) * counts
    return SparseMap(values, counts)


class TestAffinities:
    def test_rows_sum_to_one(self, rng):
        aff = compute_affinities(Image(rng.random((20, 20, 3))))
        assert np.abs(aff.weights.sum(axis=0) - 1.0).max() < 1e-6
        assert aff.weights.min() >= 0.0

    def test_constant_guidance_symmetric(self):
        aff = compute_affinities(Image(np.full((16, 16, 3), 0.5)))
        interior = aff.weights[:, 8, 8]
        for ring in range(3):
            w = interior[ring * 8 : (ring + 1) * 8]
            assert np.ptp(w) < 1e-12

    def test_edge_blocks_diffusion(self):
        img = np.zeros((16, 16, 3))
        img[:, 8:] = 1.0
        aff = compute_affinities(Image(img))
        offsets = offset_list(DensifyConfig())
        across = offsets.index((0, 1))
        along = offsets.index((1, 0))
        # at a pixel just left of the step, weight across < weight along
        assert aff.weights[across, 8, 7] < aff.weights[along, 8, 7]

    def test_out_of_bounds_zero(self, rng):
        aff = compute_affinities(Image(rng.random((10, 10, 3))))
        offsets = offset_list(DensifyConfig())
        up = offsets.index((-1, 0))
        assert aff.weights[up, 0, 5] == 0.0

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            AffinityField(np.full((1, 4, 4), 0.5), ((0, 1),))


class TestInitDense:
    def test_single_known_constant(self):
        values = np.zeros((8, 8))
        counts = np.zeros((8, 8), dtype=int)
        values[3, 4] = 0.8
        counts[3, 4] = 1
        out = init_dense(SparseMap(values, counts))
        assert np.abs(out.data - 0.8).max() == 0.0

    def test_two_corner_midpoint(self):
        values = np.zeros((9, 9))
        counts = np.zeros((9, 9), dtype=int)
        counts[0, 0] = counts[8, 8] = 1
        values[8, 8] = 1.0
        out = init_dense(SparseMap(values, counts))
        assert out.data[4, 4] == pytest.approx(0.5, abs=1e-9)

    def test_dense_input_identity(self, rng):
        values = rng.random((6, 6))
        sp = SparseMap(values, np.ones((6, 6), dtype=int))
        assert np.array_equal(init_dense(sp).data, values)

    def test_all_void_fails(self):
        with pytest.raises(DensifyError):
            init_dense(SparseMap(np.zeros((4, 4)), np.zeros((4, 4), dtype=int)))


class TestPropagate:
    def test_full_anchor_fixed_point(self, rng):
        values = rng.random((16, 16))
        sp = SparseMap(values, np.ones((16, 16), dtype=int))
        aff = compute_affinities(Image(rng.random((16, 16, 3))))
        out = propagate(Image(values), aff, sp, certainty_map(sp),
                        ConfidenceMap(np.ones((16, 16))), DensifyConfig())
        assert np.array_equal(out.data, values)

    def test_single_anchor_converges(self):
        values = np.zeros((32, 32))
        counts = np.zeros((32, 32), dtype=int)
        values[16, 16] = 1.0
        counts[16, 16] = 1
        sp = SparseMap(values, counts)
        cfg = DensifyConfig(iterations=200, tol=0.0)
        aff = compute_affinities(Image(np.full((32, 32, 3), 0.5)), cfg)
        out = propagate(init_dense(sp), aff, sp, certainty_map(sp),
                        ConfidenceMap(counts.astype(float)), cfg)
        assert np.abs(out.data - 1.0).max() < 0.01

    def test_bitwise_vs_reference(self, rng):
        # cm = 1 degenerates to the plain certainty recurrence
        for trial in range(5):
            sp = random_sparse(rng, (16, 16), 0.3)
            aff = compute_affinities(Image(rng.random((16, 16, 3))))
            cfg = DensifyConfig(iterations=4, tol=0.0)
            cs = certainty_map(sp)
            mine = propagate(init_dense(sp), aff, sp, cs,
                             ConfidenceMap(np.ones((16, 16))), cfg)
            xm = np.where(sp.known, sp.values, 0.0)
            ref = reference_recurrence(init_dense(sp).data, aff, xm, cs.cs, 4)
            assert np.array_equal(mine.data, ref)

    def test_min_max_bound(self, rng):
        sp = random_sparse(rng, (20, 20), 0.2)
        conf = ConfidenceMap(np.where(sp.known, rng.random((20, 20)), 0.0))
        aff = compute_affinities(Image(rng.random((20, 20, 3))))
        out = propagate(init_dense(sp), aff, sp, certainty_map(sp), conf, DensifyConfig())
        lo = min(init_dense(sp).data.min(), sp.values[sp.known].min())
        hi = max(init_dense(sp).data.max(), sp.values[sp.known].max())
        assert out.data.min() >= lo - 1e-9
        assert out.data.max() <= hi + 1e-9

    def test_confidence_softens_noisy_anchor(self, rng):
        # the CADF mechanism: a half-confidence wrong anchor lands closer to
        # its neighborhood than a full-confidence one
        shape = (24, 24)
        counts = np.zeros(shape, dtype=int)
        values = np.full(shape, 0.5)
        counts[::3, ::3] = 1
        values[12, 12] = 1.0  # wrong anchor in a 0.5 field
        counts[12, 12] = 1
        sp = SparseMap(values * counts, counts)
        aff = compute_affinities(Image(np.full((24, 24, 3), 0.5)))
        cfg = DensifyConfig()
        out_soft = propagate(init_dense(sp), aff, sp, certainty_map(sp),
                             ConfidenceMap(np.where(counts > 0, 0.5, 0.0)), cfg)
        out_hard = propagate(init_dense(sp), aff, sp, certainty_map(sp),
                             ConfidenceMap(counts.astype(float)), cfg)
        assert abs(out_soft.data[12, 12] - 0.5) < abs(out_hard.data[12, 12] - 0.5)

    def test_contraction_on_benchmark(self, small_bundle):
        from rgbxalign.matching import MatchSet, accumulate_matches
        from rgbxalign.synthbench import NoiseModel, oracle_match

        ms = oracle_match(small_bundle, (1, 1), NoiseModel(), 1200, seed=0)
        sp, conf = accumulate_matches(
            [MatchSet("t", "1", ms.p_rgb, ms.p_x, ms.conf)],
            [small_bundle.x_raw[1]], "t", small_bundle.shape,
        )
        cfg = DensifyConfig(tol=0.0)
        steps: list[float] = []
        propagate(init_dense(sp), compute_affinities(small_bundle.rgb[1], cfg), sp,
                  certainty_map(sp), conf, cfg, step_sizes=steps)
        for i in range(3, len(steps) - 1):
            assert steps[i + 1] <= steps[i] * 1.05 + 1e-12

    def test_monotone_improvement_over_init(self, small_bundle):
        from rgbxalign.matching import MatchSet, accumulate_matches
        from rgbxalign.synthbench import NoiseModel, oracle_match

        n = 3
        ms = oracle_match(small_bundle, (n, n), NoiseModel(), 4000, seed=2)
        sp, conf = accumulate_matches(
            [MatchSet("t", str(n), ms.p_rgb, ms.p_x, ms.conf)],
            [small_bundle.x_raw[n]], "t", small_bundle.shape,
        )
        gt = small_bundle.x_gt[n]
        l0 = init_dense(sp)
        cfg = DensifyConfig()
        out = propagate(l0, compute_affinities(small_bundle.rgb[n], cfg), sp,
                        certainty_map(sp), conf, cfg)
        assert psnr(out, gt) >= psnr(l0, gt)


class TestMultilevel:
    def test_uniform_confidence_identical_levels(self, rng):
        sp = random_sparse(rng, (16, 16), 0.3)
        conf = ConfidenceMap(sp.known.astype(float))
        rgb = Image(rng.random((16, 16, 3)))
        levels = densify_multilevel(rgb, sp, conf, DensifyConfig(iterations=6))
        assert list(levels) == [0.15, 0.3, 0.5]
        first = levels[0.15].data
        for img in levels.values():
            assert np.array_equal(img.data, first)

    def test_level_omitted_above_max_conf(self, rng):
        sp = random_sparse(rng, (16, 16), 0.3)
        conf = ConfidenceMap(np.where(sp.known, 0.4, 0.0))
        levels = densify_multilevel(Image(rng.random((16, 16, 3))), sp, conf,
                                    DensifyConfig(iterations=4))
        assert list(levels) == [0.15, 0.3]

    def test_all_empty_fails(self, rng):
        sp = random_sparse(rng, (16, 16), 0.2)
        conf = ConfidenceMap(np.where(sp.known, 0.1, 0.0))
        with pytest.raises(DensifyError):
            densify_multilevel(Image(rng.random((16, 16, 3))), sp, conf,
                               DensifyConfig(thresholds=(0.2, 0.5), iterations=4))

    def test_threshold_monotone_nesting(self, rng):
        sp = random_sparse(rng, (20, 20), 0.4)
        conf = ConfidenceMap(np.where(sp.known, rng.random((20, 20)), 0.0))
        prev = None
        for delta in (0.15, 0.3, 0.5):
            level_sp, _ = threshold_sparse(sp, conf, delta)
            if prev is not None:
                assert np.all(~level_sp.known | prev)  # level k+1 subset of level k
            prev = level_sp.known


def test_config_validation():
    with pytest.raises(ValueError):
        DensifyConfig(thresholds=(0.5, 0.3))
    with pytest.raises(ValueError):
        DensifyConfig(iterations=0)
    with pytest.raises(ValueError):
        DensifyConfig(sigma_color=0.0)
