"""Matching: dedup, accumulation vs brute force, RANSAC, warping, serialization."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from rgbxalign.errors import EstimationFailedError, MatchingError
from rgbxalign.imgcore import Image
from rgbxalign.matching import (
    ClassicalBackend,
    Homography,
    MatchSet,
    accumulate_matches,
    estimate_homography,
    load_matchset,
    match_pair,
    round_to_pixel,
    save_matchset,
    warp_image,
    zncc,
)


def project(h, pts):
    hom = np.column_stack([pts, np.ones(len(pts))])
    q = hom @ h.T
    return q[:, :2] / q[:, 2:3]


def brute_force_accumulate(sets, x_frames, shape):
    """Scalar re-evaluation of the accumulation rule, same rounding/sampling."""
    vsum = np.zeros(shape)
    csum = np.zeros(shape)
    count = np.zeros(shape, dtype=np.int64)
    for ms, x_img in zip(sets, x_frames):
        data = x_img.data
        for k in range(len(ms)):
            r, c = ms.p_x[k]
            r0 = int(np.clip(np.floor(r), 0, data.shape[0] - 2))
            c0 = int(np.clip(np.floor(c), 0, data.shape[1] - 2))
            fr = min(max(r - r0, 0.0), 1.0)
            fc = min(max(c - c0, 0.0), 1.0)
            top = (1.0 - fc) * data[r0, c0] + fc * data[r0, c0 + 1]
            bot = (1.0 - fc) * data[r0 + 1, c0] + fc * data[r0 + 1, c0 + 1]
            val = (1.0 - fr) * top + fr * bot
            pi = int(np.floor(ms.p_rgb[k, 0] + 0.5))
            pj = int(np.floor(ms.p_rgb[k, 1] + 0.5))
            vsum[pi, pj] = vsum[pi, pj] + val
            csum[pi, pj] = csum[pi, pj] + ms.conf[k]
            count[pi, pj] += 1
    known = count > 0
    values = np.zeros(shape)
    conf = np.zeros(shape)
    for i in range(shape[0]):
        for j in range(shape[1]):
            if known[i, j]:
                values[i, j] = vsum[i, j] / count[i, j]
                conf[i, j] = csum[i, j] / count[i, j]
    return values, count, np.clip(conf, 0.0, 1.0)


def random_matchsets(rng, n_sets, n_matches, shape):
    sets, frames = [], []
    height, width = shape
    for s in range(n_sets):
        p_rgb = np.column_stack(
            [rng.uniform(0, height - 1, n_matches), rng.uniform(0, width - 1, n_matches)]
        )
        p_x = np.column_stack(
            [rng.uniform(0, height - 1, n_matches), rng.uniform(0, width - 1, n_matches)]
        )
        sets.append(MatchSet("t", str(s), p_rgb, p_x, rng.random(n_matches)))
        frames.append(Image(rng.random(shape)))
    return sets, frames


class TestMatchSet:
    def test_dedup_keeps_highest_conf(self):
        p_rgb = np.array([[5.2, 5.2], [4.9, 5.1], [10.0, 10.0]])
        p_x = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        ms = MatchSet("a", "b", p_rgb, p_x, np.array([0.5, 0.9, 0.7]))
        assert len(ms) == 2
        kept = {tuple(q) for q in round_to_pixel(ms.p_rgb)}
        assert kept == {(5, 5), (10, 10)}
        idx = list(round_to_pixel(ms.p_rgb)[:, 0]).index(5)
        assert ms.conf[idx] == 0.9

    def test_rejects_bad_conf(self):
        with pytest.raises(MatchingError):
            MatchSet("a", "b", np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), np.array([1.5]))

    def test_round_trip_file(self, tmp_path, rng):
        ms = MatchSet(
            "0003", "0005",
            rng.uniform(0, 50, (20, 2)), rng.uniform(0, 50, (20, 2)), rng.random(20),
        )
        save_matchset(ms, tmp_path / "m.txt")
        back = load_matchset(tmp_path / "m.txt")
        assert back.rgb_frame == "0003" and back.x_frame == "0005"
        assert np.array_equal(back.p_rgb, ms.p_rgb)
        assert np.array_equal(back.conf, ms.conf)

    def test_empty_file_round_trip(self, tmp_path):
        ms = MatchSet("a", "b", np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
        save_matchset(ms, tmp_path / "e.txt")
        assert len(load_matchset(tmp_path / "e.txt")) == 0


class TestAccumulate:
    def test_single_match(self):
        x = Image(np.full((16, 16), 0.7))
        ms = MatchSet("t", "0", np.array([[10.0, 10.0]]), np.array([[3.0, 3.0]]), np.array([0.9]))
        sp, cf = accumulate_matches([ms], [x], "t", (16, 16))
        assert sp.values[10, 10] == 0.7
        assert sp.counts[10, 10] == 1
        assert cf.conf[10, 10] == 0.9
        assert sp.num_known == 1

    def test_two_matches_same_pixel(self):
        x = Image(np.zeros((8, 8)))
        x2 = Image(np.full((8, 8), 0.6))
        x1 = Image(np.full((8, 8), 0.2))
        m1 = MatchSet("t", "0", np.array([[4.0, 4.0]]), np.array([[2.0, 2.0]]), np.array([1.0]))
        m2 = MatchSet("t", "1", np.array([[4.2, 3.9]]), np.array([[5.0, 5.0]]), np.array([0.5]))
        sp, cf = accumulate_matches([m1, m2], [x1, x2], "t", (8, 8))
        assert sp.values[4, 4] == pytest.approx(0.4)
        assert sp.counts[4, 4] == 2
        assert cf.conf[4, 4] == pytest.approx(0.75)

    def test_wrong_target_rejected(self):
        ms = MatchSet("a", "0", np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), np.array([1.0]))
        with pytest.raises(MatchingError):
            accumulate_matches([ms], [Image(np.zeros((4, 4)))], "b", (4, 4))

    def test_bitwise_vs_brute_force(self, rng):
        shape = (24, 24)
        sets, frames = random_matchsets(rng, 5, 150, shape)
        sp, cf = accumulate_matches(sets, frames, "t", shape)
        values, count, conf = brute_force_accumulate(sets, frames, shape)
        assert np.array_equal(sp.counts, count)
        assert np.array_equal(sp.values[count > 0], values[count > 0])
        assert np.array_equal(cf.conf, conf)

    def test_oracle_roundtrip_matches_gt(self, small_bundle):
        from rgbxalign.synthbench import NoiseModel, oracle_match

        n = 2
        sets, frames = [], []
        for m in range(6):
            ms = oracle_match(small_bundle, (n, m), NoiseModel(), 800, seed=5)
            sets.append(MatchSet("t", str(m), ms.p_rgb, ms.p_x, ms.conf))
            frames.append(small_bundle.x_raw[m])
        sp, cf = accumulate_matches(sets, frames, "t", small_bundle.shape)
        known = sp.known
        gt = small_bundle.x_gt[n].data
        rmse = np.sqrt(np.mean((sp.values[known] - gt[known]) ** 2))
        assert rmse <= 0.02  # bilinear resampling budget
        assert np.all(cf.conf[known] == 1.0)
        assert np.all(cf.conf[~known] == 0.0)


class TestHomography:
    def test_normalized_and_invertible(self):
        h = Homography(2.0 * np.eye(3))
        assert h.h[2, 2] == 1.0
        with pytest.raises(ValueError):
            Homography(np.zeros((3, 3)))

    def test_exact_translation_recovery(self):
        sq = np.array([[0.0, 0.0], [0.0, 10.0], [10.0, 0.0], [10.0, 10.0]])
        ms = MatchSet("a", "b", sq, sq + np.array([5.0, 0.0]), np.ones(4))
        hom, mask = estimate_homography(ms, reproj_thresh=1.0, max_iters=50, seed=3)
        expect = np.array([[1.0, 0.0, 5.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.abs(hom.h - expect).max() < 1e-6
        assert mask.all()

    def test_outlier_robustness(self, rng):
        h_true = np.array([[0.99, 0.01, 4.0], [-0.02, 1.02, -6.0], [1e-5, -1e-5, 1.0]])
        n = 200
        src = rng.uniform(10, 240, (n, 2))
        dst = project(h_true, src) + rng.normal(0, 0.5, (n, 2))
        out = rng.random(n) < 0.4
        dst[out] = rng.uniform(0, 250, (int(out.sum()), 2))
        ms = MatchSet("a", "b", src, dst, np.full(n, 0.7))
        hom, _ = estimate_homography(ms, reproj_thresh=2.0, max_iters=500, seed=0)
        gt_in = ~out
        err = np.linalg.norm(project(hom.h, src[gt_in]) - project(h_true, src[gt_in]), axis=1)
        assert err.mean() <= 1.0

    def test_too_few_matches(self):
        ms = MatchSet("a", "b", np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), np.array([1.0]))
        with pytest.raises(EstimationFailedError):
            estimate_homography(ms)

    def test_collinear_fails(self):
        pts = np.column_stack([np.arange(10, dtype=float), np.arange(10, dtype=float)])
        ms = MatchSet("a", "b", pts, pts + 1.0, np.ones(10))
        with pytest.raises(EstimationFailedError):
            estimate_homography(ms, max_iters=30, seed=1)

    def test_deterministic(self, rng):
        src = rng.uniform(0, 100, (50, 2))
        dst = src + rng.normal(0, 1, (50, 2))
        ms = MatchSet("a", "b", src, dst, rng.random(50))
        h1, m1 = estimate_homography(ms, seed=42)
        h2, m2 = estimate_homography(ms, seed=42)
        assert np.array_equal(h1.h, h2.h)
        assert np.array_equal(m1, m2)

    @pytest.mark.parametrize("s", [0.5, 2.0])
    def test_scaling_invariance(self, rng, s):
        # Hartley normalization: scaling all coordinates (and the threshold)
        # by a power of two must not change the result
        h_true = np.array([[1.01, 0.02, 3.0], [0.01, 0.98, -2.0], [0.0, 0.0, 1.0]])
        src = rng.uniform(10, 200, (80, 2))
        dst = project(h_true, src) + rng.normal(0, 0.3, (80, 2))
        conf = rng.random(80)
        ms = MatchSet("a", "b", src, dst, conf)
        ms_s = MatchSet("a", "b", src * s, dst * s, conf)
        h1, m1 = estimate_homography(ms, reproj_thresh=2.0, seed=9)
        h2, m2 = estimate_homography(ms_s, reproj_thresh=2.0 * s, seed=9)
        assert np.array_equal(m1, m2)
        scale = np.diag([s, s, 1.0])
        back = np.linalg.inv(scale) @ h2.h @ scale
        back /= back[2, 2]
        assert np.abs(back - h1.h).max() < 1e-9


class TestWarp:
    def test_identity_bitwise(self, rng):
        img = Image(rng.random((20, 30)))
        out, valid = warp_image(img, Homography.identity(), (20, 30))
        assert np.array_equal(out.data, img.data)
        assert valid.bits.all()

    def test_translation_on_ramp(self):
        ramp = Image(np.tile(np.arange(40) / 39.0, (16, 1)))
        h = Homography(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -5.0], [0.0, 0.0, 1.0]]))
        out, valid = warp_image(ramp, h, (16, 40))
        interior = out.data[:, 6:]
        assert np.abs(interior - ramp.data[:, 1:35]).max() < 1e-6
        assert not valid.bits[:, :5].any()

    def test_inverse_composition(self, rng):
        smooth = gaussian_filter(rng.random((48, 48)), 3.0)
        img = Image((smooth - smooth.min()) / (smooth.max() - smooth.min()))
        h = Homography(np.array([[1.0, 0.01, 1.5], [-0.01, 1.0, -2.0], [0.0, 0.0, 1.0]]))
        fwd, v1 = warp_image(img, h, (48, 48))
        back, v2 = warp_image(fwd, h.inverse(), (48, 48))
        inner = np.zeros((48, 48), dtype=bool)
        inner[8:-8, 8:-8] = True
        sel = inner & v1.bits & v2.bits
        assert np.abs(back.data[sel] - img.data[sel]).max() <= 0.02

    def test_two_layer_failure_mode(self, small_bundle):
        # single homography cannot align both depth layers
        from rgbxalign.synthbench import NoiseModel, oracle_match

        n = 2
        ms = oracle_match(small_bundle, (n, n), NoiseModel(), 1500, seed=1)
        hom, _ = estimate_homography(ms, reproj_thresh=2.0, seed=4)
        coords, valid = small_bundle.correspondence(n, n)
        pts = np.argwhere(np.ones(small_bundle.shape, dtype=bool)).astype(float)
        mapped = hom.apply(pts).reshape(*small_bundle.shape, 2)
        err = np.linalg.norm(mapped - coords, axis=2)
        fg = small_bundle.foreground_mask(n).bits & valid
        bg = ~small_bundle.foreground_mask(n).bits & valid
        assert np.median(err[fg]) >= 3.0
        assert np.median(err[bg]) <= 0.5


class TestClassicalBackend:
    def test_self_match_rate(self):
        rng = np.random.default_rng(17)
        rates = []
        for _ in range(10):
            tex = gaussian_filter(rng.random((128, 128)), 1.2)
            img = Image((tex - tex.min()) / (tex.max() - tex.min()))
            ms = match_pair(ClassicalBackend(), img, img)
            assert len(ms) > 50
            dist = np.linalg.norm(ms.p_rgb - ms.p_x, axis=1)
            rates.append((dist <= 1.0).mean())
        assert np.mean(rates) >= 0.9

    def test_contrast_inversion(self):
        rng = np.random.default_rng(3)
        tex = gaussian_filter(rng.random((96, 96)), 1.5)
        tex = (tex - tex.min()) / (tex.max() - tex.min())
        ms = match_pair(ClassicalBackend(), Image(tex), Image(1.0 - tex))
        dist = np.linalg.norm(ms.p_rgb - ms.p_x, axis=1)
        assert (dist <= 1.0).mean() >= 0.9

    def test_blank_x(self, rng):
        img = Image(rng.random((64, 64)))
        blank = Image(np.full((64, 64), 0.5))
        ms = match_pair(ClassicalBackend(), img, blank)
        assert len(ms) == 0 or ms.conf.max() < 0.2

    def test_too_small_image(self, rng):
        tiny = Image(rng.random((10, 10)))
        ms = match_pair(ClassicalBackend(), tiny, tiny)
        assert len(ms) == 0
        assert ms.warnings

    def test_scores_match_brute_force_zncc(self):
        from rgbxalign.matching import _orientation_channels

        rng = np.random.default_rng(5)
        tex = gaussian_filter(rng.random((96, 96)), 1.0)
        tex = (tex - tex.min()) / (tex.max() - tex.min())
        img = Image(tex)
        ms = match_pair(ClassicalBackend(), img, img)
        g = _orientation_channels(tex)
        for k in range(0, len(ms), 23):
            r, c = ms.p_rgb[k].astype(int)
            rx, cx = ms.p_x[k].astype(int)
            brute = zncc(g[r - 8 : r + 8, c - 8 : c + 8], g[rx - 8 : rx + 8, cx - 8 : cx + 8])
            assert ms.conf[k] == pytest.approx(max(0.0, brute), abs=1e-9)
