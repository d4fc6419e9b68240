"""Level fusion, patch self-matching, and similarity-driven rejection.

An aligned RGB-X pair should self-match: patch i of the RGB image should be
most similar to patch i of the X image. Both images are described on a patch
grid by mod-pi gradient-orientation histograms (invariant to the
contrast inversions between modalities), a scaled dot-product similarity
matrix is formed, and its diagonal drives both a scalar alignment score and
the concentration-based rejection of badly densified patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .densify import DensifyConfig, densify_level
from .errors import DensifyError, FilterError
from .imgcore import ConfidenceMap, Image, Mask, SparseMap, gray_array
from .quantiles import quantile

logger = logging.getLogger(__name__)

DESCRIPTOR_CELLS = 4  # 4x4 spatial cells
DESCRIPTOR_BINS = 8  # orientation bins over [0, pi)
DESCRIPTOR_DIM = DESCRIPTOR_CELLS * DESCRIPTOR_CELLS * DESCRIPTOR_BINS


# ---------------------------------------------------------------------------
# Deterministic enhancement + mean fusion
# ---------------------------------------------------------------------------


def _box_filter(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the clamped (2r+1)^2 window, via cumulative sums."""

    def along(a: np.ndarray, r: int) -> np.ndarray:
        n = a.shape[0]
        cum = np.cumsum(a, axis=0)
        out = np.empty_like(a)
        out[: r + 1] = cum[r : 2 * r + 1]
        out[r + 1 : n - r] = cum[2 * r + 1 :] - cum[: n - 2 * r - 1]
        out[n - r :] = cum[-1:] - cum[n - 2 * r - 1 : n - r - 1]
        return out

    return along(along(arr, radius).T, radius).T


def guided_filter(guide: np.ndarray, src: np.ndarray, radius: int = 4, eps: float = 1e-3) -> np.ndarray:
    """Edge-preserving smoothing of src steered by a single-channel guide."""
    r = min(radius, (min(src.shape) - 1) // 2)
    if r < 1:
        return src.copy()
    ones = np.ones_like(src)
    n = _box_filter(ones, r)
    mean_i = _box_filter(guide, r) / n
    mean_p = _box_filter(src, r) / n
    cov_ip = _box_filter(guide * src, r) / n - mean_i * mean_p
    var_i = _box_filter(guide * guide, r) / n - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    mean_a = _box_filter(a, r) / n
    mean_b = _box_filter(b, r) / n
    return mean_a * guide + mean_b


def guided_filter_color(guide: np.ndarray, src: np.ndarray, radius: int = 4, eps: float = 1e-3) -> np.ndarray:
    """Guided filter with a 3-channel guide (local affine model per window).

    Regressing the target on all three color channels lets the filter keep
    any structure the RGB image can explain (per-channel mixes included)
    while still averaging away variation uncorrelated with the guide.
    """
    if guide.ndim != 3 or guide.shape[2] != 3:
        raise FilterError("color guided filter needs an (H, W, 3) guide")
    r = min(radius, (min(src.shape) - 1) // 2)
    if r < 1:
        return src.copy()
    n = _box_filter(np.ones_like(src), r)

    means = np.stack([_box_filter(guide[:, :, c], r) / n for c in range(3)], axis=-1)
    mean_p = _box_filter(src, r) / n
    cov_ip = np.stack(
        [_box_filter(guide[:, :, c] * src, r) / n - means[:, :, c] * mean_p for c in range(3)],
        axis=-1,
    )
    # symmetric 3x3 guide covariance per pixel, regularized by eps * I
    sigma = np.empty(src.shape + (3, 3))
    for c1 in range(3):
        for c2 in range(c1, 3):
            cov = (
                _box_filter(guide[:, :, c1] * guide[:, :, c2], r) / n
                - means[:, :, c1] * means[:, :, c2]
            )
            sigma[:, :, c1, c2] = cov
            sigma[:, :, c2, c1] = cov
    sigma[:, :, 0, 0] += eps
    sigma[:, :, 1, 1] += eps
    sigma[:, :, 2, 2] += eps

    a = np.linalg.solve(sigma, cov_ip[:, :, :, None])[:, :, :, 0]
    b = mean_p - np.einsum("ijc,ijc->ij", a, means)
    mean_a = np.stack([_box_filter(a[:, :, c], r) / n for c in range(3)], axis=-1)
    mean_b = _box_filter(b, r) / n
    return np.einsum("ijc,ijc->ij", mean_a, guide) + mean_b


def enhance(xd: Image, rgb: Image) -> Image:
    """RGB-guided smoothing plus unsharp masking, clamped to the input range.

    Stands in for the learned enhancement: one guided-filter pass
    (radius 4, eps 1e-3, full color guide) suppresses propagation noise the
    RGB image cannot explain, then unsharp masking with amount 0.5 restores
    edge contrast.
    """
    if xd.shape != rgb.shape[:2] and xd.shape != rgb.shape:
        raise FilterError("enhance requires dimension-matched images")
    src = xd.data
    if rgb.channels == 3:
        smoothed = guided_filter_color(rgb.data, src, radius=4, eps=1e-3)
    else:
        smoothed = guided_filter(gray_array(rgb), src, radius=4, eps=1e-3)
    sharp = smoothed + 0.5 * (smoothed - gaussian_filter(smoothed, sigma=1.0, mode="nearest"))
    out = np.clip(sharp, src.min(), src.max())
    return Image(out, units=xd.units)


def fuse_levels(enhanced: list[Image]) -> Image:
    """Per-pixel arithmetic mean over the surviving levels."""
    if not enhanced:
        raise FilterError("no levels to fuse")
    first = enhanced[0]
    for img in enhanced[1:]:
        if img.shape != first.shape:
            raise FilterError("levels must share dimensions")
    acc = np.zeros_like(first.data)
    for img in enhanced:
        acc = acc + img.data
    return Image(acc / len(enhanced), units=first.units)


# ---------------------------------------------------------------------------
# Patch grid and descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Tiling of an image into patch cells; remainder pixels join the last row/col."""

    height: int
    width: int
    patch: int = 32

    def __post_init__(self) -> None:
        if self.height < self.patch or self.width < self.patch:
            raise FilterError(
                f"image {self.height}x{self.width} smaller than patch size {self.patch}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch

    @property
    def cols(self) -> int:
        return self.width // self.patch

    @property
    def patches(self) -> int:
        return self.rows * self.cols

    def bounds(self, index: int) -> tuple[slice, slice]:
        """Pixel extent of patch `index` (row-major over the grid)."""
        pr, pc = divmod(index, self.cols)
        r0 = pr * self.patch
        c0 = pc * self.patch
        r1 = (pr + 1) * self.patch if pr < self.rows - 1 else self.height
        c1 = (pc + 1) * self.patch if pc < self.cols - 1 else self.width
        return slice(r0, r1), slice(c0, c1)


@dataclass(frozen=True)
class FeatureMatrix:
    """P x D descriptor matrix with unit-norm rows."""

    mat: np.ndarray

    def __post_init__(self) -> None:
        mat = np.asarray(self.mat, dtype=np.float64)
        if mat.ndim != 2:
            raise FilterError("feature matrix must be 2-D")
        norms = np.linalg.norm(mat, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise FilterError("feature rows must be L2-normalized")
        mat = np.ascontiguousarray(mat)
        mat.flags.writeable = False
        object.__setattr__(self, "mat", mat)


VOTE_FLOOR_FRAC = 0.2  # gradients below this fraction of the mean don't vote
CELL_GATE_FRAC = 0.05  # cells with less vote mass than this take the uniform histogram


def patch_descriptors(img: Image, grid: PatchGrid) -> FeatureMatrix:
    """Per-patch 4x4-cell, 8-bin gradient-orientation histograms.

    Orientations are taken mod pi, so inverting an image's contrast leaves
    its descriptors unchanged. Votes are square-root-saturated gradient
    magnitudes, soft-binned between the two nearest bin centers; gradients
    below a fraction of the image's mean magnitude count as texture noise
    and do not vote. Each cell histogram is normalized on its own (cells
    with negligible mass take the uniform histogram), so flat and textured
    cells compare structure rather than contrast across modalities. The
    concatenation is L2-normalized; an entirely voteless patch maps to the
    uniform unit vector.
    """
    gray = gray_array(img)
    if gray.shape != (grid.height, grid.width):
        raise FilterError("grid does not match image dimensions")
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    mean_mag = float(mag.mean())
    vote = np.where(mag >= VOTE_FLOOR_FRAC * mean_mag, np.sqrt(mag), 0.0)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bin_width = np.pi / DESCRIPTOR_BINS
    pos = theta / bin_width - 0.5
    lower = np.floor(pos)
    frac = pos - lower
    bin0 = lower.astype(np.int64) % DESCRIPTOR_BINS
    bin1 = (bin0 + 1) % DESCRIPTOR_BINS
    w0 = vote * (1.0 - frac)
    w1 = vote * frac

    rows = np.empty((grid.patches, DESCRIPTOR_DIM))
    uniform_cell = np.full(DESCRIPTOR_BINS, 1.0 / np.sqrt(DESCRIPTOR_BINS))
    uniform = np.full(DESCRIPTOR_DIM, 1.0 / np.sqrt(DESCRIPTOR_DIM))
    vote_scale = np.sqrt(mean_mag) if mean_mag > 0 else 0.0
    for index in range(grid.patches):
        rs, cs = grid.bounds(index)
        r_edges = np.linspace(rs.start, rs.stop, DESCRIPTOR_CELLS + 1).astype(np.int64)
        c_edges = np.linspace(cs.start, cs.stop, DESCRIPTOR_CELLS + 1).astype(np.int64)
        desc = np.zeros(DESCRIPTOR_DIM)
        cell = 0
        for i in range(DESCRIPTOR_CELLS):
            for j in range(DESCRIPTOR_CELLS):
                sl = (slice(r_edges[i], r_edges[i + 1]), slice(c_edges[j], c_edges[j + 1]))
                hist = np.bincount(
                    bin0[sl].ravel(), weights=w0[sl].ravel(), minlength=DESCRIPTOR_BINS
                ) + np.bincount(
                    bin1[sl].ravel(), weights=w1[sl].ravel(), minlength=DESCRIPTOR_BINS
                )
                hist = 0.25 * np.roll(hist, 1) + 0.5 * hist + 0.25 * np.roll(hist, -1)
                area = (r_edges[i + 1] - r_edges[i]) * (c_edges[j + 1] - c_edges[j])
                gate = CELL_GATE_FRAC * area * vote_scale
                if hist.sum() <= gate:
                    cell_vec = uniform_cell
                else:
                    cell_vec = hist / np.linalg.norm(hist)
                desc[cell * DESCRIPTOR_BINS : (cell + 1) * DESCRIPTOR_BINS] = cell_vec
                cell += 1
        norm = np.linalg.norm(desc)
        rows[index] = desc / norm if norm > 1e-12 else uniform
    return FeatureMatrix(rows)


# ---------------------------------------------------------------------------
# Similarity matrix and self-match score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityMatrix:
    """Scaled dot-product patch similarity: A = F_rgb @ F_x.T / tau."""

    a: np.ndarray
    tau: float = 0.1

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2:
            raise FilterError("similarity matrix must be 2-D")
        if self.tau <= 0:
            raise FilterError("tau must be positive")
        if np.abs(a).max() > 1.0 / self.tau + 1e-6:
            raise FilterError("similarity entries exceed the 1/tau bound")
        a = np.ascontiguousarray(a)
        a.flags.writeable = False
        object.__setattr__(self, "a", a)


def similarity_matrix(f_rgb: FeatureMatrix, f_x: FeatureMatrix, tau: float = 0.1) -> SimilarityMatrix:
    if f_rgb.mat.shape != f_x.mat.shape:
        raise FilterError("feature matrices must have matching shapes")
    return SimilarityMatrix(f_rgb.mat @ f_x.mat.T / tau, tau)


def self_match_score(a: SimilarityMatrix, lam: float = 0.1) -> float:
    """Alignment score: -Tr(A)/||A||_F + lam * ||offdiag(A)||_1 / ||A||_F.

    Lower is better aligned. Exposed as an evaluation metric.
    """
    mat = a.a
    if mat.shape[0] != mat.shape[1]:
        raise FilterError("self-match score requires a square matrix")
    fro = float(np.linalg.norm(mat))
    if fro <= 0.0:
        raise FilterError("self-match score undefined for the zero matrix")
    trace = float(np.trace(mat))
    off = float(np.abs(mat).sum() - np.abs(np.diag(mat)).sum())
    return -trace / fro + lam * off / fro


# ---------------------------------------------------------------------------
# Concentration-based patch rejection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterResult:
    sparse: SparseMap
    conf: ConfidenceMap
    rejected: Mask
    q: float
    threshold: float
    degenerate: bool
    rejected_patches: np.ndarray  # (P,) bool


def concentration_and_filter(xd: Image, a: SimilarityMatrix, grid: PatchGrid) -> FilterResult:
    """Reject low-self-similarity patches of a densified image.

    The diagonal's concentration q = Q50/Q99 sets the rejection budget: the
    (1-q)-quantile of the diagonal becomes the threshold, patches strictly
    below it are voided, and survivors carry their min-max-normalized
    diagonal score as per-pixel confidence for re-densification.
    """
    mat = a.a
    if mat.shape[0] != mat.shape[1] or mat.shape[0] != grid.patches:
        raise FilterError("similarity matrix does not match the patch grid")
    if xd.shape != (grid.height, grid.width):
        raise FilterError("image does not match the patch grid")
    d = np.diag(mat).astype(np.float64)
    q99 = quantile(d, 0.99)
    degenerate = q99 <= 0.0
    if degenerate:
        logger.warning("self-match degenerate (Q99 of diagonal <= 0); rejecting nothing")
        q = 1.0
        theta = -np.inf
        rejected_patches = np.zeros(grid.patches, dtype=bool)
    else:
        q = float(np.clip(quantile(d, 0.5) / q99, 0.0, 1.0))
        theta = quantile(d, 1.0 - q)
        rejected_patches = d < theta

    d_min, d_max = float(d.min()), float(d.max())
    span = d_max - d_min
    patch_conf = (d - d_min) / span if span > 1e-12 else np.ones_like(d)

    values = np.zeros((grid.height, grid.width))
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    conf = np.zeros((grid.height, grid.width))
    rejected_px = np.zeros((grid.height, grid.width), dtype=bool)
    for index in range(grid.patches):
        rs, cs = grid.bounds(index)
        if rejected_patches[index]:
            rejected_px[rs, cs] = True
        else:
            values[rs, cs] = xd.data[rs, cs]
            counts[rs, cs] = 1
            conf[rs, cs] = patch_conf[index]
    return FilterResult(
        sparse=SparseMap(values, counts),
        conf=ConfidenceMap(np.clip(conf, 0.0, 1.0)),
        rejected=Mask(rejected_px),
        q=q,
        threshold=float(theta),
        degenerate=degenerate,
        rejected_patches=rejected_patches,
    )


def fine_densify(
    rgb: Image,
    filtered: SparseMap,
    cm: ConfidenceMap,
    cfg: DensifyConfig | None = None,
) -> Image:
    """Single-level re-densification from the filtered map with A-derived confidence."""
    cfg = cfg or DensifyConfig()
    if filtered.num_known == 0:
        raise DensifyError("filtered map has no known pixels")
    return densify_level(rgb, filtered, cm, cfg)
