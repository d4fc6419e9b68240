"""Confidence-aware sparse-to-dense propagation with RGB-guided affinities.

The recurrence blends, per pixel, an affinity-weighted average of the
neighborhood with the anchored known value:

    L[t+1] = (1 - Cs*Cm) * sum_k w_k * L[t]_k  +  Cs*Cm * Xm

Affinities are deterministic joint-bilateral weights derived from the RGB
guidance (color and spatial Gaussian kernels over 8 offsets at each of
several radii, normalized to sum to 1 per pixel), so every update is a
convex combination and the iteration stays inside the known value range.
Run at K ascending confidence thresholds, the per-level results feed the
fusion stage downstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DensifyError
from .imgcore import ConfidenceMap, Image, SparseMap, gray_array

logger = logging.getLogger(__name__)

# 8-connected ring, scaled by each radius; fixed order pins the floating-point
# summation sequence (the scalar reference recurrence must mirror it).
_RING = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class DensifyConfig:
    thresholds: tuple[float, ...] = (0.15, 0.3, 0.5)
    iterations: int = 24
    radii: tuple[int, ...] = (1, 2, 4)
    sigma_color: float = 0.05
    sigma_spatial: float = 1.5
    tol: float = 1e-4
    # when False, the recurrence anchors with the known-pixel indicator
    # instead of the matching confidence (thresholding still applies)
    use_confidence: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        deltas = tuple(self.thresholds)
        if deltas and (list(deltas) != sorted(deltas) or not all(0.0 <= d < 1.0 for d in deltas)):
            raise ValueError("thresholds must be ascending and within [0, 1)")
        if self.sigma_color <= 0 or self.sigma_spatial <= 0:
            raise ValueError("bandwidths must be positive")


@dataclass(frozen=True)
class AffinityField:
    """Per-pixel normalized neighbor weights.

    weights[k] pairs with offsets[k]; out-of-bounds neighbors carry weight 0
    and each pixel's weights sum to 1.
    """

    weights: np.ndarray  # (K, H, W)
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] != len(self.offsets):
            raise ValueError("weights must be (K, H, W) matching offsets")
        if not np.all(np.isfinite(w)) or w.min() < 0.0:
            raise ValueError("affinity weights must be finite and non-negative")
        sums = w.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("per-pixel affinity weights must sum to 1")
        w = np.ascontiguousarray(w)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class CertaintyMap:
    """Anchoring certainty in [0, 1]; zero on void pixels by construction."""

    cs: np.ndarray

    def __post_init__(self) -> None:
        cs = np.asarray(self.cs, dtype=np.float64)
        if cs.ndim != 2:
            raise ValueError("certainty raster must be 2-D")
        if not np.all(np.isfinite(cs)) or cs.min() < 0.0 or cs.max() > 1.0:
            raise ValueError("certainty values must be within [0, 1]")
        cs = np.ascontiguousarray(cs)
        cs.flags.writeable = False
        object.__setattr__(self, "cs", cs)


def offset_list(cfg: DensifyConfig) -> tuple[tuple[int, int], ...]:
    return tuple((r * a, r * b) for r in cfg.radii for (a, b) in _RING)


def _shifted(arr: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """arr sampled at (row+dr, col+dc), zero outside."""
    height, width = arr.shape
    out = np.zeros_like(arr)
    src_r = slice(max(0, dr), min(height, height + dr))
    dst_r = slice(max(0, -dr), min(height, height - dr))
    src_c = slice(max(0, dc), min(width, width + dc))
    dst_c = slice(max(0, -dc), min(width, width - dc))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def compute_affinities(rgb: Image, cfg: DensifyConfig | None = None) -> AffinityField:
    """Joint-bilateral guidance weights from the RGB image.

    Raw weight for offset (a, b) at radius r:
        exp(-(g(p) - g(p + (r*a, r*b)))^2 / (2 sigma_color^2))
        * exp(-r^2 / (2 sigma_spatial^2))
    with g the grayscale guidance; zero out of bounds, then normalized to
    sum to 1 at every pixel.
    """
    cfg = cfg or DensifyConfig()
    g = gray_array(rgb)
    height, width = g.shape
    if height < 2 or width < 2:
        raise DensifyError("guidance image too small for neighborhood affinities")
    offsets = offset_list(cfg)
    weights = np.zeros((len(offsets), height, width))
    inv_color = 1.0 / (2.0 * cfg.sigma_color**2)
    k = 0
    for r in cfg.radii:
        spatial = np.exp(-(r * r) / (2.0 * cfg.sigma_spatial**2))
        for a, b in _RING:
            dr, dc = r * a, r * b
            neighbor = _shifted(g, dr, dc)
            w = np.exp(-((g - neighbor) ** 2) * inv_color) * spatial
            # zero where the neighbor falls outside the raster
            inb = _shifted(np.ones_like(g), dr, dc)
            weights[k] = w * inb
            k += 1
    total = weights.sum(axis=0)
    if total.min() <= 0.0:
        raise DensifyError("pixel with no in-bounds neighbor")
    weights /= total
    return AffinityField(weights, offsets)


def certainty_map(sparse: SparseMap) -> CertaintyMap:
    """Hard anchoring: certainty 1 at known pixels, 0 at void ones."""
    return CertaintyMap(sparse.known.astype(np.float64))


def init_dense(sparse: SparseMap) -> Image:
    """Inverse-distance-weighted (power 2) fill from the 4 nearest known pixels."""
    known = sparse.known
    n_known = int(np.count_nonzero(known))
    if n_known == 0:
        raise DensifyError("cannot initialize from an all-void map")
    out = np.array(sparse.values, dtype=np.float64)
    void = ~known
    if not void.any():
        return Image(out)
    known_coords = np.argwhere(known)
    known_vals = sparse.values[known]
    void_coords = np.argwhere(void)
    k = min(4, n_known)
    dist, idx = cKDTree(known_coords).query(void_coords, k=k)
    dist = np.atleast_2d(dist.reshape(len(void_coords), k))
    idx = np.atleast_2d(idx.reshape(len(void_coords), k))
    w = 1.0 / (dist * dist)
    filled = (w * known_vals[idx]).sum(axis=1) / w.sum(axis=1)
    out[void] = filled
    return Image(out)


def propagate(
    l0: Image,
    aff: AffinityField,
    sparse: SparseMap,
    cs: CertaintyMap,
    cm: ConfidenceMap,
    cfg: DensifyConfig | None = None,
    step_sizes: list[float] | None = None,
) -> Image:
    """Iterate the confidence-aware recurrence to T steps or convergence.

    With cm identically 1 this degenerates to the plain certainty-anchored
    recurrence. Pixels where cs*cm == 1 reproduce the known value exactly.
    Appends the max-abs update of every iteration to `step_sizes` if given.
    """
    cfg = cfg or DensifyConfig()
    current = np.array(l0.data, dtype=np.float64)
    if current.ndim != 2:
        raise DensifyError("propagation operates on single-channel rasters")
    anchor = cs.cs * cm.conf
    xm = np.where(sparse.known, sparse.values, 0.0)
    known_vals = sparse.values[sparse.known]
    lo = min(current.min(), known_vals.min()) if known_vals.size else current.min()
    hi = max(current.max(), known_vals.max()) if known_vals.size else current.max()

    for _ in range(cfg.iterations):
        acc = np.zeros_like(current)
        for k, (dr, dc) in enumerate(aff.offsets):
            acc = acc + aff.weights[k] * _shifted(current, dr, dc)
        nxt = (1.0 - anchor) * acc + anchor * xm
        step = float(np.abs(nxt - current).max())
        if step_sizes is not None:
            step_sizes.append(step)
        current = nxt
        if not np.all(np.isfinite(current)):
            raise DensifyError("non-finite value during propagation")
        if step < cfg.tol:
            break
    if current.min() < lo - 1e-9 or current.max() > hi + 1e-9:
        raise DensifyError("propagation escaped the convex value bound")
    return Image(current, units=l0.units)


def threshold_sparse(
    sparse: SparseMap, conf: ConfidenceMap, delta: float
) -> tuple[SparseMap, ConfidenceMap]:
    """Keep only known pixels whose confidence reaches delta."""
    keep = sparse.known & (conf.conf >= delta)
    values = np.where(keep, sparse.values, 0.0)
    counts = np.where(keep, sparse.counts, 0)
    return SparseMap(values, counts), ConfidenceMap(np.where(keep, conf.conf, 0.0))


def densify_level(
    rgb_or_aff: Image | AffinityField,
    sparse: SparseMap,
    conf: ConfidenceMap,
    cfg: DensifyConfig,
    step_sizes: list[float] | None = None,
) -> Image:
    """Initialize and propagate a single sparse level."""
    aff = rgb_or_aff if isinstance(rgb_or_aff, AffinityField) else compute_affinities(rgb_or_aff, cfg)
    l0 = init_dense(sparse)
    if not cfg.use_confidence:
        conf = ConfidenceMap(sparse.known.astype(np.float64))
    return propagate(l0, aff, sparse, certainty_map(sparse), conf, cfg, step_sizes)


def densify_multilevel(
    rgb: Image,
    sparse: SparseMap,
    conf: ConfidenceMap,
    cfg: DensifyConfig | None = None,
) -> dict[float, Image]:
    """Densify at each confidence threshold; returns {delta: dense image}.

    Levels whose thresholded map keeps no pixel are omitted (and logged).
    Raises DensifyError when every level is empty.
    """
    cfg = cfg or DensifyConfig()
    if not cfg.thresholds:
        raise DensifyError("no thresholds configured")
    aff = compute_affinities(rgb, cfg)
    out: dict[float, Image] = {}
    for delta in cfg.thresholds:
        level_sparse, level_conf = threshold_sparse(sparse, conf, delta)
        if level_sparse.num_known == 0:
            logger.warning("threshold %.3f keeps no pixels; level omitted", delta)
            continue
        out[delta] = densify_level(aff, level_sparse, level_conf, cfg)
    if not out:
        raise DensifyError("all confidence levels are empty")
    return out
