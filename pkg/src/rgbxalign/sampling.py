"""Mask-guided uniform seeding of homography-warped X values into void areas.

Matchers find nothing in texture-less regions (sky, walls, grass), so those
stay void after accumulation. Given an area mask for such regions, a small
fixed fraction of the still-void pixels is seeded with values from the
homography-warped X image at a fixed low confidence, giving densification
anchors that the later filtering stage can still reject.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import ConfidenceMap, Image, Mask, SparseMap


@dataclass(frozen=True)
class AreaSampleConfig:
    rate: float = 0.05
    fixed_conf: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("sampling rate must be in (0, 1]")
        if not 0.0 <= self.fixed_conf <= 1.0:
            raise ValueError("fixed confidence must be in [0, 1]")


def area_sample(
    sparse: SparseMap,
    conf: ConfidenceMap,
    warped_x: Image,
    validity: Mask,
    area_mask: Mask,
    cfg: AreaSampleConfig,
) -> tuple[SparseMap, ConfidenceMap]:
    """Seed ceil(rate * |E|) pixels of E = mask & void & warp-valid.

    Drawn uniformly without replacement (seeded); each drawn pixel takes the
    warped X value with count 1 and the configured fixed confidence. Existing
    non-void pixels are never touched. An empty eligible set returns the
    inputs unchanged.
    """
    shape = sparse.shape
    for other in (conf.shape, warped_x.shape, validity.shape, area_mask.shape):
        if other != shape:
            raise ValueError(f"dimension mismatch: {other} vs {shape}")
    if warped_x.channels != 1:
        raise ValueError("warped X image must be single-channel")

    eligible = area_mask.bits & ~sparse.known & validity.bits
    flat = np.flatnonzero(eligible)
    if flat.size == 0:
        return sparse, conf
    n_draw = math.ceil(cfg.rate * flat.size)
    rng = np.random.default_rng(np.random.SeedSequence((0xA3EA, cfg.seed)))
    chosen = flat[rng.choice(flat.size, size=n_draw, replace=False)]
    rows, cols = np.unravel_index(chosen, shape)

    values = np.array(sparse.values)
    counts = np.array(sparse.counts)
    confidence = np.array(conf.conf)
    values[rows, cols] = warped_x.data[rows, cols]
    counts[rows, cols] = 1
    confidence[rows, cols] = cfg.fixed_conf
    return SparseMap(values, counts), ConfidenceMap(confidence)
