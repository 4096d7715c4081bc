"""Spoof-region proposals from score maps, and the fixed ablation regions."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, InputSizeError

MIN_REGION = 64
MAX_REGION = 256
DOWNSAMPLE = 16
ALIGNED_SIDE = 256


class RegionStrategy(str, enum.Enum):
    SELF_SUPERVISED = "self_supervised"
    GLOBAL = "global"
    FIXED_EYE = "fixed_eye"
    FIXED_NOSE = "fixed_nose"
    FIXED_MOUTH = "fixed_mouth"
    RANDOM = "random"


@dataclass(frozen=True)
class Region:
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def inside(self, image_height: int, image_width: int) -> bool:
        return (
            self.top >= 0
            and self.left >= 0
            and self.height >= 1
            and self.width >= 1
            and self.bottom <= image_height
            and self.right <= image_width
        )


# Rows/cols on the 256x256 aligned template.  Configurable by passing a
# different table to ``fixed_region``.
FIXED_REGIONS = {
    "eye": Region(48, 32, 72, 192),
    "nose": Region(96, 80, 80, 96),
    "mouth": Region(160, 64, 72, 128),
}


def normalize_score_map(scores: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    scores = np.asarray(scores)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def hard_gate(normalized: np.ndarray, tau: float = 0.5) -> np.ndarray:
    return (np.asarray(normalized) >= tau).astype(np.uint8)


def spoof_mask(scores: np.ndarray, tau: float = 0.5) -> np.ndarray:
    return hard_gate(normalize_score_map(scores), tau)


def _check_dims(image_dims, min_side: int, max_side: int) -> tuple[int, int]:
    h, w = int(image_dims[0]), int(image_dims[1])
    if min_side < 1 or max_side < min_side:
        raise InputSizeError(f"invalid region side bounds [{min_side}, {max_side}]")
    if h < min_side or w < min_side:
        raise InputSizeError(f"image {h}x{w} is smaller than the minimum region side {min_side}")
    return h, w


def sample_region_size(image_dims, rng: np.random.Generator, min_side=MIN_REGION, max_side=MAX_REGION):
    """(height, width), each uniform over the integers in [min_side, min(max_side, side)]."""
    h, w = _check_dims(image_dims, min_side, max_side)
    rh = int(rng.integers(min_side, min(max_side, h), endpoint=True))
    rw = int(rng.integers(min_side, min(max_side, w), endpoint=True))
    return rh, rw


def _fit(center: int, size: int, limit: int) -> int:
    # start of a length-`size` window centred at `center`, shifted to fit [0, limit)
    start = center - size // 2
    return min(max(start, 0), limit - size)


def _resolve_size(image_dims, rng, min_side, max_side, size):
    if size is None:
        return sample_region_size(image_dims, rng, min_side, max_side)
    h, w = _check_dims(image_dims, min_side, max_side)
    rh, rw = int(size[0]), int(size[1])
    if not (min_side <= rh <= min(max_side, h) and min_side <= rw <= min(max_side, w)):
        raise InputSizeError(f"region size {rh}x{rw} violates bounds for a {h}x{w} image")
    return rh, rw


def sample_random_region(
    image_dims, rng: np.random.Generator, min_side=MIN_REGION, max_side=MAX_REGION, size=None
) -> Region:
    """A uniformly placed rectangle; ``size`` fixes (height, width) instead of sampling it."""
    h, w = _check_dims(image_dims, min_side, max_side)
    rh, rw = _resolve_size((h, w), rng, min_side, max_side, size)
    top = int(rng.integers(0, h - rh, endpoint=True))
    left = int(rng.integers(0, w - rw, endpoint=True))
    return Region(top, left, rh, rw)


def sample_spoof_center(mask: np.ndarray, image_dims, rng: np.random.Generator, downsample=DOWNSAMPLE):
    """A pixel drawn uniformly from the image area covered by mask-1 cells.

    Each cell (i, j) owns the pixel block [d*i, d*i+d) x [d*j, d*j+d),
    clipped to the image.  Returns ``None`` for a missing or all-zero mask.
    """
    if mask is None:
        return None
    h, w = int(image_dims[0]), int(image_dims[1])
    cells = np.argwhere(np.asarray(mask) > 0)
    if len(cells) == 0:
        return None
    r0 = cells[:, 0] * downsample
    c0 = cells[:, 1] * downsample
    heights = np.clip(np.minimum(r0 + downsample, h) - r0, 0, None)
    widths = np.clip(np.minimum(c0 + downsample, w) - c0, 0, None)
    areas = heights * widths
    if areas.sum() == 0:
        return None
    # weight cells by area so every covered pixel is equally likely
    k = int(rng.choice(len(cells), p=areas / areas.sum()))
    cy = int(r0[k] + rng.integers(0, heights[k]))
    cx = int(c0[k] + rng.integers(0, widths[k]))
    return cy, cx


def sample_spoof_region(
    mask: np.ndarray,
    image_dims,
    rng: np.random.Generator,
    min_side=MIN_REGION,
    max_side=MAX_REGION,
    size=None,
    downsample=DOWNSAMPLE,
    return_center: bool = False,
):
    """Rectangle whose (pre-shift) centre lies on a detected spoof pixel.

    The rectangle is shifted, never shrunk, to fit the image.  An all-zero
    mask falls back to :func:`sample_random_region`.
    """
    h, w = _check_dims(image_dims, min_side, max_side)
    rh, rw = _resolve_size((h, w), rng, min_side, max_side, size)
    center = sample_spoof_center(mask, (h, w), rng, downsample)
    if center is None:
        region = sample_random_region((h, w), rng, min_side, max_side, size=(rh, rw))
    else:
        region = Region(_fit(center[0], rh, h), _fit(center[1], rw, w), rh, rw)
    return (region, center) if return_center else region


def fixed_region(kind: str, image_dims=(ALIGNED_SIDE, ALIGNED_SIDE), table=None) -> Region:
    table = FIXED_REGIONS if table is None else table
    if tuple(int(d) for d in image_dims[:2]) != (ALIGNED_SIDE, ALIGNED_SIDE):
        raise InputSizeError(
            f"fixed {kind} region is defined on {ALIGNED_SIDE}x{ALIGNED_SIDE} aligned faces, "
            f"got {image_dims[0]}x{image_dims[1]}"
        )
    try:
        return table[kind]
    except KeyError:
        raise ValueError(f"unknown fixed region {kind!r}; expected one of {sorted(table)}") from None


def crop(image: np.ndarray, region: Region) -> np.ndarray:
    """Copy of ``image[top:bottom, left:right]`` for an (h, w, c) image."""
    h, w = image.shape[:2]
    if not region.inside(h, w):
        raise BoundsError(f"{region} does not fit inside a {h}x{w} image")
    return image[region.top : region.bottom, region.left : region.right].copy()


def upscale_mask(mask: np.ndarray, image_dims, downsample=DOWNSAMPLE) -> np.ndarray:
    """Nearest-neighbour block upscale of a cell mask to pixel resolution."""
    big = np.repeat(np.repeat(np.asarray(mask), downsample, axis=0), downsample, axis=1)
    return big[: image_dims[0], : image_dims[1]]
