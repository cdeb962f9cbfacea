"""Convolutional feature masking.

Pixels are 1-based ``(u, v)`` = (column, row); pixel ``u`` covers the
continuous span ``[u - 1, u]``. Feature cells are 1-based as well, and pixel
``u`` lands on cell ``round((u - 1) / stride + 1)`` with halves rounded away
from zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BBox, ValidationError

log = logging.getLogger(__name__)

FEATURE_STRIDE = 16


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def map_pixel_to_feature(u: int, v: int, stride: int = FEATURE_STRIDE) -> tuple[int, int]:
    if isinstance(u, (int, np.integer)) and isinstance(v, (int, np.integer)):
        # exact integer form of floor((p - 1) / stride + 1.5)
        return (
            (2 * (int(u) - 1) + 3 * stride) // (2 * stride),
            (2 * (int(v) - 1) + 3 * stride) // (2 * stride),
        )
    return round_half_away((u - 1) / stride + 1), round_half_away((v - 1) / stride + 1)


def feature_extent(pixels: int, stride: int = FEATURE_STRIDE) -> int:
    """Cells needed along one axis so that every pixel maps inside the grid."""
    return map_pixel_to_feature(pixels, pixels, stride)[0]


def pixel_span(lo: float, hi: float) -> tuple[int, int]:
    """1-based inclusive range of pixels whose squares overlap ``[lo, hi]``."""
    return int(math.floor(lo)) + 1, int(math.ceil(hi))


@dataclass
class FeatureGrid:
    """Channels x rows x cols feature tensor at ``stride`` pixels per cell."""

    values: np.ndarray
    stride: int = FEATURE_STRIDE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValidationError(f"feature grid must be 3-D, got shape {self.values.shape}")

    @classmethod
    def zeros(cls, channels: int, width: int, height: int, stride: int = FEATURE_STRIDE):
        shape = (channels, feature_extent(height, stride), feature_extent(width, stride))
        return cls(np.zeros(shape), stride)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height_f(self) -> int:
        return self.values.shape[1]

    @property
    def width_f(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class MaskPlan:
    image_id: str
    class_index: int
    omega: BBox | None
    mapped_cells: frozenset[tuple[int, int]] = field(default_factory=frozenset)


def plan_mask(
    obj: BBox,
    tau: float,
    rng: np.random.Generator | int | None,
    *,
    stride: int = FEATURE_STRIDE,
    image_id: str = "",
    class_index: int = 0,
) -> MaskPlan:
    """Pick a random sub-box covering a ``tau`` share of ``obj`` and list its feature cells.

    The sub-box keeps the aspect ratio of ``obj``: each side is scaled by
    sqrt(tau) and rounded to whole pixels (at least one). Its position is
    uniform over the placements that keep it inside ``obj``.
    """
    if not 0.0 <= tau < 1.0:
        raise ValidationError(f"masking ratio {tau} outside [0, 1)")
    if obj.area <= 0:
        raise ValidationError(f"cannot mask a zero-area box {obj.to_list()}")
    if tau == 0.0:
        return MaskPlan(image_id, class_index, None, frozenset())
    rng = np.random.default_rng(rng)
    u_lo, u_hi = pixel_span(obj.x_min, obj.x_max)
    v_lo, v_hi = pixel_span(obj.y_min, obj.y_max)
    n_u, n_v = u_hi - u_lo + 1, v_hi - v_lo + 1
    scale = math.sqrt(tau)
    w = min(max(round_half_away(n_u * scale), 1), n_u)
    h = min(max(round_half_away(n_v * scale), 1), n_v)
    u0 = u_lo + int(rng.integers(0, n_u - w + 1))
    v0 = v_lo + int(rng.integers(0, n_v - h + 1))
    u1, v1 = u0 + w - 1, v0 + h - 1
    # the mapping is monotone, so the touched cells form a rectangle
    cu0, cv0 = map_pixel_to_feature(u0, v0, stride)
    cu1, cv1 = map_pixel_to_feature(u1, v1, stride)
    cells = frozenset((cu, cv) for cu in range(cu0, cu1 + 1) for cv in range(cv0, cv1 + 1))
    omega = BBox(float(u0 - 1), float(v0 - 1), float(u1), float(v1))
    return MaskPlan(image_id, class_index, omega, cells)


def apply_mask(grid: FeatureGrid, *plans: MaskPlan) -> FeatureGrid:
    """Copy of ``grid`` with every planned cell zeroed across all channels."""
    out = grid.values.copy()
    for plan in plans:
        for cu, cv in plan.mapped_cells:
            if 1 <= cu <= grid.width_f and 1 <= cv <= grid.height_f:
                out[:, cv - 1, cu - 1] = 0.0
            else:
                log.warning(
                    "mask cell (%d, %d) outside %dx%d grid; clipped",
                    cu, cv, grid.width_f, grid.height_f,
                )
    return FeatureGrid(out, grid.stride)
