"""Cubic boxes, the anchor lattice, IoU, box coding, and label assignment.

All boxes are axis-aligned cubes in millimetres: center (cx, cy, cz) plus side
length d. The detector predicts on a grid with a fixed stride of 4 mm; each
grid cell carries one anchor per configured scale, centered at
((i + 0.5) * stride) per axis.

Anchor ordering matters everywhere downstream: flattened arrays enumerate
cells in (z, y, x) C order with the scale index innermost, matching the
(gz, gy, gx, n_scales, values) layout of the network head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ANCHOR_STRIDE = 4
DEFAULT_SCALES = (10.0, 40.0, 80.0)

# anchor label states
POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

IOU_POSITIVE = 0.5
IOU_NEGATIVE = 0.02


@dataclass(frozen=True)
class Box3:
    """Axis-aligned cube: center (cx, cy, cz) and side length d, in mm."""

    cx: float
    cy: float
    cz: float
    d: float

    @property
    def center(self):
        return (self.cx, self.cy, self.cz)


@dataclass(frozen=True)
class RegressionTarget:
    """Offsets of a ground-truth cube relative to an anchor cube.

    dx/dy/dz are center offsets in units of the anchor side; dd is the log
    ratio of the sides.
    """

    dx: float
    dy: float
    dz: float
    dd: float


def iou_cubes(a, b):
    """Intersection-over-union of two axis-aligned cubes."""
    ra, rb = a.d / 2.0, b.d / 2.0
    ov_x = min(a.cx + ra, b.cx + rb) - max(a.cx - ra, b.cx - rb)
    ov_y = min(a.cy + ra, b.cy + rb) - max(a.cy - ra, b.cy - rb)
    ov_z = min(a.cz + ra, b.cz + rb) - max(a.cz - ra, b.cz - rb)
    if ov_x <= 0 or ov_y <= 0 or ov_z <= 0:
        return 0.0
    inter = ov_x * ov_y * ov_z
    union = a.d ** 3 + b.d ** 3 - inter
    return inter / union


def iou_cubes_arrays(boxes, others):
    """Pairwise IoU matrix between two (n, 4) arrays of (cx, cy, cz, d) rows."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    others = np.atleast_2d(np.asarray(others, dtype=np.float64))
    ra = boxes[:, 3:4] / 2.0
    rb = others[:, 3:4].T / 2.0
    inter = None
    for k in range(3):
        lo = np.maximum(boxes[:, k:k + 1] - ra, others[None, :, k] - rb)
        hi = np.minimum(boxes[:, k:k + 1] + ra, others[None, :, k] + rb)
        ov = np.clip(hi - lo, 0.0, None)
        inter = ov if inter is None else inter * ov
    union = boxes[:, 3:4] ** 3 + (others[:, 3] ** 3)[None, :] - inter
    return inter / union


def encode_box(gt, anchor):
    """Encode a ground-truth cube against an anchor cube."""
    return RegressionTarget(
        (gt.cx - anchor.cx) / anchor.d,
        (gt.cy - anchor.cy) / anchor.d,
        (gt.cz - anchor.cz) / anchor.d,
        math.log(gt.d / anchor.d),
    )


def decode_box(target, anchor):
    """Exact inverse of encode_box."""
    return Box3(
        anchor.cx + target.dx * anchor.d,
        anchor.cy + target.dy * anchor.d,
        anchor.cz + target.dz * anchor.d,
        anchor.d * math.exp(target.dd),
    )


@dataclass
class AnchorGrid:
    """The anchor lattice over one input window.

    grid holds the per-axis cell counts (gx, gy, gz) = extent / 4; scales are
    the anchor side lengths in mm. Anchors enumerate as (z, y, x, scale) in
    C order, matching the network head layout.
    """

    grid: tuple[int, int, int]
    scales: tuple[float, ...]

    @property
    def stride(self):
        return ANCHOR_STRIDE

    @property
    def n_anchors(self):
        gx, gy, gz = self.grid
        return gx * gy * gz * len(self.scales)

    def boxes(self):
        """All anchors as a float64 array of shape (gz, gy, gx, n_scales, 4)."""
        gx, gy, gz = self.grid
        cx = (np.arange(gx) + 0.5) * ANCHOR_STRIDE
        cy = (np.arange(gy) + 0.5) * ANCHOR_STRIDE
        cz = (np.arange(gz) + 0.5) * ANCHOR_STRIDE
        s = len(self.scales)
        out = np.empty((gz, gy, gx, s, 4), dtype=np.float64)
        out[..., 0] = cx[None, None, :, None]
        out[..., 1] = cy[None, :, None, None]
        out[..., 2] = cz[:, None, None, None]
        out[..., 3] = np.asarray(self.scales, dtype=np.float64)
        return out

    def flat_boxes(self):
        """Anchors as an (n_anchors, 4) array in (z, y, x, scale) order."""
        return self.boxes().reshape(-1, 4)


def anchor_grid(patch_size, scales=DEFAULT_SCALES):
    """Anchor lattice for a cubic patch of the given side (mm)."""
    return anchor_grid_3d((patch_size, patch_size, patch_size), scales)


def anchor_grid_3d(extent, scales=DEFAULT_SCALES):
    """Anchor lattice for a rectangular (x, y, z) window, extents in mm."""
    for e in extent:
        if e % ANCHOR_STRIDE != 0 or e <= 0:
            raise ValueError(
                f"window extents must be positive multiples of {ANCHOR_STRIDE}, got {extent}")
    scales = tuple(float(s) for s in scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError(f"anchor scales must be positive, got {scales}")
    gx, gy, gz = (int(e) // ANCHOR_STRIDE for e in extent)
    return AnchorGrid((gx, gy, gz), scales)


@dataclass
class AnchorAssignment:
    """Per-anchor label state plus the matched ground-truth index.

    state holds POSITIVE/NEGATIVE/IGNORE per flattened anchor; gt_index is the
    argmax ground-truth index for positives and -1 elsewhere.
    """

    state: np.ndarray
    gt_index: np.ndarray

    @property
    def positive(self):
        return np.flatnonzero(self.state == POSITIVE)

    @property
    def negative(self):
        return np.flatnonzero(self.state == NEGATIVE)

    @property
    def ignored(self):
        return np.flatnonzero(self.state == IGNORE)


def assign_labels(grid, gt_boxes):
    """Label every anchor against the ground-truth cubes.

    Max-IoU strictly above IOU_POSITIVE -> positive (argmax GT, first index on
    ties); strictly below IOU_NEGATIVE -> negative; anything else is ignored.
    With no ground truth every anchor is negative. No anchor is force-matched:
    a ground-truth cube with no anchor above the positive threshold simply has
    no positive anchors.
    """
    n = grid.n_anchors
    if len(gt_boxes) == 0:
        return AnchorAssignment(
            np.full(n, NEGATIVE, dtype=np.int8), np.full(n, -1, dtype=np.int32)
        )
    gts = np.array([[b.cx, b.cy, b.cz, b.d] for b in gt_boxes], dtype=np.float64)
    iou = iou_cubes_arrays(grid.flat_boxes(), gts)
    best = iou.max(axis=1)
    state = np.full(n, IGNORE, dtype=np.int8)
    state[best < IOU_NEGATIVE] = NEGATIVE
    state[best > IOU_POSITIVE] = POSITIVE
    gt_index = np.where(state == POSITIVE, iou.argmax(axis=1), -1).astype(np.int32)
    return AnchorAssignment(state, gt_index)
