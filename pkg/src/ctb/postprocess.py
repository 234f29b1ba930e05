"""From raw head outputs to a per-case analysis.

Inference runs on the 1 mm resampled, normalized, lung-masked volume. Raw
head outputs decode into cube detections in absolute mm (the annotation
frame); greedy NMS merges duplicates within and across windows. Each kept
detection is then assigned a lung side, checked for calcification against the
resampled HU volume, and mapped back to source-volume pixel coordinates for
reporting. Per-lung infection probability combines lesion confidences with a
noisy-or; effective lung volume counts mask voxels that still look aerated
and sit outside every detected lesion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .anchors import (DEFAULT_SCALES, Box3, anchor_grid_3d, iou_cubes)
from .errors import DataError, StageError
from .lungmask import (HU_THRESHOLD, LABEL_LEFT, LABEL_RIGHT, apply_mask,
                       extract_lung_mask)
from .net.model import FULL_HEAD_VALUES, MIN_DIVISOR
from .volume import (FILL_BYTE, LESION_TYPE_NAMES, normalize_hu, read_window,
                     resample_nearest)

CALC_HU_THRESHOLD = 120
CALC_MIN_VOXELS = 3

_SIDE_NAMES = {LABEL_LEFT: "left", LABEL_RIGHT: "right"}


@dataclass
class InferConfig:
    """Detection-time knobs.

    patch_size None fits one window to each lung's bounding box (padded to a
    multiple of 8); an integer tiles the joint lung bounding box with that
    cubic window and `overlap` mm of overlap (clamped to half the window so
    the stride stays positive).
    """

    threshold: float = 0.38
    nms_iou: float = 0.1
    patch_size: int | None = None
    overlap: int = 32
    scales: tuple = DEFAULT_SCALES

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 <= self.nms_iou < 1.0:
            raise ValueError(f"nms_iou must be in [0, 1), got {self.nms_iou}")
        if self.patch_size is not None:
            if self.patch_size % MIN_DIVISOR or self.patch_size <= 0:
                raise ValueError(
                    f"patch_size must be a positive multiple of {MIN_DIVISOR}, "
                    f"got {self.patch_size}")
        if self.overlap < 0:
            raise ValueError(f"overlap must be >= 0, got {self.overlap}")


@dataclass
class Detection:
    """One detected lesion.

    box is in absolute mm. lesion_type is 1..5 (0 when the model carries no
    type head). The pixel fields are filled by analyze_case against the
    source volume: slice_index is 1-based, y_px counts rows from the bottom
    of the slice, d_px is the side length in x pixels.
    """

    box: Box3
    confidence: float
    lesion_type: int = 0
    type_probs: np.ndarray | None = None
    laterality: int = 0
    side_fallback: bool = False
    calcified: bool = False
    calc_voxels: int = 0
    slice_index: int = 0
    x_px: int = 0
    y_px: int = 0
    d_px: int = 0

    @property
    def type_name(self):
        return LESION_TYPE_NAMES.get(self.lesion_type, "unknown")


@dataclass
class LungAnalysis:
    side: str
    detections: list
    infection_probability: float
    volume_cm3: float


@dataclass
class CaseAnalysis:
    case_id: str
    detections: list
    left: LungAnalysis
    right: LungAnalysis
    overall_probability: float
    single_lung: bool = False
    header: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _det_order(det):
    b = det.box
    return (-det.confidence, b.cx, b.cy, b.cz, b.d)


def decode_detections(raw, grid, threshold, origin=(0.0, 0.0, 0.0)):
    """Turn raw head outputs over one window into Detection objects.

    raw is (gz, gy, gx, n_scales, values); grid supplies the matching anchor
    boxes in window-local mm. Anchors whose sigmoid confidence is strictly
    above threshold are decoded against their anchor cube; origin (x, y, z)
    shifts the result into absolute mm. With a 5-value head there are no type
    scores: lesion_type stays 0.
    """
    raw = np.asarray(raw, dtype=np.float64)
    gx, gy, gz = grid.grid
    s = len(grid.scales)
    if raw.shape[:4] != (gz, gy, gx, s):
        raise ValueError(
            f"raw grid {raw.shape[:4]} does not match anchor grid {(gz, gy, gx, s)}")
    conf = _sigmoid(raw[..., 0])
    sel = conf > threshold
    if not sel.any():
        return []
    anchors = grid.boxes()[sel]
    preds = raw[sel]
    confs = conf[sel]
    ad = anchors[:, 3]
    cx = anchors[:, 0] + preds[:, 1] * ad + origin[0]
    cy = anchors[:, 1] + preds[:, 2] * ad + origin[1]
    cz = anchors[:, 2] + preds[:, 3] * ad + origin[2]
    d = ad * np.exp(preds[:, 4])
    typed = raw.shape[-1] == FULL_HEAD_VALUES
    probs = _softmax_rows(preds[:, 5:]) if typed else None
    out = []
    for i in range(len(confs)):
        if typed:
            tp = probs[i]
            lt = int(tp.argmax()) + 1
        else:
            tp, lt = None, 0
        out.append(Detection(Box3(float(cx[i]), float(cy[i]), float(cz[i]),
                                  float(d[i])),
                             float(confs[i]), lt, tp))
    out.sort(key=_det_order)
    return out


def nms(detections, iou_threshold=0.1):
    """Greedy non-maximum suppression.

    Detections are visited in confidence order (ties broken by coordinates);
    each kept one suppresses every later detection whose cube IoU with it
    exceeds the threshold.
    """
    pending = sorted(detections, key=_det_order)
    kept = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        pending = [d for d in pending if iou_cubes(best.box, d.box) <= iou_threshold]
    return kept


def _tile_starts(extent, window, stride):
    if extent <= window:
        return [0]
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def _bits_bbox(bits):
    idx = np.nonzero(bits)
    if idx[0].size == 0:
        return None
    return tuple((int(a.min()), int(a.max()) + 1) for a in idx)


def _fit_windows(mask):
    """One window per present lung, sized to its bbox padded up to /8."""
    windows = []
    for label in (LABEL_LEFT, LABEL_RIGHT):
        bbox = _bits_bbox(mask.labels == label)
        if bbox is None:
            continue
        corner = []
        size = []
        for ax, (lo, hi) in enumerate(bbox):
            n = mask.labels.shape[ax]
            ext = -((lo - hi) // MIN_DIVISOR) * MIN_DIVISOR
            start = min(lo, max(0, n - ext)) if ext <= n else 0
            corner.append(start)
            size.append(ext)
        windows.append((tuple(corner), tuple(size)))
    return windows


def _tiled_windows(mask, patch, overlap):
    bbox = _bits_bbox(mask.labels != 0)
    if bbox is None:
        return []
    overlap = min(overlap, patch // 2)
    stride = patch - overlap
    axes = []
    for lo, hi in bbox:
        axes.append([lo + s for s in _tile_starts(hi - lo, patch, stride)])
    windows = []
    for z0 in axes[0]:
        for y0 in axes[1]:
            for x0 in axes[2]:
                windows.append(((z0, y0, x0), (patch, patch, patch)))
    return windows


def infer_case(model, masked, mask, cfg=None):
    """Detect lesions over one masked, normalized, 1 mm volume.

    Returns NMS-merged detections in absolute mm, sorted by descending
    confidence. masked is the apply_mask output; mask supplies the lung
    bounding boxes that bound the compute.
    """
    cfg = cfg or InferConfig()
    if any(abs(s - 1.0) > 1e-6 for s in masked.spacing):
        raise ValueError(f"inference expects 1 mm voxels, got spacing {masked.spacing}")
    if cfg.patch_size is None:
        windows = _fit_windows(mask)
    else:
        windows = _tiled_windows(mask, cfg.patch_size, cfg.overlap)
    if not windows:
        raise DataError("mask holds no lung voxels")
    ox, oy, oz = masked.origin
    found = []
    for corner, size in windows:
        win = read_window(masked.voxels, corner, size).astype(np.float32) / 255.0
        raw = model.forward(win)
        grid = anchor_grid_3d((size[2], size[1], size[0]), cfg.scales)
        shift = (ox + corner[2], oy + corner[1], oz + corner[0])
        found.extend(decode_detections(raw, grid, cfg.threshold, shift))
    return nms(found, cfg.nms_iou)


def noisy_or(probabilities):
    """Combine independent per-lesion probabilities: 1 - prod(1 - p)."""
    acc = 1.0
    for p in probabilities:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
        acc *= 1.0 - p
    return 1.0 - acc


def _nearest_index(coord, origin, spacing):
    # voxel i covers centers at origin + (i + 0.5) * spacing; ties go to the
    # lower index, same rule as the resampler
    f = (coord - origin) / spacing - 0.5
    return int(math.ceil(f - 0.5))


def _box_index_window(box, shape, spacing, origin):
    """Clipped [z, y, x] slices of voxels whose centers fall inside the box."""
    h = box.d / 2.0
    ctr = (box.cx, box.cy, box.cz)
    dims = (shape[2], shape[1], shape[0])
    lo, hi = [], []
    for ax in range(3):
        o, s = origin[ax], spacing[ax]
        a = math.ceil((ctr[ax] - h - o) / s - 0.5)
        b = math.floor((ctr[ax] + h - o) / s - 0.5) + 1
        lo.append(max(int(a), 0))
        hi.append(min(int(b), dims[ax]))
    return slice(lo[2], hi[2]), slice(lo[1], hi[1]), slice(lo[0], hi[0])


def assign_laterality(detection, mask):
    """Pick the lung side a detection belongs to.

    Majority vote of mask labels inside the cube; when the cube covers no
    labeled voxel (or the vote ties) fall back to comparing the cube center
    against the median x of all lung voxels, flagging the fallback.
    """
    win = _box_index_window(detection.box, mask.labels.shape,
                            mask.spacing, mask.origin)
    counts = np.bincount(mask.labels[win].ravel(), minlength=3)
    if counts[LABEL_LEFT] != counts[LABEL_RIGHT]:
        side = LABEL_LEFT if counts[LABEL_LEFT] > counts[LABEL_RIGHT] else LABEL_RIGHT
        return side, False
    xs = np.nonzero(mask.labels)[2]
    if xs.size == 0:
        raise DataError("mask holds no lung voxels")
    midline = mask.origin[0] + (float(np.median(xs)) + 0.5) * mask.spacing[0]
    side = LABEL_LEFT if detection.box.cx <= midline else LABEL_RIGHT
    return side, True


def detect_calcification(vol, box):
    """Look for a calcified core inside one lesion cube.

    Counts the largest 26-connected cluster of voxels above 120 HU within the
    cube; at least 3 voxels counts as calcified. Returns (calcified, voxels).
    """
    win = _box_index_window(box, vol.voxels.shape, vol.spacing, vol.origin)
    dense = vol.voxels[win] > CALC_HU_THRESHOLD
    if not dense.any():
        return False, 0
    labels, n = ndimage.label(dense, structure=np.ones((3, 3, 3), dtype=bool))
    largest = int(np.bincount(labels.ravel())[1:].max())
    return largest >= CALC_MIN_VOXELS, largest


def lung_volume(vol, mask, side, lesion_boxes=()):
    """Effective volume of one lung in cm3.

    Slice by slice, counts mask voxels of that side that are still aerated
    (HU below -600, the same cut that seeds the mask) and outside every
    lesion cube, then scales by the voxel volume.
    """
    bits = mask.side_bits(side)
    blocked = np.zeros(bits.shape, dtype=bool)
    for box in lesion_boxes:
        win = _box_index_window(box, bits.shape, vol.spacing, vol.origin)
        blocked[win] = True
    count = 0
    for z in range(bits.shape[0]):
        m = bits[z]
        if not m.any():
            continue
        keep = m & (vol.voxels[z] < HU_THRESHOLD) & ~blocked[z]
        count += int(keep.sum())
    sx, sy, sz = vol.spacing
    return count * sx * sy * sz / 1000.0


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _pipeline(vol, model, cfg):
    """resample -> normalize -> mask -> detect, each failure stage-tagged."""
    res = _run_stage("resample", resample_nearest, vol, 1.0)
    nv = _run_stage("normalize", normalize_hu, res)
    lm = _run_stage("lungmask", extract_lung_mask, res)
    masked = _run_stage("mask", apply_mask, nv, lm)
    detections = _run_stage("detect", infer_case, model, masked, lm, cfg)
    return res, lm, detections


def detect_case(vol, model, cfg=None):
    """Detections (absolute mm) for one raw volume; no per-lung analysis."""
    _, _, detections = _pipeline(vol, model, cfg or InferConfig())
    return detections


def analyze_case(vol, model, cfg=None, case_id="case", header=None):
    """Full quantitative analysis of one CT volume.

    Resamples to 1 mm, normalizes, extracts and applies the lung mask, runs
    detection, then assigns sides, checks calcification, measures effective
    lung volumes, and combines lesion confidences into per-lung and overall
    infection probabilities. Pixel report fields are mapped back to the
    source volume's grid. Failures outside bad-input cases surface as
    StageError tagged with the stage that broke.
    """
    if model.cfg.head_values != FULL_HEAD_VALUES:
        raise ValueError("analysis needs a typed detection head (10 values)")
    cfg = cfg or InferConfig()
    res, lm, detections = _pipeline(vol, model, cfg)

    def finalize():
        ox, oy, oz = vol.origin
        sx, sy, sz = vol.spacing
        nz, ny, nx = vol.voxels.shape
        per_side = {LABEL_LEFT: [], LABEL_RIGHT: []}
        for det in detections:
            side, fell_back = assign_laterality(det, lm)
            det.laterality = side
            det.side_fallback = fell_back
            det.calcified, det.calc_voxels = detect_calcification(res, det.box)
            ix = min(max(_nearest_index(det.box.cx, ox, sx), 0), nx - 1)
            iy = min(max(_nearest_index(det.box.cy, oy, sy), 0), ny - 1)
            iz = min(max(_nearest_index(det.box.cz, oz, sz), 0), nz - 1)
            det.slice_index = iz + 1
            det.x_px = ix
            det.y_px = (ny - 1) - iy
            det.d_px = max(1, int(math.ceil(det.box.d / sx - 0.5)))
            per_side[side].append(det)
        lungs = {}
        for label, side in _SIDE_NAMES.items():
            dets = sorted(per_side[label], key=_det_order)
            vol_cm3 = lung_volume(res, lm, side, [d.box for d in dets])
            ip = noisy_or([d.confidence for d in dets])
            lungs[side] = LungAnalysis(side, dets, ip, vol_cm3)
        overall = noisy_or([d.confidence for d in detections])
        provenance = {"threshold": cfg.threshold, "nms_iou": cfg.nms_iou,
                      "model": model.fingerprint()}
        return CaseAnalysis(case_id, sorted(detections, key=_det_order),
                            lungs["left"], lungs["right"], overall,
                            single_lung=lm.single_lung, header=dict(header or {}),
                            provenance=provenance)

    return _run_stage("analyze", finalize)
