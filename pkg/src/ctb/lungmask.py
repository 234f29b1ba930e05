"""Lung field extraction: threshold, 2D/3D component filters, split, hull.

The pipeline mirrors classic intensity-based lung segmentation:

  1. binarize at -600 HU (air-like voxels set);
  2. per axial slice, drop 8-connected components that are tiny
     (< 0.3 cm^2), needle-thin (eccentricity > 0.99), or far from the slice
     center (> 6.2 cm);
  3. in 3D, keep 26-connected components with volume in [450, 7500] cm^3
     (this is what removes the exterior-air component);
  4. split the remaining tissue into left/right by eroding with growing ball
     radii (1..5 mm) until it falls apart, seeding the two largest pieces,
     and regrowing each seed over the original extent;
  5. fill small in-slice holes (< 4 cm^2, vessels and lesion shadows);
  6. replace each side's slice region with its 2D convex hull so wall-adjacent
     lesions stay inside the field.

All thresholds are inclusive on the "keep" side. Masks carry the volume's
spacing/origin; label values are 0 none, 1 left, 2 right.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.measure import label as sk_label, regionprops
from skimage.morphology import convex_hull_image

from .errors import DataError
from .volume import FILL_BYTE, NormalizedVolume, Volume, load_volume, save_volume

HU_THRESHOLD = -600
MIN_SLICE_AREA_MM2 = 30.0        # 0.3 cm^2
MAX_ECCENTRICITY = 0.99
MAX_CENTER_DIST_MM = 62.0        # 6.2 cm
MIN_COMPONENT_CM3 = 450.0
MAX_COMPONENT_CM3 = 7500.0
MAX_HOLE_AREA_MM2 = 400.0        # 4 cm^2
ERODE_RADII_MM = (1, 2, 3, 4, 5)

LABEL_NONE = 0
LABEL_LEFT = 1
LABEL_RIGHT = 2

_STRUCT_2D = np.ones((3, 3), dtype=bool)    # 8-connectivity
_STRUCT_3D = np.ones((3, 3, 3), dtype=bool)  # 26-connectivity


@dataclass
class BinaryMask:
    bits: np.ndarray  # bool, [z, y, x]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class LungMask:
    """Left/right lung labels on the volume grid; single_lung marks the
    fallback where the field never split and one side covers everything."""

    labels: np.ndarray  # uint8, [z, y, x]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    single_lung: bool = False

    def side_bits(self, side):
        return self.labels == (LABEL_LEFT if side == "left" else LABEL_RIGHT)

    def any_bits(self):
        return self.labels != LABEL_NONE


def binarize(vol, threshold=HU_THRESHOLD):
    """Set every voxel strictly below the HU threshold."""
    return BinaryMask(vol.voxels < threshold, vol.spacing, vol.origin)


def filter_slice_components(mask):
    """Apply the three per-slice 2D criteria, clearing failing components."""
    sx, sy, _ = mask.spacing
    pixel_area = sx * sy
    nz, ny, nx = mask.bits.shape
    center = (nx * sx / 2.0, ny * sy / 2.0)
    out = np.zeros_like(mask.bits)
    for k in range(nz):
        sl = mask.bits[k]
        if not sl.any():
            continue
        lab, n = ndimage.label(sl, structure=_STRUCT_2D)
        keep = np.zeros(n + 1, dtype=bool)
        for rp in regionprops(lab):
            if rp.area * pixel_area < MIN_SLICE_AREA_MM2:
                continue
            cy_mm = (rp.centroid[0] + 0.5) * sy
            cx_mm = (rp.centroid[1] + 0.5) * sx
            if np.hypot(cx_mm - center[0], cy_mm - center[1]) > MAX_CENTER_DIST_MM:
                continue
            if rp.eccentricity > MAX_ECCENTRICITY:
                continue
            keep[rp.label] = True
        out[k] = keep[lab]
    return BinaryMask(out, mask.spacing, mask.origin)


def filter_3d_components(mask):
    """Keep 26-connected components whose volume lies in [450, 7500] cm^3."""
    voxel_cm3 = float(np.prod(mask.spacing)) / 1000.0
    lab, n = ndimage.label(mask.bits, structure=_STRUCT_3D)
    if n == 0:
        return BinaryMask(np.zeros_like(mask.bits), mask.spacing, mask.origin)
    counts = np.bincount(lab.ravel())
    vols = counts * voxel_cm3
    keep = (vols >= MIN_COMPONENT_CM3) & (vols <= MAX_COMPONENT_CM3)
    keep[0] = False
    return BinaryMask(keep[lab], mask.spacing, mask.origin)


def _crop_slices(bits, margin=1):
    idx = np.nonzero(bits)
    out = []
    for ax, n in zip(idx, bits.shape):
        lo = max(int(ax.min()) - margin, 0)
        hi = min(int(ax.max()) + margin + 1, n)
        out.append(slice(lo, hi))
    return tuple(out)


def _two_seeds(bits, spacing):
    """Erode with growing ball radii until the field splits; return the two
    largest pieces, or None if it never does."""
    lab, n = ndimage.label(bits, structure=_STRUCT_3D)
    if n >= 2:
        eroded_lab, n_er = lab, n
    else:
        # edt > r is exactly binary erosion by a radius-r ball
        edt = ndimage.distance_transform_edt(bits, sampling=spacing[::-1])
        for r in ERODE_RADII_MM:
            er = edt > r
            eroded_lab, n_er = ndimage.label(er, structure=_STRUCT_3D)
            if n_er >= 2:
                break
        else:
            return None
    counts = np.bincount(eroded_lab.ravel())
    counts[0] = 0
    first, second = np.argsort(counts)[::-1][:2]
    return eroded_lab == first, eroded_lab == second


def split_and_smooth(mask):
    """Split the lung field into sides and fill small in-slice holes.

    Seeds are regrown by nearest-seed assignment over the original mask, so
    their union restores the full pre-erosion extent. If erosion up to 5 mm
    never yields two components the whole field becomes one lung and the
    mask is flagged single_lung (with a warning).
    """
    bits = mask.bits
    if not bits.any():
        raise DataError("lung mask is empty, nothing to split")
    win = _crop_slices(bits)
    sub = bits[win]
    spacing = mask.spacing

    labels = np.zeros(bits.shape, dtype=np.uint8)
    seeds = _two_seeds(sub, spacing)
    if seeds is None:
        warnings.warn("lung field never split; treating it as a single lung")
        side = np.zeros(sub.shape, dtype=np.uint8)
        side[sub] = _side_of_single(sub, bits.shape[2], win)
        labels[win] = side
        out = LungMask(labels, mask.spacing, mask.origin, single_lung=True)
    else:
        seed_a, seed_b = seeds
        # regrow: every original voxel joins the nearer seed (ties go to the
        # larger seed, which is seed_a)
        da = ndimage.distance_transform_edt(~seed_a, sampling=spacing[::-1])
        db = ndimage.distance_transform_edt(~seed_b, sampling=spacing[::-1])
        xs = np.nonzero(seed_a)[2]
        mean_a = xs.mean()
        mean_b = np.nonzero(seed_b)[2].mean()
        lab_a = LABEL_LEFT if mean_a <= mean_b else LABEL_RIGHT
        lab_b = LABEL_RIGHT if lab_a == LABEL_LEFT else LABEL_LEFT
        side = np.where(da <= db, lab_a, lab_b).astype(np.uint8)
        side[~sub] = LABEL_NONE
        labels[win] = side
        out = LungMask(labels, mask.spacing, mask.origin)

    _fill_small_holes(out)
    return out


def _side_of_single(sub, nx, win):
    # single-lung fallback: name the side by which half of the x range holds
    # the centroid
    cx = np.nonzero(sub)[2].mean() + win[2].start
    return LABEL_LEFT if cx <= (nx - 1) / 2.0 else LABEL_RIGHT


def _fill_small_holes(lm):
    sx, sy, _ = lm.spacing
    pixel_area = sx * sy
    max_pixels = MAX_HOLE_AREA_MM2 / pixel_area
    for side_label in (LABEL_LEFT, LABEL_RIGHT):
        side = lm.labels == side_label
        if not side.any():
            continue
        for k in range(side.shape[0]):
            sl = side[k]
            if not sl.any():
                continue
            filled = ndimage.binary_fill_holes(sl)
            holes = filled & ~sl
            if not holes.any():
                continue
            # 4-connected hole components, the dual of 8-connected foreground
            hlab, hn = ndimage.label(holes)
            hcounts = np.bincount(hlab.ravel())
            small = hcounts < max_pixels
            small[0] = False
            add = small[hlab]
            if add.any():
                lm.labels[k][add] = side_label


def convex_hull_slices(lm):
    """Replace each side's slice footprint with its 2D convex hull.

    Rare overlaps between the two hulls go to the side whose original slice
    centroid is nearer in x.
    """
    labels = lm.labels
    for k in range(labels.shape[0]):
        sl = labels[k]
        left = sl == LABEL_LEFT
        right = sl == LABEL_RIGHT
        hull_l = convex_hull_image(left) if left.any() else left
        hull_r = convex_hull_image(right) if right.any() else right
        both = hull_l & hull_r
        if both.any():
            cl = np.nonzero(left)[1].mean()
            cr = np.nonzero(right)[1].mean()
            xs = np.nonzero(both)[1]
            to_left = np.abs(xs - cl) <= np.abs(xs - cr)
            zz, xx = np.nonzero(both)
            hull_r[zz[to_left], xx[to_left]] = False
            hull_l[zz[~to_left], xx[~to_left]] = False
        out = np.zeros_like(sl)
        out[hull_l] = LABEL_LEFT
        out[hull_r] = LABEL_RIGHT
        labels[k] = out
    return lm


def extract_lung_mask(vol):
    """Run the whole pipeline on a resampled 1 mm volume."""
    m = binarize(vol)
    m = filter_slice_components(m)
    m = filter_3d_components(m)
    if not m.bits.any():
        raise DataError("no lung-sized component found")
    lm = split_and_smooth(m)
    return convex_hull_slices(lm)


def apply_mask(nv, lm):
    """Blank everything outside the lung field with the neutral byte."""
    if nv.voxels.shape != lm.labels.shape:
        raise ValueError("volume and mask shapes differ")
    kept = np.where(lm.labels != LABEL_NONE, nv.voxels, np.uint8(FILL_BYTE))
    return NormalizedVolume(kept, nv.spacing, nv.origin)


def bounding_box(lm):
    """Inclusive-exclusive (z, y, x) slice triple around all lung labels."""
    bits = lm.any_bits()
    if not bits.any():
        raise DataError("lung mask is empty")
    return _crop_slices(bits, margin=0)


def save_mask(lm, path):
    """Export the label field as a CTV volume (values 0/1/2)."""
    save_volume(Volume(lm.labels.astype(np.int16), lm.spacing, lm.origin), path)


def load_mask(path):
    vol = load_volume(path)
    bad = ~np.isin(vol.voxels, (LABEL_NONE, LABEL_LEFT, LABEL_RIGHT))
    if bad.any():
        raise DataError(f"{path}: mask contains values other than 0/1/2")
    return LungMask(vol.voxels.astype(np.uint8), vol.spacing, vol.origin)
