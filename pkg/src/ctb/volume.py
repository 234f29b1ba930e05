"""CT volumes, lesion annotations, and their on-disk formats.

A volume is a dense int16 Hounsfield grid with per-axis spacing and a physical
origin. The voxel at index (ix, iy, iz) covers the axis-aligned millimetre box
[origin + i*spacing, origin + (i+1)*spacing), so its center sits at
origin + (i + 0.5) * spacing. Arrays are stored numpy-style as [z, y, x] while
all public geometry (dims, spacing, origin, annotation coordinates) is ordered
(x, y, z).

CTV file format: a single ASCII header line

    CTV1 nx ny nz sx sy sz ox oy oz\n

followed by nx*ny*nz little-endian int16 values, x varying fastest, then y,
then z. That payload order is exactly the C order of the [z, y, x] array.

Annotation CSV: header ``case_id,x_mm,y_mm,z_mm,d_mm,type`` with one cubic
lesion box per row, coordinates in the resampled 1 mm frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import Box3
from .errors import DataError

HU_MIN = -1200
HU_MAX = 600
HU_SPAN = HU_MAX - HU_MIN

# byte image of HU 0; doubles as the fill value for masked-out space
FILL_BYTE = 170

LESION_TYPE_NAMES = {
    1: "miliary",
    2: "infiltrative",
    3: "caseous",
    4: "tuberculoma",
    5: "cavitary",
}

CTV_MAGIC = "CTV1"
ANNOTATION_FIELDS = ("case_id", "x_mm", "y_mm", "z_mm", "d_mm", "type")


def _check_geometry(voxels, spacing, origin, dtype, what):
    if voxels.dtype != dtype:
        raise ValueError(f"{what} voxels must be {dtype}, got {voxels.dtype}")
    if voxels.ndim != 3 or min(voxels.shape) < 1:
        raise ValueError(f"{what} voxels must be a non-empty 3D array, got shape {voxels.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive floats, got {spacing}")
    if len(origin) != 3:
        raise ValueError(f"origin must have three components, got {origin}")


@dataclass
class Volume:
    """Hounsfield voxel grid. voxels[z, y, x], spacing/origin are (x, y, z) mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        _check_geometry(self.voxels, self.spacing, self.origin, np.int16, "Volume")

    @property
    def dims(self):
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)


@dataclass
class NormalizedVolume:
    """Byte voxel grid after windowing; same geometry conventions as Volume."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        _check_geometry(self.voxels, self.spacing, self.origin, np.uint8, "NormalizedVolume")

    @property
    def dims(self):
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)


@dataclass
class Annotation:
    """One ground-truth lesion: a cubic box plus its type code (1..5)."""

    case_id: str
    box: Box3
    lesion_type: int

    def __post_init__(self):
        if self.lesion_type not in LESION_TYPE_NAMES:
            raise DataError(f"lesion type must be 1..5, got {self.lesion_type}")
        if not self.box.d > 0:
            raise DataError(f"lesion diameter must be positive, got {self.box.d}")


def _fmt_float(x):
    # repr of a Python float is the shortest string that round-trips
    return repr(float(x))


def save_volume(vol, path):
    """Write a Volume to a CTV file (header line + int16 LE payload)."""
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    header = " ".join(
        [CTV_MAGIC, str(nx), str(ny), str(nz)]
        + [_fmt_float(v) for v in (sx, sy, sz, ox, oy, oz)]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(vol.voxels, dtype="<i2").tobytes())


def load_volume(path):
    """Read a CTV file back into a Volume.

    Raises DataError on a bad magic, malformed header, non-positive spacing,
    or payload size mismatch.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing CTV header line")
    try:
        tokens = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: header is not ASCII") from exc
    if len(tokens) != 10 or tokens[0] != CTV_MAGIC:
        raise DataError(f"{path}: expected '{CTV_MAGIC} nx ny nz sx sy sz ox oy oz'")
    try:
        nx, ny, nz = (int(t) for t in tokens[1:4])
        sx, sy, sz, ox, oy, oz = (float(t) for t in tokens[4:10])
    except ValueError as exc:
        raise DataError(f"{path}: malformed header numbers") from exc
    if min(nx, ny, nz) < 1:
        raise DataError(f"{path}: non-positive dims {(nx, ny, nz)}")
    if min(sx, sy, sz) <= 0:
        raise DataError(f"{path}: non-positive spacing {(sx, sy, sz)}")
    payload = raw[nl + 1:]
    expected = 2 * nx * ny * nz
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    voxels = np.frombuffer(payload, dtype="<i2").reshape(nz, ny, nx).astype(np.int16)
    return Volume(voxels, (sx, sy, sz), (ox, oy, oz))


def resample_dims(dims, spacing, target=1.0):
    """Output voxel counts for resampling: round-half-up of physical extent / target."""
    out = tuple(int(np.floor(n * s / target + 0.5)) for n, s in zip(dims, spacing))
    if min(out) < 1:
        raise ValueError(f"resampling {dims} at spacing {spacing} collapses to {out}")
    return out


def _nearest_index_map(n_out, t, n_in, s):
    # output voxel center (j + 0.5) * t; nearest source center (i + 0.5) * s;
    # equidistant ties take the lower index, hence ceil(f - 0.5) not round
    f = (np.arange(n_out) + 0.5) * (t / s) - 0.5
    idx = np.ceil(f - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_nearest(vol, target=1.0):
    """Nearest-neighbor resample onto an isotropic grid (default 1 mm)."""
    if target <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    if (sx, sy, sz) == (target, target, target):
        return Volume(vol.voxels.copy(), vol.spacing, vol.origin)
    mx, my, mz = resample_dims((nx, ny, nz), (sx, sy, sz), target)
    ix = _nearest_index_map(mx, target, nx, sx)
    iy = _nearest_index_map(my, target, ny, sy)
    iz = _nearest_index_map(mz, target, nz, sz)
    voxels = vol.voxels[np.ix_(iz, iy, ix)]
    return Volume(np.ascontiguousarray(voxels), (target, target, target), vol.origin)


def normalize_hu(vol):
    """Window HU to [HU_MIN, HU_MAX] and map linearly onto bytes 0..255.

    byte = round_half_up((clip(HU) - HU_MIN) * 255 / HU_SPAN), computed in
    integer arithmetic so boundary values are exact: HU_MIN -> 0, 0 -> 170,
    HU_MAX -> 255.
    """
    h = np.clip(vol.voxels, HU_MIN, HU_MAX).astype(np.int64)
    num = (h - HU_MIN) * 255
    b = (2 * num + HU_SPAN) // (2 * HU_SPAN)
    return NormalizedVolume(b.astype(np.uint8), vol.spacing, vol.origin)


def normalize_value(hu):
    """Byte image of a single HU value (or array), same rule as normalize_hu."""
    h = np.clip(np.asarray(hu, dtype=np.int64), HU_MIN, HU_MAX)
    b = (2 * (h - HU_MIN) * 255 + HU_SPAN) // (2 * HU_SPAN)
    return b.astype(np.uint8) if b.ndim else int(b)


def denormalize(byte):
    """Inverse of the byte map up to quantization: HU = b * HU_SPAN / 255 + HU_MIN."""
    return np.asarray(byte, dtype=np.float64) * (HU_SPAN / 255.0) + HU_MIN


def read_window(voxels, corner, size, fill=FILL_BYTE):
    """Window of a [z, y, x] array; out-of-bounds voxels read as fill."""
    out = np.full(size, fill, dtype=voxels.dtype)
    src = []
    dst = []
    for ax in range(3):
        lo = max(corner[ax], 0)
        hi = min(corner[ax] + size[ax], voxels.shape[ax])
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - corner[ax], hi - corner[ax]))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def save_annotations(annotations, path):
    """Write lesion annotations as the interchange CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_FIELDS)
        for a in annotations:
            writer.writerow(
                [a.case_id, _fmt_float(a.box.cx), _fmt_float(a.box.cy),
                 _fmt_float(a.box.cz), _fmt_float(a.box.d), a.lesion_type]
            )


def load_annotations(path):
    """Read the annotation CSV; validates type codes and diameters."""
    annotations = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ANNOTATION_FIELDS if c not in (reader.fieldnames or ())]
        if missing:
            raise DataError(f"{path}: missing annotation columns {missing}")
        for i, row in enumerate(reader, start=2):
            try:
                box = Box3(float(row["x_mm"]), float(row["y_mm"]),
                           float(row["z_mm"]), float(row["d_mm"]))
                lesion_type = int(row["type"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{i}: malformed annotation row") from exc
            if lesion_type not in LESION_TYPE_NAMES:
                raise DataError(f"{path}:{i}: lesion type must be 1..5, got {lesion_type}")
            if not box.d > 0:
                raise DataError(f"{path}:{i}: non-positive diameter {box.d}")
            annotations.append(Annotation(row["case_id"], box, lesion_type))
    return annotations
