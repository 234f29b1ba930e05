"""Synthetic chest phantoms with typed lesion signatures.

Each case is a 1 mm isotropic volume: soft-tissue body (an elliptical
cylinder), two air-like lung ellipsoids, exterior air, and Gaussian HU noise.
Diseased cases carry cubic lesion boxes whose voxel signatures are engineered
to be type-separable by local statistics:

  miliary       scattered 2 mm high-HU dots
  infiltrative  fuzzy Gaussian density bump
  caseous       dense blob with an irregular boundary
  tuberculoma   solid sphere, optionally with a small HU-200 calcified core
  cavitary      dense shell around an air core

Geometry floors are dictated by the mask pipeline: each lung must exceed the
450 cm^3 component filter and the exterior air must exceed 7500 cm^3 so it is
cleared, which is why the default dims are realistic-scale. Lesion centers
snap to the detector's 4 mm anchor-center lattice ((4k+2) mm per axis) and
the per-type size ranges bracket the training anchor scales, so every lesion
has an anchor above the strict 0.5 IoU threshold; the generator is explicitly
engineered for fair toy-model learnability.

Determinism: a dataset is a pure function of (spec, n_cases, healthy_fraction,
seed); per-case streams come from SeedSequence.spawn.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .anchors import Box3
from .errors import DataError
from .volume import Annotation, Volume, save_annotations, save_volume

HU_EXTERIOR = -1000
HU_BODY = 40
HU_LUNG = -800

HU_MILIARY_DOT = -100
HU_INFILTRATIVE_PEAK = -350
HU_CASEOUS = -150
HU_TUBERCULOMA = 40
HU_CALCIFIED_CORE = 200
HU_CAVITY_SHELL = -100
HU_CAVITY_CORE = -900

LATTICE_MM = 4  # lesion centers sit at (4k + 2) mm, the anchor-center lattice

# Sizes sit inside the bands where a lattice-centred lesion overlaps an
# anchor at IoU > 0.5: (7.94, 12.60) mm against scale 10 and (31.75, 50.40)
# against scale 40 (concentric cubes, IoU = (d1/d2)^3).  Labeling has no
# force-match fallback, so a lesion outside these bands would train with no
# positive anchors at all.
DEFAULT_SIZE_RANGES = {
    1: (9.0, 12.0),    # miliary
    2: (33.0, 40.0),   # infiltrative
    3: (9.0, 12.0),    # caseous
    4: (9.0, 12.0),    # tuberculoma
    5: (33.0, 40.0),   # cavitary
}

DEFAULT_LESION_COUNTS = {1: 1, 2: 1, 3: 1, 4: 1, 5: 1}
# single-type profile for the nodule pretraining task
NODULE_LESION_COUNTS = {4: 3}

TRAIN_FRACTION = 0.75
VAL_FRACTION = 0.10


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (280, 230, 190)      # (nx, ny, nz) at 1 mm
    body_semi: tuple[float, float] = (100.0, 80.0)    # (x, y) of the cylinder
    body_z: tuple[float, float] = (15.0, 175.0)
    lung_semi: tuple[float, float, float] = (42.0, 50.0, 62.0)
    lung_offset_x: float = 47.0
    lung_center_z: float = 95.0
    noise_sigma: float = 20.0
    lesion_counts: dict = field(default_factory=lambda: dict(DEFAULT_LESION_COUNTS))
    size_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    calcification_prob: float = 0.5
    min_gap_mm: float = 4.0
    max_place_tries: int = 2000

    def __post_init__(self):
        nx, ny, nz = self.dims
        ax, ay = self.body_semi
        la, lb, lc = self.lung_semi
        cx, cy = nx / 2.0, ny / 2.0
        if min(self.dims) < 8:
            raise ValueError(f"phantom dims too small: {self.dims}")
        if self.body_z[0] >= self.body_z[1] or self.body_z[0] < 0 or self.body_z[1] > nz:
            raise ValueError(f"body z range {self.body_z} does not fit nz={nz}")
        if ax >= cx or ay >= cy:
            raise ValueError("body cross-section does not fit inside the volume")
        if self.lung_offset_x + la >= ax:
            raise ValueError("lungs poke out of the body in x")
        if lb >= ay:
            raise ValueError("lungs poke out of the body in y")
        if (self.lung_center_z - lc < self.body_z[0]
                or self.lung_center_z + lc > self.body_z[1]):
            raise ValueError("lungs poke out of the body in z")
        for t, n in self.lesion_counts.items():
            if t not in DEFAULT_SIZE_RANGES or n < 0:
                raise ValueError(f"bad lesion count entry {t}: {n}")
        for t, (lo, hi) in self.size_ranges.items():
            if t not in DEFAULT_SIZE_RANGES or not 0 < lo <= hi:
                raise ValueError(f"bad size range for type {t}: {(lo, hi)}")
        for t, n in self.lesion_counts.items():
            if n > 0 and t not in self.size_ranges:
                raise ValueError(f"lesion type {t} has no size range")
        if not 0.0 <= self.calcification_prob <= 1.0:
            raise ValueError("calcification_prob must be in [0, 1]")

    def lung_centers(self):
        nx, ny, _ = self.dims
        cx, cy = nx / 2.0, ny / 2.0
        return ((cx - self.lung_offset_x, cy, self.lung_center_z),
                (cx + self.lung_offset_x, cy, self.lung_center_z))

    def lung_volume_cm3(self):
        la, lb, lc = self.lung_semi
        return 4.0 / 3.0 * np.pi * la * lb * lc / 1000.0


@dataclass
class PhantomTruth:
    """Ground-truth voxel masks, for fidelity checks."""

    lung_left: np.ndarray
    lung_right: np.ndarray
    body: np.ndarray


def _axis_centers(n):
    return np.arange(n, dtype=np.float32) + 0.5


def _lung_mask(spec, center):
    nx, ny, nz = spec.dims
    la, lb, lc = spec.lung_semi
    x = (_axis_centers(nx) - center[0]) / la
    y = (_axis_centers(ny) - center[1]) / lb
    z = (_axis_centers(nz) - center[2]) / lc
    r2 = (z[:, None, None] ** 2 + y[None, :, None] ** 2 + x[None, None, :] ** 2)
    return r2 <= 1.0


def _inside_ellipsoid(spec, center, pts):
    la, lb, lc = spec.lung_semi
    q = ((pts[:, 0] - center[0]) / la) ** 2 + ((pts[:, 1] - center[1]) / lb) ** 2 \
        + ((pts[:, 2] - center[2]) / lc) ** 2
    return q <= 1.0


def _corners(box):
    h = box[3] / 2.0
    signs = np.array([(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                     dtype=np.float64)
    return np.asarray(box[:3], dtype=np.float64) + signs * h


def _boxes_gap(a, b):
    # largest per-axis face distance between two cubes; >= 0 means disjoint
    d = np.abs(np.asarray(a[:3]) - np.asarray(b[:3])) - (a[3] + b[3]) / 2.0
    return float(d.max())


def _box_window(box, dims):
    # voxels whose centers fall inside the cube
    lo = []
    hi = []
    for c, n in zip(box[:3], dims):
        half = box[3] / 2.0
        lo.append(max(int(np.ceil(c - half - 0.5)), 0))
        hi.append(min(int(np.floor(c + half - 0.5)) + 1, n))
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    return (slice(z0, z1), slice(y0, y1), slice(x0, x1))


def _window_coords(win):
    zs = np.arange(win[0].start, win[0].stop, dtype=np.float32) + 0.5
    ys = np.arange(win[1].start, win[1].stop, dtype=np.float32) + 0.5
    xs = np.arange(win[2].start, win[2].stop, dtype=np.float32) + 0.5
    return zs[:, None, None], ys[None, :, None], xs[None, None, :]


def _paint_lesion(base, lesion_type, box, rng, calcified):
    win = _box_window(box, (base.shape[2], base.shape[1], base.shape[0]))
    sub = base[win]
    z, y, x = _window_coords(win)
    dz, dy, dx = z - box[2], y - box[1], x - box[0]
    r = np.sqrt(dx * dx + dy * dy + dz * dz)
    d = box[3]

    if lesion_type == 1:
        n_dots = int(rng.integers(12, 21))
        span = max(int(d) - 2, 1)
        for _ in range(n_dots):
            off = rng.integers(0, span, size=3)
            z0 = win[0].start + int(off[0])
            y0 = win[1].start + int(off[1])
            x0 = win[2].start + int(off[2])
            base[z0:z0 + 2, y0:y0 + 2, x0:x0 + 2] = HU_MILIARY_DOT
        return

    if lesion_type == 2:
        sigma = d / 4.0
        bump = (HU_INFILTRATIVE_PEAK - HU_LUNG) * np.exp(-(r * r) / (2 * sigma * sigma))
        sub[:] = np.maximum(sub, (HU_LUNG + bump).astype(sub.dtype))
        return

    if lesion_type == 3:
        rough = rng.standard_normal(sub.shape).astype(np.float32)
        rough = ndimage.gaussian_filter(rough, sigma=1.5)
        rough /= max(float(np.abs(rough).max()), 1e-6)
        radius = 0.45 * d * (1.0 - 0.3 * rough)
        sub[r <= radius] = HU_CASEOUS
        return

    if lesion_type == 4:
        sub[r <= 0.45 * d] = HU_TUBERCULOMA
        if calcified:
            sub[r <= 1.6] = HU_CALCIFIED_CORE
        return

    if lesion_type == 5:
        outer = 0.45 * d
        inner = 0.62 * outer
        sub[(r <= outer) & (r > inner)] = HU_CAVITY_SHELL
        sub[r <= inner] = HU_CAVITY_CORE
        return

    raise ValueError(f"unknown lesion type {lesion_type}")


def _sample_boxes(spec, rng):
    """Draw lesion boxes: lattice-snapped centers, inside one lung, disjoint
    with a minimum gap. Raises DataError after bounded retries."""
    centers = spec.lung_centers()
    la, lb, lc = spec.lung_semi
    boxes = []
    kinds = []
    calc = []
    # big lesions claim space first; small ones fill the gaps
    order = sorted(spec.lesion_counts,
                   key=lambda t: (-spec.size_ranges[t][1], t))
    for lesion_type in order:
        lo, hi = spec.size_ranges[lesion_type]
        for _ in range(spec.lesion_counts[lesion_type]):
            placed = False
            for _try in range(spec.max_place_tries):
                d = float(rng.uniform(lo, hi))
                side = int(rng.integers(0, 2))
                lx, ly, lz = centers[side]
                raw = np.array([
                    rng.uniform(lx - la, lx + la),
                    rng.uniform(ly - lb, ly + lb),
                    rng.uniform(lz - lc, lz + lc),
                ])
                snapped = np.round((raw - 2.0) / LATTICE_MM) * LATTICE_MM + 2.0
                box = (float(snapped[0]), float(snapped[1]), float(snapped[2]), d)
                if not bool(np.all(_inside_ellipsoid(spec, centers[side], _corners(box)))):
                    continue
                if any(_boxes_gap(box, other) < spec.min_gap_mm for other in boxes):
                    continue
                boxes.append(box)
                kinds.append(lesion_type)
                calc.append(lesion_type == 4 and rng.random() < spec.calcification_prob)
                placed = True
                break
            if not placed:
                raise DataError(
                    f"could not place a type-{lesion_type} lesion after "
                    f"{spec.max_place_tries} tries; shrink sizes or counts")
    return boxes, kinds, calc


def generate_case_with_truth(spec, seed, case_id="case", diseased=True):
    """Build one phantom; returns (Volume, annotations, PhantomTruth)."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = spec.dims
    ax, ay = spec.body_semi
    cx, cy = nx / 2.0, ny / 2.0

    x = (_axis_centers(nx) - cx) / ax
    y = (_axis_centers(ny) - cy) / ay
    body_xy = (x[None, :] ** 2 + y[:, None] ** 2) <= 1.0
    zc = _axis_centers(nz)
    body_z = (zc >= spec.body_z[0]) & (zc <= spec.body_z[1])
    body = body_z[:, None, None] & body_xy[None, :, :]

    left_c, right_c = spec.lung_centers()
    lung_l = _lung_mask(spec, left_c)
    lung_r = _lung_mask(spec, right_c)

    base = np.full((nz, ny, nx), HU_EXTERIOR, dtype=np.float32)
    base[body] = HU_BODY
    base[lung_l] = HU_LUNG
    base[lung_r] = HU_LUNG

    annotations = []
    if diseased:
        boxes, kinds, calc = _sample_boxes(spec, rng)
        for box, lesion_type, flag in zip(boxes, kinds, calc):
            _paint_lesion(base, lesion_type, box, rng, flag)
            annotations.append(Annotation(case_id, Box3(*box), lesion_type))

    noise = rng.standard_normal(base.shape, dtype=np.float32) * spec.noise_sigma
    hu = np.rint(base + noise).astype(np.int16)
    vol = Volume(hu, (1.0, 1.0, 1.0))
    return vol, annotations, PhantomTruth(lung_l, lung_r, body)


def generate_case(spec, seed, case_id="case", diseased=True):
    vol, annotations, _ = generate_case_with_truth(spec, seed, case_id, diseased)
    return vol, annotations


def split_sizes(n):
    """Whole-dataset split sizes: round-half-up train/val, remainder test."""
    train = int(np.floor(n * TRAIN_FRACTION + 0.5))
    val = int(np.floor(n * VAL_FRACTION + 0.5))
    return train, val, n - train - val


def _cohort_order(n, healthy_fraction):
    """Interleave diseased/healthy so every split stays near the global mix."""
    n_healthy = int(np.floor(n * healthy_fraction + 0.5))
    n_diseased = n - n_healthy
    order = []
    d = h = 0
    while d < n_diseased or h < n_healthy:
        if d < n_diseased:
            order.append(True)
            d += 1
        if h < n_healthy:
            order.append(False)
            h += 1
    return order


def generate_dataset(spec, n_cases, healthy_fraction, seed, out_dir):
    """Write n_cases phantoms, an annotation CSV, and a manifest.

    The manifest is written last so a failed run never leaves a valid-looking
    dataset behind. Returns the manifest dict.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if not 0.0 <= healthy_fraction <= 1.0:
        raise ValueError("healthy_fraction must be in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    diseased_flags = _cohort_order(n_cases, healthy_fraction)
    n_train, n_val, n_test = split_sizes(n_cases)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    seeds = np.random.SeedSequence(seed).spawn(n_cases)
    all_annotations = []
    cases = []
    for i, (diseased, split) in enumerate(zip(diseased_flags, splits)):
        case_id = f"case_{i:04d}"
        fname = f"{case_id}.ctv"
        vol, annotations = generate_case(spec, seeds[i], case_id, diseased)
        save_volume(vol, out / fname)
        all_annotations.extend(annotations)
        cases.append({
            "case_id": case_id,
            "file": fname,
            "cohort": "diseased" if diseased else "healthy",
            "split": split,
            "lesions": len(annotations),
        })

    save_annotations(all_annotations, out / "annotations.csv")

    per_type = {str(t): 0 for t in sorted(DEFAULT_SIZE_RANGES)}
    for a in all_annotations:
        per_type[str(a.lesion_type)] += 1
    manifest = {
        "seed": seed,
        "n_cases": n_cases,
        "healthy_fraction": healthy_fraction,
        "spec": _spec_dict(spec),
        "annotations": "annotations.csv",
        "cases": cases,
        "counts": {
            "diseased": sum(1 for f in diseased_flags if f),
            "healthy": sum(1 for f in diseased_flags if not f),
            "split": {"train": n_train, "val": n_val, "test": n_test},
            "lesions_per_type": per_type,
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def _spec_dict(spec):
    d = asdict(spec)
    d["lesion_counts"] = {str(k): v for k, v in spec.lesion_counts.items()}
    d["size_ranges"] = {str(k): list(v) for k, v in spec.size_ranges.items()}
    return d


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from exc
    for key in ("cases", "annotations", "spec"):
        if key not in manifest:
            raise DataError(f"{path}: manifest missing '{key}'")
    return manifest
