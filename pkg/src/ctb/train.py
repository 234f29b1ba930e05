"""Patch sampling, rebalancing, augmentation, and the SGD training loop.

Training consumes a preprocessed cache: each case resampled to 1 mm,
normalized, lung-masked, and cropped to the mask bounding box with the crop
corner kept on the 4 mm anchor lattice so lesion centers stay aligned with
the anchor grid. Patches are cubic windows whose origins also sit on that
lattice; with probability 0.7 a patch is forced to contain a lesion center
at least 12 mm from every face, otherwise it is drawn from lesion-free lung.

Case draws are weighted by lesion type (rare types sampled more often), the
confidence term subsamples negatives to a fixed ratio per patch, and the
optimizer is SGD with momentum under a step-decay schedule. The checkpoint
returned is the best validation F1 at the detection threshold.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .anchors import (IGNORE, NEGATIVE, POSITIVE, Box3, anchor_grid,
                      assign_labels)
from .errors import DataError
from .losses import detection_loss
from .lungmask import LungMask, apply_mask, bounding_box, extract_lung_mask
from .net.model import (FULL_HEAD_VALUES, ModelConfig, build_model,
                        init_from_checkpoint, load_checkpoint,
                        model_to_checkpoint, save_checkpoint)
from .phantom import load_manifest
from .postprocess import InferConfig, infer_case
from .evaluate import match_detections, prf
from .volume import (FILL_BYTE, NormalizedVolume, load_annotations,
                     load_volume, normalize_hu, read_window, resample_nearest)

DEFAULT_REBALANCE = {1: 10.0, 2: 1.0, 3: 10.0, 4: 10.0, 5: 5.0}
LESION_MARGIN_MM = 12
LATTICE_MM = 4


@dataclass
class TrainConfig:
    epochs: int = 30
    patches_per_epoch: int = 100
    learning_rate: float = 0.02
    momentum: float = 0.9
    decay_epochs: tuple = (20, 26)
    decay_factor: float = 0.1
    neg_per_pos: float = 2.0
    neg_floor: int = 32
    lesion_fraction: float = 0.7
    rebalance: dict = field(default_factory=lambda: dict(DEFAULT_REBALANCE))
    patch_size: int = 32
    seed: int = 0
    val_every: int = 5
    val_threshold: float = 0.38

    def __post_init__(self):
        if self.epochs < 1 or self.patches_per_epoch < 1:
            raise ValueError("epochs and patches_per_epoch must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if not 0.0 <= self.lesion_fraction <= 1.0:
            raise ValueError(
                f"lesion fraction must be in [0, 1], got {self.lesion_fraction}")
        if self.neg_per_pos < 0 or self.neg_floor < 1:
            raise ValueError("negative subsample ratio must be >= 0, floor >= 1")
        if any(m < 1 for m in self.rebalance.values()):
            raise ValueError("rebalance multipliers must be >= 1")
        # the 12 mm margin rule needs > 24 mm of interior on the 4 mm lattice
        if self.patch_size % 8 or self.patch_size < 32:
            raise ValueError(
                f"patch size must be a multiple of 8 and >= 32, got {self.patch_size}")
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.rebalance = {int(k): float(v) for k, v in self.rebalance.items()}


def load_train_config(path):
    """TrainConfig from a plain JSON file; unknown keys rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable training config: {exc}") from exc
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"{path}: unknown training config keys {sorted(unknown)}")
    try:
        return TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad training config: {exc}") from exc


# --- preprocessed cache ------------------------------------------------------

PREP_MAGIC = "ctprep1"


@dataclass
class PreprocessedCase:
    """One cache entry: masked bytes and mask labels cropped to the lungs.

    corner is the crop's corner voxel index (x, y, z) in the 1 mm frame,
    always a multiple of 4 so the anchor lattice of any crop-aligned window
    matches the case's absolute lattice. boxes are crop-local mm.
    """

    case_id: str
    voxels: np.ndarray
    labels: np.ndarray
    corner: tuple
    origin: tuple
    boxes: list
    types: list
    split: str = "train"
    single_lung: bool = False

    def absolute_boxes(self):
        ox, oy, oz = self.origin
        cx, cy, cz = self.corner
        return [Box3(b.cx + ox + cx, b.cy + oy + cy, b.cz + oz + cz, b.d)
                for b in self.boxes]


def preprocess_case(vol, annotations, case_id, split="train"):
    """Resample, normalize, mask, and crop one volume for training."""
    res = resample_nearest(vol, 1.0)
    nv = normalize_hu(res)
    lm = extract_lung_mask(res)
    masked = apply_mask(nv, lm)
    zs, ys, xs = bounding_box(lm)
    # snap crop starts down to the 4 mm lattice; ends just clip to the volume
    starts = [s.start - s.start % LATTICE_MM for s in (zs, ys, xs)]
    crop = tuple(slice(lo, s.stop) for lo, s in zip(starts, (zs, ys, xs)))
    corner = (starts[2], starts[1], starts[0])
    ox, oy, oz = res.origin
    boxes = []
    types = []
    for ann in annotations:
        b = ann.box
        boxes.append(Box3(b.cx - ox - corner[0], b.cy - oy - corner[1],
                          b.cz - oz - corner[2], b.d))
        types.append(ann.lesion_type)
    return PreprocessedCase(case_id, masked.voxels[crop].copy(),
                            lm.labels[crop].copy(), corner, res.origin,
                            boxes, types, split, lm.single_lung)


def save_preprocessed(case, path):
    manifest = {
        "magic": PREP_MAGIC,
        "case_id": case.case_id,
        "shape": list(case.voxels.shape),
        "corner": list(case.corner),
        "origin": list(case.origin),
        "boxes": [[b.cx, b.cy, b.cz, b.d] for b in case.boxes],
        "types": list(case.types),
        "split": case.split,
        "single_lung": case.single_lung,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(case.voxels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(case.labels, dtype=np.uint8).tobytes())


def load_preprocessed(path):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing cache manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed cache manifest") from exc
    if manifest.get("magic") != PREP_MAGIC:
        raise DataError(f"{path}: not a preprocessed case file")
    shape = tuple(manifest["shape"])
    count = int(np.prod(shape))
    payload = raw[nl + 1:]
    if len(payload) != 2 * count:
        raise DataError(f"{path}: cache payload is {len(payload)} bytes, "
                        f"expected {2 * count}")
    voxels = np.frombuffer(payload, dtype=np.uint8, count=count).reshape(shape).copy()
    labels = np.frombuffer(payload, dtype=np.uint8, count=count,
                           offset=count).reshape(shape).copy()
    if not np.isin(labels, (0, 1, 2)).all():
        raise DataError(f"{path}: mask labels outside 0/1/2")
    boxes = [Box3(*map(float, b)) for b in manifest["boxes"]]
    return PreprocessedCase(manifest["case_id"], voxels, labels,
                            tuple(manifest["corner"]), tuple(manifest["origin"]),
                            boxes, [int(t) for t in manifest["types"]],
                            manifest["split"], bool(manifest["single_lung"]))


def preprocess_dataset(dataset_dir, out_dir, threads=None):
    """Preprocess every case of a generated dataset into out_dir.

    Writes one .ctp file per case plus index.json (written last). Honors
    CTB_THREADS (or the threads argument) for per-case parallelism; results
    are independent of the worker count.
    """
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(dataset_dir / "manifest.json")
    annotations = load_annotations(dataset_dir / "annotations.csv")
    by_case = {}
    for ann in annotations:
        by_case.setdefault(ann.case_id, []).append(ann)
    if threads is None:
        threads = int(os.environ.get("CTB_THREADS", "1"))

    def one(entry):
        vol = load_volume(dataset_dir / entry["file"])
        pc = preprocess_case(vol, by_case.get(entry["case_id"], ()),
                             entry["case_id"], entry["split"])
        name = f"{entry['case_id']}.ctp"
        save_preprocessed(pc, out_dir / name)
        return {"case_id": entry["case_id"], "split": entry["split"],
                "diseased": entry["cohort"] == "diseased", "file": name}

    entries = manifest["cases"]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, entries))
    else:
        rows = [one(e) for e in entries]
    index = {"source": str(dataset_dir), "cases": rows}
    (out_dir / "index.json").write_text(json.dumps(index, sort_keys=True,
                                                   indent=2) + "\n")
    return index


def load_index(path):
    path = Path(path)
    if path.is_dir():
        path = path / "index.json"
    try:
        index = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable cache index: {exc}") from exc
    if "cases" not in index:
        raise DataError(f"{path}: cache index missing 'cases'")
    index["_dir"] = str(path.parent)
    return index


# --- samples -----------------------------------------------------------------


@dataclass
class TrainingSample:
    """One training patch with its anchor-level supervision.

    patch is raw bytes (converted to [0, 1] floats at the step); state,
    reg_targets, and type_labels follow the flattened anchor order of
    anchor_grid(patch side). boxes/types are the patch-local ground truth
    the labels were derived from.
    """

    patch: np.ndarray
    state: np.ndarray
    reg_targets: np.ndarray
    type_labels: np.ndarray
    boxes: list
    types: list


def _labels_for(boxes, types, grid):
    assign = assign_labels(grid, boxes)
    n = grid.n_anchors
    reg = np.zeros((n, 4), dtype=np.float32)
    tl = np.zeros(n, dtype=np.int32)
    pos = assign.positive
    if pos.size:
        flat = grid.flat_boxes()
        gt = np.array([[b.cx, b.cy, b.cz, b.d] for b in boxes])
        gi = assign.gt_index[pos]
        a = flat[pos]
        reg[pos, 0] = (gt[gi, 0] - a[:, 0]) / a[:, 3]
        reg[pos, 1] = (gt[gi, 1] - a[:, 1]) / a[:, 3]
        reg[pos, 2] = (gt[gi, 2] - a[:, 2]) / a[:, 3]
        reg[pos, 3] = np.log(gt[gi, 3] / a[:, 3])
        tl[pos] = np.array([types[g] for g in gi], dtype=np.int32) - 1
    return assign.state, reg, tl


def _lattice_choice(rng, lo, hi):
    """A uniform multiple of 4 in [lo, hi]; hi - lo >= 4 is guaranteed here."""
    first = math.ceil(lo / LATTICE_MM)
    last = math.floor(hi / LATTICE_MM)
    return int(rng.integers(first, last + 1)) * LATTICE_MM


def sample_patch(case, rng, cfg=None):
    """Draw one training patch from a preprocessed case.

    With probability lesion_fraction (and lesions present) the patch contains
    a lesion center at least 12 mm from every face; otherwise it is
    lesion-free lung. Patch origins sit on the 4 mm lattice; windows poking
    past the crop read as fill bytes.
    """
    cfg = cfg or TrainConfig()
    p = cfg.patch_size
    if not case.labels.any():
        raise DataError(f"{case.case_id}: case has no lung voxels")
    grid = anchor_grid(p)
    dims = (case.voxels.shape[2], case.voxels.shape[1], case.voxels.shape[0])
    if case.boxes and rng.random() < cfg.lesion_fraction:
        li = int(rng.integers(len(case.boxes)))
        c = case.boxes[li]
        origin = tuple(
            _lattice_choice(rng, ctr - p + LESION_MARGIN_MM, ctr - LESION_MARGIN_MM)
            for ctr in (c.cx, c.cy, c.cz))
        return _cut_sample(case, origin, grid, cfg)
    for _ in range(200):
        origin = tuple(_lattice_choice(rng, -8, max(dims[ax] - p + 8, -4))
                       for ax in range(3))
        window_lung = read_window(
            case.labels, (origin[2], origin[1], origin[0]), (p, p, p), fill=0)
        if not window_lung.any():
            continue
        if any(_box_touches(b, origin, p) for b in case.boxes):
            continue
        return _cut_sample(case, origin, grid, cfg)
    raise DataError(f"{case.case_id}: no lesion-free lung window found")


def _box_touches(box, origin, p):
    h = box.d / 2.0
    for ctr, o in zip((box.cx, box.cy, box.cz), origin):
        if ctr + h <= o or ctr - h >= o + p:
            return False
    return True


def _cut_sample(case, origin, grid, cfg):
    p = cfg.patch_size
    patch = read_window(case.voxels, (origin[2], origin[1], origin[0]), (p, p, p))
    boxes = []
    types = []
    for b, t in zip(case.boxes, case.types):
        local = Box3(b.cx - origin[0], b.cy - origin[1], b.cz - origin[2], b.d)
        if all(0 < ctr < p for ctr in (local.cx, local.cy, local.cz)):
            boxes.append(local)
            types.append(t)
    state, reg, tl = _labels_for(boxes, types, grid)
    return TrainingSample(patch, state, reg, tl, boxes, types)


def augment(sample, rng):
    """Random left-right flip plus up to +/-8 mm sub-crop jitter."""
    flip = bool(rng.random() < 0.5)
    offset = tuple(int(v) * LATTICE_MM for v in rng.integers(-2, 3, size=3))
    return apply_augment(sample, flip, offset)


def apply_augment(sample, flip, offset=(0, 0, 0)):
    """Deterministic augmentation: x mirror, then an (x, y, z) mm shift.

    Boxes whose centers leave the patch are dropped; anchor labels are
    re-derived from the surviving boxes, so the sample invariant (labels =
    assign_labels of its own boxes) is preserved by construction.
    """
    p = sample.patch.shape[0]
    if any(o % LATTICE_MM for o in offset):
        raise ValueError(f"jitter must stay on the {LATTICE_MM} mm lattice, "
                         f"got {offset}")
    patch = sample.patch
    boxes = list(sample.boxes)
    types = list(sample.types)
    if flip:
        patch = patch[:, :, ::-1]
        boxes = [Box3(p - b.cx, b.cy, b.cz, b.d) for b in boxes]
    if any(offset):
        patch = read_window(patch, (offset[2], offset[1], offset[0]),
                            patch.shape, fill=FILL_BYTE)
        moved = [(Box3(b.cx - offset[0], b.cy - offset[1], b.cz - offset[2], b.d), t)
                 for b, t in zip(boxes, types)]
        boxes = [b for b, _ in moved
                 if all(0 < c < p for c in (b.cx, b.cy, b.cz))]
        types = [t for b, t in moved
                 if all(0 < c < p for c in (b.cx, b.cy, b.cz))]
    patch = np.ascontiguousarray(patch)
    state, reg, tl = _labels_for(boxes, types, anchor_grid(p))
    return TrainingSample(patch, state, reg, tl, boxes, types)


def rebalance_weights(annotations, case_ids=None, multipliers=None):
    """Per-case draw weights: max multiplier over a case's lesion types.

    case_ids extends the result to lesion-free cases (weight 1); by default
    only annotated cases appear.
    """
    multipliers = multipliers or DEFAULT_REBALANCE
    weights = {}
    if case_ids is not None:
        weights = {cid: 1.0 for cid in case_ids}
    for ann in annotations:
        m = float(multipliers.get(ann.lesion_type, 1.0))
        weights[ann.case_id] = max(weights.get(ann.case_id, 1.0), m)
    return weights


# --- loop --------------------------------------------------------------------


def _subsample_negatives(state, rng, cfg):
    """Flip surplus negatives to IGNORE, keeping ratio * positives (floored)."""
    neg = np.flatnonzero(state == NEGATIVE)
    n_pos = int((state == POSITIVE).sum())
    target = max(int(round(cfg.neg_per_pos * n_pos)), cfg.neg_floor)
    if neg.size <= target:
        return state
    keep = rng.permutation(neg)[:target]
    out = state.copy()
    out[neg] = IGNORE
    out[keep] = NEGATIVE
    return out


def _forward_loss(model, sample, state, with_types):
    """One patch's loss and head gradient; shared by the loop and tests."""
    floats = sample.patch.astype(np.float32) / np.float32(255.0)
    raw = model.forward(floats)
    flat = raw.reshape(-1, raw.shape[-1])
    breakdown, grad = detection_loss(flat, state, sample.reg_targets,
                                     sample.type_labels, with_types=with_types)
    return raw, breakdown, grad.reshape(raw.shape)


def _case_weights(cases, multipliers):
    w = np.ones(len(cases))
    for i, case in enumerate(cases):
        for t in case.types:
            w[i] = max(w[i], float(multipliers.get(t, 1.0)))
    return w / w.sum()


def _validate(model, cases, cfg):
    """Pooled lesion F1 over the validation cases at the detection threshold."""
    infer_cfg = InferConfig(threshold=cfg.val_threshold)
    tp = fp = fn = 0
    for case in cases:
        origin = tuple(o + c for o, c in zip(case.origin, case.corner))
        nv = NormalizedVolume(case.voxels, (1.0, 1.0, 1.0), origin)
        lm = LungMask(case.labels, (1.0, 1.0, 1.0), origin,
                      single_lung=case.single_lung)
        dets = infer_case(model, nv, lm, infer_cfg)
        m = match_detections(case.absolute_boxes(), dets)
        tp += m.tp
        fp += m.fp
        fn += m.fn
    _, _, f1 = prf(tp, fp, fn)
    return f1


def train_loop(index, cfg=None, model_cfg=None, init=None, out_dir=None):
    """Train a detector over a preprocessed dataset.

    index is a cache index (path or loaded dict). init, when given, is a
    checkpoint (or path): an exact architecture match resumes all weights, a
    body match transfers everything but the output head. Returns
    (best checkpoint, curve rows); rows are (epoch, mean_loss, val_f1|None).
    With out_dir set, curve.csv and checkpoint.ctbk are written there.
    """
    cfg = cfg or TrainConfig()
    if isinstance(index, (str, Path)):
        index = load_index(index)
    cache_dir = Path(index.get("_dir", "."))
    train_cases = []
    val_cases = []
    for row in index["cases"]:
        if row["split"] == "test":
            continue
        case = load_preprocessed(cache_dir / row["file"])
        (train_cases if row["split"] == "train" else val_cases).append(case)
    if not train_cases:
        raise DataError("cache index holds no training cases")

    if model_cfg is None:
        model_cfg = ModelConfig(patch_size=cfg.patch_size)
    model = build_model(model_cfg)
    if init is not None:
        ck = init if not isinstance(init, (str, Path)) else load_checkpoint(init)
        if ck.fingerprint == model.fingerprint():
            init_from_checkpoint(model, ck)
        else:
            init_from_checkpoint(model, ck, reinit_output=True)
    with_types = model_cfg.head_values == FULL_HEAD_VALUES

    rng = np.random.default_rng(cfg.seed)
    weights = _case_weights(train_cases, cfg.rebalance)
    params = model.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lr = cfg.learning_rate
    curve = []
    best = None  # (f1, checkpoint)
    for epoch in range(1, cfg.epochs + 1):
        if epoch in cfg.decay_epochs:
            lr *= cfg.decay_factor
        total = 0.0
        for step in range(cfg.patches_per_epoch):
            case = train_cases[int(rng.choice(len(train_cases), p=weights))]
            sample = augment(sample_patch(case, rng, cfg), rng)
            state = _subsample_negatives(sample.state, rng, cfg)
            _, breakdown, grad = _forward_loss(model, sample, state, with_types)
            loss = breakdown.total
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss {loss} at epoch {epoch} step {step} "
                    f"(case {case.case_id}, lr {lr})")
            model.backward(grad)
            grads = model.grads()
            for name, p in params.items():
                v = velocity[name]
                v *= cfg.momentum
                v -= lr * grads[name]
                p += v
            total += loss
        mean_loss = total / cfg.patches_per_epoch
        val_f1 = None
        if val_cases and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            val_f1 = _validate(model, val_cases, cfg)
            if val_f1 is not None and (best is None or val_f1 > best[0]):
                meta = {"epoch": epoch, "val_f1": val_f1}
                best = (val_f1, model_to_checkpoint(model, meta))
        curve.append((epoch, mean_loss, val_f1))

    if best is None:
        checkpoint = model_to_checkpoint(model, {"epoch": cfg.epochs,
                                                 "val_f1": None})
    else:
        checkpoint = best[1]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_curve(out_dir / "curve.csv", curve)
        save_checkpoint(checkpoint, out_dir / "checkpoint.ctbk")
    return checkpoint, curve


def save_curve(path, curve):
    """Loss curve as CSV rows (epoch, mean_loss, val_f1; blank when skipped)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_f1"])
        for epoch, mean_loss, val_f1 in curve:
            writer.writerow([epoch, repr(mean_loss),
                             "" if val_f1 is None else repr(val_f1)])
