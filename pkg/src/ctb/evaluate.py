"""Detection metrics: center-hit matching, recall/precision/F1, FROC.

A detection hits a ground-truth lesion when its predicted center lies within
d_gt/2 of the lesion center (Euclidean, inclusive at exactly the radius; only
the ground-truth size matters). Detections claim lesions greedily in
descending confidence order, one detection per lesion, taking the nearest
center when inside several; a detection whose center hits only
already-claimed lesions counts as a false positive. The FROC sweep exploits
that thresholding by confidence is the same as truncating that greedy order,
so recall is nondecreasing as the threshold drops.

Metric triples are ordered (recall, precision, f1) throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .anchors import Box3
from .errors import DataError
from .postprocess import Detection, _det_order

FROC_TARGETS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class MatchResult:
    """Outcome of matching one case (or one pooled set) of detections."""

    tp: int
    fp: int
    fn: int
    pairs: list  # (detection index, ground-truth index, type_correct)


def _center_dist2(det_box, gt_box):
    return ((det_box.cx - gt_box.cx) ** 2 + (det_box.cy - gt_box.cy) ** 2
            + (det_box.cz - gt_box.cz) ** 2)


def _center_hit(det_box, gt_box):
    return _center_dist2(det_box, gt_box) <= (gt_box.d / 2.0) ** 2


def match_detections(gt_boxes, detections, gt_types=None):
    """Greedily match detections to ground-truth cubes.

    Detections are visited in descending confidence (coordinate ties broken
    deterministically); each takes the nearest-center unclaimed cube that
    contains its center. pairs carry type_correct per match; with gt_types
    None that flag is None.
    """
    order = sorted(range(len(detections)), key=lambda i: _det_order(detections[i]))
    claimed = [False] * len(gt_boxes)
    pairs = []
    fp = 0
    for di in order:
        box = detections[di].box
        best = None
        for gi, gt in enumerate(gt_boxes):
            if claimed[gi] or not _center_hit(box, gt):
                continue
            dist = _center_dist2(box, gt)
            if best is None or dist < best[0]:
                best = (dist, gi)
        if best is None:
            fp += 1
            continue
        gi = best[1]
        claimed[gi] = True
        if gt_types is None:
            ok = None
        else:
            ok = detections[di].lesion_type == gt_types[gi]
        pairs.append((di, gi, ok))
    tp = len(pairs)
    return MatchResult(tp, fp, len(gt_boxes) - tp, pairs)


def prf(tp, fp, fn):
    """(recall, precision, f1). A zero denominator yields None for that entry."""
    recall = tp / (tp + fn) if tp + fn else None
    precision = tp / (tp + fp) if tp + fp else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return recall, precision, f1


def classification_precision(matched, total=None):
    """Fraction of matched lesions whose predicted type is right.

    Accepts either a MatchResult (pairs with known type flags) or raw
    (correct, total) counts. None when nothing was matched.
    """
    if isinstance(matched, MatchResult):
        flags = [ok for _, _, ok in matched.pairs if ok is not None]
        if not flags:
            return None
        return sum(flags) / len(flags)
    if total == 0:
        return None
    return matched / total


def case_metrics(diseased, flagged):
    """Whole-case screening metrics over a cohort.

    diseased and flagged are aligned boolean sequences: the true cohort label
    and whether the case drew at least one post-threshold detection. Returns
    two (recall, precision, f1) triples: the first treats diseased cases as
    the positive class, the second treats healthy cases as positive (a
    healthy case is predicted healthy when nothing was flagged).
    """
    if len(diseased) != len(flagged):
        raise ValueError("diseased and flagged must align")
    d_tp = sum(1 for d, f in zip(diseased, flagged) if d and f)
    d_fp = sum(1 for d, f in zip(diseased, flagged) if not d and f)
    d_fn = sum(1 for d, f in zip(diseased, flagged) if d and not f)
    h_tp = sum(1 for d, f in zip(diseased, flagged) if not d and not f)
    h_fp = sum(1 for d, f in zip(diseased, flagged) if d and not f)
    h_fn = d_fp
    return prf(d_tp, d_fp, d_fn), prf(h_tp, h_fp, h_fn)


@dataclass
class FrocCurve:
    """FROC operating points and the averaged score.

    points hold (false positives per scan, recall) as the confidence
    threshold sweeps from high to low; score averages recall at the standard
    per-scan targets with step interpolation (the best recall reached at or
    under each target, 0 when even the strictest point overshoots). score is
    None when there is no ground truth to recall.
    """

    points: list
    score: float | None
    targets: tuple = FROC_TARGETS

    def recall_at(self, target):
        best = 0.0
        for fps, recall in self.points:
            if fps <= target and recall > best:
                best = recall
        return best


def froc(cases):
    """FROC over a list of (gt_boxes, detections) scans."""
    if not cases:
        raise ValueError("froc needs at least one scan")
    n_gt = sum(len(gts) for gts, _ in cases)
    confs = sorted({d.confidence for _, dets in cases for d in dets}, reverse=True)
    points = []
    for t in confs:
        tp = fp = 0
        for gts, dets in cases:
            kept = [d for d in dets if d.confidence >= t]
            m = match_detections(gts, kept)
            tp += m.tp
            fp += m.fp
        if n_gt:
            points.append((fp / len(cases), tp / n_gt))
    if not n_gt:
        return FrocCurve([], None)
    curve = FrocCurve(points, None)
    curve.score = sum(curve.recall_at(t) for t in FROC_TARGETS) / len(FROC_TARGETS)
    return curve


def save_froc_csv(path, curve):
    """FROC curve as CSV rows of (fp_per_scan, recall), sweep order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fp_per_scan", "recall"])
        for fps, recall in curve.points:
            writer.writerow([repr(fps), repr(recall)])


@dataclass
class EvalSummary:
    n_cases: int
    tp: int
    fp: int
    fn: int
    recall: float | None
    precision: float | None
    f1: float | None
    type_precision: float | None
    froc: FrocCurve
    case_diseased: tuple | None = None
    case_healthy: tuple | None = None


def group_annotations(annotations):
    """Annotations list -> {case_id: (boxes, types)}, insertion ordered."""
    out = {}
    for ann in annotations:
        boxes, types = out.setdefault(ann.case_id, ([], []))
        boxes.append(ann.box)
        types.append(ann.lesion_type)
    return out


def evaluate_detections(annotations, detections_by_case, case_ids=None):
    """Pool per-case matches into one detection and typing summary.

    annotations is a flat Annotation list (healthy cases simply have none);
    detections_by_case maps case id to Detection lists. case_ids fixes the
    evaluated cohort (so healthy cases with no detections still count);
    by default every case seen on either side participates. A case with
    detections but no annotations contributes false positives only. Cohort
    screening triples are included whenever the case list is known.
    """
    gt_by_case = group_annotations(annotations)
    if case_ids is None:
        case_ids = list(dict.fromkeys(list(gt_by_case) + list(detections_by_case)))
    tp = fp = fn = 0
    correct = total = 0
    froc_cases = []
    diseased = []
    flagged = []
    for cid in case_ids:
        boxes, types = gt_by_case.get(cid, ([], []))
        dets = detections_by_case.get(cid, [])
        m = match_detections(boxes, dets, types)
        tp += m.tp
        fp += m.fp
        fn += m.fn
        total += len(m.pairs)
        correct += sum(1 for _, _, ok in m.pairs if ok)
        froc_cases.append((boxes, dets))
        diseased.append(bool(boxes))
        flagged.append(bool(dets))
    recall, precision, f1 = prf(tp, fp, fn)
    case_d, case_h = case_metrics(diseased, flagged)
    return EvalSummary(len(case_ids), tp, fp, fn, recall, precision, f1,
                       classification_precision(correct, total),
                       froc(froc_cases), case_d, case_h)


DETECTION_FIELDS = ("case_id", "x", "y", "z", "d", "type", "confidence")


def save_detections(path, detections_by_case):
    """Write detections as CSV, one row per detection in confidence order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_FIELDS)
        for cid in detections_by_case:
            for det in sorted(detections_by_case[cid], key=_det_order):
                b = det.box
                writer.writerow([cid, repr(b.cx), repr(b.cy), repr(b.cz),
                                 repr(b.d), det.lesion_type,
                                 repr(det.confidence)])


def load_detections(path):
    """Read a detection CSV back into {case_id: [Detection, ...]}."""
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != DETECTION_FIELDS:
            raise DataError(f"{path}: expected header {','.join(DETECTION_FIELDS)}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DETECTION_FIELDS):
                raise DataError(f"{path}:{ln}: expected {len(DETECTION_FIELDS)} columns")
            try:
                cid = row[0]
                x, y, z, d = (float(v) for v in row[1:5])
                lesion_type = int(row[5])
                conf = float(row[6])
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: {exc}") from exc
            if d <= 0:
                raise DataError(f"{path}:{ln}: nonpositive diameter {d}")
            if lesion_type not in range(6):
                raise DataError(f"{path}:{ln}: lesion type {lesion_type} outside 0..5")
            if not 0.0 <= conf <= 1.0:
                raise DataError(f"{path}:{ln}: confidence {conf} outside [0, 1]")
            out.setdefault(cid, []).append(
                Detection(Box3(x, y, z, d), conf, lesion_type))
    return out
