"""Render a case analysis: text table, JSON twin, annotated slice images.

The text report is a tab-separated two-column table (left lung, right lung):
per-lung overall infection probability, effective volume, then one line per
lesion sorted by slice index. Lesion coordinates are source-image pixels with
the origin at the lower-left corner, the slice number standing in for z.

The JSON document carries every rendered number at full precision plus the
machine extras (type probability vectors, calcification voxel counts,
detection thresholds); the text report is a pure formatting of it.

Annotated slices show the slice holding each lesion's center as 8-bit
grayscale with a white square at the box extent, the confidence above, the
type digit below, and `cal {n}` to the left when calcified.
"""

from __future__ import annotations

import json
from itertools import zip_longest
from pathlib import Path

from PIL import Image, ImageDraw

from .volume import normalize_hu

TITLE = "Quantitative diagnostic report of PTB"
_HEADER_KEYS = (("name", "Name"), ("dob", "Date of Birth"),
                ("gender", "Gender"), ("study_date", "Study Date"))


def confidence_label(confidence):
    """Confidence as drawn on the image: two decimals, trailing zeros cut."""
    return f"{confidence:.2f}".rstrip("0").rstrip(".")


def lesion_line(det):
    """One text-report lesion line from a detection's pixel report fields."""
    cal = "yes" if det.calcified else "no"
    return (f"{det.slice_index} th slice, x = {det.x_px}, y = {det.y_px}, "
            f"d = {det.d_px}, type: {det.lesion_type} ({det.type_name}), "
            f"IP = {det.confidence * 100.0:.1f}%, Cal.: {cal}")


def _lung_lines(lung):
    lines = [f"Overall IP: {lung.infection_probability * 100.0:.1f}%",
             f"Effective volume: {lung.volume_cm3:.2f} (cm³)"]
    dets = sorted(lung.detections,
                  key=lambda d: (d.slice_index, d.x_px, d.y_px, d.d_px))
    lines.extend(lesion_line(d) for d in dets)
    return lines


def render_text_report(analysis, header=None):
    """The full text report, ending in a newline."""
    header = dict(analysis.header) if header is None else dict(header)
    head = ", ".join(f"{label}: {header.get(key, 'xxx')}"
                     for key, label in _HEADER_KEYS)
    left = ["Left lung:"] + _lung_lines(analysis.left)
    right = ["Right lung:"] + _lung_lines(analysis.right)
    lines = [TITLE, "", head, ""]
    lines.extend(f"{l}\t{r}" for l, r in zip_longest(left, right, fillvalue=""))
    lines.append("")
    lines.append(f"Case: {analysis.case_id}")
    for key in sorted(analysis.provenance):
        lines.append(f"{key}: {analysis.provenance[key]}")
    return "\n".join(lines) + "\n"


def _lesion_entry(det):
    return {
        "slice": det.slice_index,
        "x": det.x_px,
        "y": det.y_px,
        "d": det.d_px,
        "type": det.lesion_type,
        "type_name": det.type_name,
        "confidence": det.confidence,
        "calcified": det.calcified,
        "calc_voxels": det.calc_voxels,
        "side_fallback": det.side_fallback,
        "box_mm": {"cx": det.box.cx, "cy": det.box.cy, "cz": det.box.cz,
                   "d": det.box.d},
        "type_probs": None if det.type_probs is None
        else [float(p) for p in det.type_probs],
    }


def _lung_entry(lung):
    dets = sorted(lung.detections,
                  key=lambda d: (d.slice_index, d.x_px, d.y_px, d.d_px))
    return {
        "infection_probability": lung.infection_probability,
        "volume_cm3": lung.volume_cm3,
        "lesions": [_lesion_entry(d) for d in dets],
    }


def render_json_report(analysis, header=None):
    """JSON twin of the text report: canonical key order, trailing newline."""
    header = dict(analysis.header) if header is None else dict(header)
    doc = {
        "case_id": analysis.case_id,
        "header": {key: header.get(key, "xxx") for key, _ in _HEADER_KEYS},
        "overall_probability": analysis.overall_probability,
        "single_lung": analysis.single_lung,
        "lungs": {"left": _lung_entry(analysis.left),
                  "right": _lung_entry(analysis.right)},
        "provenance": analysis.provenance,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def annotation_strings(det):
    """(above, below, left) labels for one box; left is None when clean."""
    above = confidence_label(det.confidence)
    below = str(det.lesion_type)
    left = f"cal {det.calc_voxels}" if det.calcified else None
    return above, below, left


def _draw_box(draw, det, width, height):
    x0 = det.x_px - det.d_px // 2
    y0 = (height - 1 - det.y_px) - det.d_px // 2
    x1 = x0 + det.d_px - 1
    y1 = y0 + det.d_px - 1
    draw.rectangle((max(0, x0), max(0, y0), min(width - 1, x1),
                    min(height - 1, y1)), outline=255, width=1)
    above, below, left = annotation_strings(det)
    draw.text((max(0, x0), max(0, y0 - 12)), above, fill=255)
    draw.text((max(0, x0), min(height - 12, y1 + 2)), below, fill=255)
    if left is not None:
        draw.text((max(0, x0 - 6 * len(left) - 3), max(0, (y0 + y1) // 2 - 5)),
                  left, fill=255)


def render_annotated_slices(analysis, vol):
    """Annotated center slices keyed by 1-based slice number.

    Only the slice holding each lesion's center is drawn; lesions sharing a
    slice land on the same image. The background is the normalized source
    slice; overlays are maximum intensity.
    """
    nz, ny, nx = vol.voxels.shape
    by_slice = {}
    for det in analysis.detections:
        if not 1 <= det.slice_index <= nz:
            raise ValueError(
                f"lesion slice {det.slice_index} outside 1..{nz}")
        by_slice.setdefault(det.slice_index, []).append(det)
    if not by_slice:
        return {}
    bytes_ = normalize_hu(vol).voxels
    images = {}
    for k in sorted(by_slice):
        img = Image.fromarray(bytes_[k - 1], mode="L")
        draw = ImageDraw.Draw(img)
        for det in sorted(by_slice[k], key=lambda d: (d.x_px, d.y_px, d.d_px)):
            _draw_box(draw, det, nx, ny)
        images[k] = img
    return images


def write_report_tree(analysis, vol, out_dir, header=None):
    """Write report.txt, report.json, and slices/slice_{k}.png under out_dir.

    Returns the paths written, report files first.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    txt = out / "report.txt"
    txt.write_text(render_text_report(analysis, header))
    paths.append(txt)
    js = out / "report.json"
    js.write_text(render_json_report(analysis, header))
    paths.append(js)
    images = render_annotated_slices(analysis, vol)
    if images:
        slices = out / "slices"
        slices.mkdir(exist_ok=True)
        for k in sorted(images):
            p = slices / f"slice_{k}.png"
            images[k].save(p, format="PNG")
            paths.append(p)
    return paths
