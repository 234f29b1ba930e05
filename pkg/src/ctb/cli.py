"""Command-line front door: synth | preprocess | train | detect | eval | report.

Each sub-command wraps one pipeline stage. Exit codes: 0 success, 1 usage
error, 2 bad data, 3 internal failure. All commands are deterministic given
the same inputs and seeds. CTB_THREADS caps internal parallelism (defaults
to 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import DataError, StageError, UsageError
from .evaluate import evaluate_detections, load_detections, save_detections, save_froc_csv
from .net.model import (FULL_HEAD_VALUES, NODULE_HEAD_VALUES, PRESETS,
                        ModelConfig, load_checkpoint, model_from_checkpoint)
from .phantom import (NODULE_LESION_COUNTS, PhantomSpec, generate_dataset,
                      load_manifest)
from .postprocess import InferConfig, analyze_case, detect_case
from .report import write_report_tree
from .train import TrainConfig, load_train_config, preprocess_dataset, train_loop
from .volume import load_annotations, load_volume


@dataclass
class PipelineConfig:
    """Validated common knobs shared by the inference-side commands."""

    threshold: float = 0.38
    nms_iou: float = 0.1
    patch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise UsageError(f"--threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 <= self.nms_iou < 1.0:
            raise UsageError(f"--nms-iou must be in [0, 1), got {self.nms_iou}")

    def infer_config(self):
        try:
            return InferConfig(threshold=self.threshold, nms_iou=self.nms_iou,
                               patch_size=self.patch_size)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit 1
    def error(self, message):
        raise UsageError(message)


def _existing(path, kind="path"):
    p = Path(path)
    if not p.exists():
        raise DataError(f"{kind} not found: {p}")
    return p


def _load_model(path):
    ck = load_checkpoint(_existing(path, "checkpoint"))
    return model_from_checkpoint(ck)


def _spec_from_file(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable phantom spec: {exc}") from exc
    known = {f.name for f in fields(PhantomSpec)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"{path}: unknown phantom spec keys {sorted(unknown)}")
    for key in ("dims", "body_semi", "body_z", "lung_semi"):
        if key in raw:
            raw[key] = tuple(raw[key])
    if "size_ranges" in raw:
        raw["size_ranges"] = {int(k): tuple(v) for k, v in raw["size_ranges"].items()}
    if "lesion_counts" in raw:
        raw["lesion_counts"] = {int(k): int(v) for k, v in raw["lesion_counts"].items()}
    try:
        return PhantomSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad phantom spec: {exc}") from exc


def cmd_synth(args):
    if args.spec is not None:
        spec = _spec_from_file(_existing(args.spec, "spec file"))
    else:
        spec = PhantomSpec()
    if args.profile == "nodule":
        spec.lesion_counts = dict(NODULE_LESION_COUNTS)
    if args.cases < 1:
        raise UsageError(f"--cases must be >= 1, got {args.cases}")
    if not 0.0 <= args.healthy_fraction <= 1.0:
        raise UsageError(f"--healthy-fraction must be in [0, 1], got {args.healthy_fraction}")
    manifest = generate_dataset(spec, args.cases, args.healthy_fraction,
                                args.seed, args.out)
    print(f"wrote {len(manifest['cases'])} cases to {args.out}")
    return 0


def cmd_preprocess(args):
    index = preprocess_dataset(_existing(args.data, "dataset"), args.out,
                               threads=args.threads)
    print(f"preprocessed {len(index['cases'])} cases into {args.out}")
    return 0


def cmd_train(args):
    if args.config is not None:
        cfg = load_train_config(_existing(args.config, "config"))
    else:
        cfg = TrainConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.patch_size is not None:
        cfg.patch_size = args.patch_size
    head = NODULE_HEAD_VALUES if args.task == "nodule" else FULL_HEAD_VALUES
    try:
        cfg = TrainConfig(**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)})
        model_cfg = ModelConfig(preset=args.preset, patch_size=cfg.patch_size,
                                width=args.width, head_values=head,
                                seed=args.model_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    init = None
    if args.init is not None:
        init = load_checkpoint(_existing(args.init, "checkpoint"))
    checkpoint, curve = train_loop(_existing(args.data, "cache index"), cfg,
                                   model_cfg, init=init, out_dir=args.out)
    final = curve[-1]
    best = checkpoint.meta.get("val_f1")
    print(f"trained {cfg.epochs} epochs; final mean loss {final[1]:.4f}; "
          f"best val f1 {'n/a' if best is None else f'{best:.3f}'}; "
          f"wrote {Path(args.out) / 'checkpoint.ctbk'}")
    return 0


def _detect_paths(data):
    data = _existing(data, "input")
    if data.is_dir():
        manifest = load_manifest(data / "manifest.json")
        return [(e["case_id"], data / e["file"]) for e in manifest["cases"]]
    return [(data.stem, data)]


def cmd_detect(args):
    pipe = PipelineConfig(args.threshold, args.nms_iou, args.patch_size, args.seed)
    model = _load_model(args.checkpoint)
    cfg = pipe.infer_config()
    detections = {}
    for case_id, path in _detect_paths(args.data):
        vol = load_volume(path)
        detections[case_id] = detect_case(vol, model, cfg)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_detections(out, detections)
    total = sum(len(v) for v in detections.values())
    print(f"{total} detections over {len(detections)} cases -> {out}")
    return 0


def _fmt(value, digits=3):
    return "undefined" if value is None else f"{value:.{digits}f}"


def cmd_eval(args):
    annotations = load_annotations(_existing(args.annotations, "annotations"))
    detections = load_detections(_existing(args.detections, "detections"))
    case_ids = None
    if args.manifest is not None:
        manifest = load_manifest(_existing(args.manifest, "manifest"))
        case_ids = [e["case_id"] for e in manifest["cases"]]
    try:
        summary = evaluate_detections(annotations, detections, case_ids)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    fr = summary.froc
    lines = [
        f"cases: {summary.n_cases}",
        f"lesions: tp {summary.tp}  fp {summary.fp}  fn {summary.fn}",
        f"recall {_fmt(summary.recall)}  precision {_fmt(summary.precision)}  "
        f"f1 {_fmt(summary.f1)}",
        f"type precision: {_fmt(summary.type_precision)}",
        f"froc score: {_fmt(fr.score)}",
        f"case screening, diseased positive: recall {_fmt(summary.case_diseased[0])}  "
        f"precision {_fmt(summary.case_diseased[1])}  f1 {_fmt(summary.case_diseased[2])}",
        f"case screening, healthy positive: recall {_fmt(summary.case_healthy[0])}  "
        f"precision {_fmt(summary.case_healthy[1])}  f1 {_fmt(summary.case_healthy[2])}",
    ]
    print("\n".join(lines))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "n_cases": summary.n_cases,
            "tp": summary.tp, "fp": summary.fp, "fn": summary.fn,
            "recall": summary.recall,
            "precision": summary.precision,
            "f1": summary.f1,
            "type_precision": summary.type_precision,
            "froc_score": fr.score,
            "froc_recall_at": {repr(t): fr.recall_at(t) for t in fr.targets},
            "case_diseased": list(summary.case_diseased),
            "case_healthy": list(summary.case_healthy),
        }
        (out / "metrics.json").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n")
        save_froc_csv(out / "froc.csv", fr)
        print(f"wrote {out / 'metrics.json'} and {out / 'froc.csv'}")
    return 0


def cmd_report(args):
    pipe = PipelineConfig(args.threshold, args.nms_iou, args.patch_size, args.seed)
    model = _load_model(args.checkpoint)
    path = _existing(args.case, "case file")
    vol = load_volume(path)
    header = {}
    for key in ("name", "dob", "gender", "study_date"):
        value = getattr(args, key)
        if value is not None:
            header[key] = value
    analysis = analyze_case(vol, model, pipe.infer_config(),
                            case_id=path.stem, header=header)
    paths = write_report_tree(analysis, vol, args.out)
    print(f"wrote {len(paths)} files under {args.out} "
          f"({len(analysis.detections)} lesions)")
    return 0


def _add_pipeline_flags(sub):
    sub.add_argument("--threshold", type=float, default=0.38,
                     help="detection confidence threshold (default 0.38)")
    sub.add_argument("--nms-iou", type=float, default=0.1,
                     help="NMS IoU threshold (default 0.1)")
    sub.add_argument("--patch-size", type=int, default=None,
                     help="inference tile side in mm; omit to fit each lung's "
                          "bounding box in one window")
    sub.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="ctb",
                     description="Desk-scale quantitative CT analysis of "
                                 "pulmonary tuberculosis phantoms.",
                     epilog="Environment: CTB_THREADS caps internal parallelism.")
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--cases", type=int, default=20)
    synth.add_argument("--healthy-fraction", type=float, default=0.5)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--spec", default=None, help="phantom spec JSON file")
    synth.add_argument("--profile", choices=("ptb", "nodule"), default="ptb",
                       help="lesion profile; nodule keeps only solid nodules")
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)

    prep = subs.add_parser("preprocess", help="build the training cache")
    prep.add_argument("--data", required=True, help="generated dataset dir")
    prep.add_argument("--threads", type=int, default=None)
    prep.add_argument("--out", required=True)
    prep.set_defaults(func=cmd_preprocess)

    train = subs.add_parser("train", help="train a detector")
    train.add_argument("--data", required=True, help="preprocessed cache dir")
    train.add_argument("--config", default=None, help="TrainConfig JSON file")
    train.add_argument("--init", default=None,
                       help="checkpoint to start from; a body-only match "
                            "re-initializes the output head")
    train.add_argument("--preset", choices=PRESETS, default="vnet_ir_rpn")
    train.add_argument("--width", type=int, default=8)
    train.add_argument("--task", choices=("ptb", "nodule"), default="ptb",
                       help="nodule trains the 5-value single-class head")
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--patch-size", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--model-seed", type=int, default=0)
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    detect = subs.add_parser("detect", help="detect lesions, write CSV")
    detect.add_argument("--data", required=True,
                        help="a dataset dir (all cases) or one .ctv file")
    detect.add_argument("--checkpoint", required=True)
    detect.add_argument("--out", required=True, help="detections CSV path")
    _add_pipeline_flags(detect)
    detect.set_defaults(func=cmd_detect)

    ev = subs.add_parser("eval", help="score detections against annotations")
    ev.add_argument("--detections", required=True)
    ev.add_argument("--annotations", required=True)
    ev.add_argument("--manifest", default=None,
                    help="dataset manifest fixing the evaluated cohort")
    ev.add_argument("--out", default=None, help="directory for metrics.json + froc.csv")
    ev.set_defaults(func=cmd_eval)

    rep = subs.add_parser("report", help="analyze one case, write report tree")
    rep.add_argument("--case", required=True, help="a .ctv volume")
    rep.add_argument("--checkpoint", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--name", default=None)
    rep.add_argument("--dob", default=None)
    rep.add_argument("--gender", default=None)
    rep.add_argument("--study-date", dest="study_date", default=None)
    _add_pipeline_flags(rep)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps to exit 3
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
