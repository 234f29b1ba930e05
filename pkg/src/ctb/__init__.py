"""Desk-scale quantitative CT analysis of pulmonary tuberculosis phantoms.

The package covers the full loop: synthetic phantom generation, lung
extraction, anchor-based 3D lesion detection with five-way typing,
per-lung infection scoring, volume and calcification measurement,
detection metrics, and a quantitative text/JSON/image report.
"""

__version__ = "0.1.0"

from .anchors import (ANCHOR_STRIDE, DEFAULT_SCALES, AnchorGrid, Box3,
                      RegressionTarget, anchor_grid, anchor_grid_3d,
                      assign_labels, decode_box, encode_box, iou_cubes)
from .errors import DataError, StageError, UsageError
from .evaluate import (EvalSummary, FrocCurve, case_metrics,
                       classification_precision, evaluate_detections, froc,
                       match_detections, prf)
from .losses import LossBreakdown, detection_loss
from .net.model import (Model, ModelConfig, init_from_checkpoint,
                        load_checkpoint, model_from_checkpoint,
                        model_to_checkpoint, save_checkpoint)
from .phantom import PhantomSpec, generate_case, generate_dataset
from .lungmask import LungMask, apply_mask, extract_lung_mask
from .postprocess import (CaseAnalysis, Detection, InferConfig, LungAnalysis,
                          analyze_case, detect_case, infer_case, lung_volume,
                          noisy_or)
from .report import render_json_report, render_text_report, write_report_tree
from .train import TrainConfig, preprocess_dataset, sample_patch, train_loop
from .volume import (Annotation, NormalizedVolume, Volume, load_annotations,
                     load_volume, normalize_hu, resample_nearest,
                     save_annotations, save_volume)
