"""Detection losses: confidence, box regression, lesion-type classification.

Per anchor the total is

    L = L_conf + p * (L_reg + LAMBDA_CLASS * L_cls)

with p the 0/1 anchor label, L_conf binary cross-entropy on the lesion
probability, L_reg a robust piecewise penalty summed over the four box
offsets, and L_cls categorical cross-entropy over the five lesion types. All
logs are natural. The regression penalty is literal:

    S(delta) = |delta|   if |delta| > 1
               delta^2   otherwise

with no extra factors; at |delta| == 1 both branches agree on the value and
the quadratic branch supplies the (sub)gradient 2*delta.

The scalar functions take probabilities and mirror the formulas exactly; the
batch path (detection_loss) works on raw network outputs in logit space so
extreme confidences stay finite, and returns analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import IGNORE, POSITIVE

LAMBDA_CLASS = 0.5
N_TYPES = 5

# raw head channel layout per anchor
CH_CONF = 0
CH_REG = slice(1, 5)
CH_CLS = slice(5, 10)


@dataclass(frozen=True)
class AnchorPrediction:
    """Probability-space prediction for one anchor: p_hat in (0, 1),
    t_hat the regression offsets, y_hat the 5-way type distribution."""

    p_hat: float
    t_hat: object
    y_hat: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    conf: float
    reg: float
    cls: float

    @property
    def total(self):
        # the anchor label gates reg and cls before they enter the breakdown,
        # so the composition rule is always this sum
        return self.conf + self.reg + LAMBDA_CLASS * self.cls


def conf_loss(p, p_hat):
    """Binary cross-entropy, natural log. p is the 0/1 label."""
    if not 0.0 < p_hat < 1.0:
        raise ValueError(f"p_hat must be strictly inside (0, 1), got {p_hat}")
    return -(p * math.log(p_hat) + (1.0 - p) * math.log(1.0 - p_hat))


def _robust(delta):
    a = abs(delta)
    return a if a > 1.0 else delta * delta


def reg_loss(target, pred):
    """Sum of the robust penalty over (dx, dy, dz, dd) offset differences."""
    return (
        _robust(pred.dx - target.dx)
        + _robust(pred.dy - target.dy)
        + _robust(pred.dz - target.dz)
        + _robust(pred.dd - target.dd)
    )


def class_loss(y, y_hat):
    """Categorical cross-entropy; y is the true type index (0..4)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape != (N_TYPES,):
        raise ValueError(f"y_hat must have {N_TYPES} entries, got shape {y_hat.shape}")
    if np.any(y_hat <= 0.0):
        raise ValueError("y_hat entries must be strictly positive")
    return -math.log(y_hat[y])


def total_loss(label, pred, target=None, lesion_type=None):
    """Per-anchor composite loss in probability space.

    label is 0 or 1. For a positive anchor, target (RegressionTarget) and
    lesion_type (0..4) must be given; for a negative anchor both terms are
    gated off and need not be supplied.
    """
    c = conf_loss(label, pred.p_hat)
    if label:
        if target is None or lesion_type is None:
            raise ValueError("positive anchors need a regression target and a type")
        r = reg_loss(target, pred.t_hat)
        k = class_loss(lesion_type, pred.y_hat)
    else:
        r = 0.0
        k = 0.0
    return LossBreakdown(c, r, k)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(logit, label):
    # max(l, 0) - l*p + log(1 + exp(-|l|)), stable for any logit
    return np.maximum(logit, 0.0) - logit * label + np.log1p(np.exp(-np.abs(logit)))


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def detection_loss(raw, state, reg_targets, type_labels, with_types=True):
    """Mean composite loss and its gradient over a patch's raw head output.

    raw: (n_anchors, values) float array straight from the network, values
         laid out [conf_logit, dx, dy, dz, dd, type logits...] (types absent
         when with_types is False, e.g. the 5-value pretraining head).
    state: anchor label states; IGNORE anchors contribute nothing. Callers do
         negative subsampling by flipping unused negatives to IGNORE first.
    reg_targets: (n_anchors, 4) encoded offsets, only read at positive rows.
    type_labels: (n_anchors,) type indices 0..4, only read at positive rows.

    Returns (LossBreakdown, grad) with grad shaped like raw; entries are means
    over the contributing (non-ignored) anchors.
    """
    raw = np.asarray(raw)
    contributing = state != IGNORE
    n = int(contributing.sum())
    grad = np.zeros_like(raw)
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0), grad

    pos = state == POSITIVE
    labels = pos.astype(raw.dtype)

    logit = raw[:, CH_CONF]
    conf_terms = _bce_with_logits(logit, labels)
    conf = float(conf_terms[contributing].sum()) / n
    grad[:, CH_CONF] = np.where(contributing, _sigmoid(logit) - labels, 0.0) / n

    reg = 0.0
    cls = 0.0
    if pos.any():
        delta = raw[pos, CH_REG] - reg_targets[pos]
        outside = np.abs(delta) > 1.0
        terms = np.where(outside, np.abs(delta), delta * delta)
        reg = float(terms.sum()) / n
        dreg = np.where(outside, np.sign(delta), 2.0 * delta) / n
        grad[np.ix_(pos, range(CH_REG.start, CH_REG.stop))] = dreg

        if with_types:
            logits = raw[pos, CH_CLS]
            logp = _log_softmax(logits)
            rows = np.arange(logp.shape[0])
            picked = type_labels[pos]
            cls = float(-logp[rows, picked].sum()) / n
            soft = np.exp(logp)
            soft[rows, picked] -= 1.0
            grad[np.ix_(pos, range(CH_CLS.start, CH_CLS.stop))] = LAMBDA_CLASS * soft / n

    return LossBreakdown(conf, reg, cls), grad
