"""Detector presets, parameter init, topology fingerprints, checkpoints.

Three width-parameterized presets share one encoder/decoder frame with a
stride-4 output grid:

  stem (full res) -> down/2 -> stage -> down/4 -> stage -> down/8 ->
  bottleneck -> upsample to /4 -> concat skip -> fuse -> 1x1x1 head

and differ in the stage/bottleneck blocks:

  unet_rpn     plain conv stages, plain bottleneck
  vnet_rpn     residual stages and bottleneck
  vnet_ir_rpn  residual stages, inception-resnet bottleneck

The head emits 3 anchors per cell with `head_values` numbers each
([conf, dx, dy, dz, dd] + 5 type scores for the full task, the first five for
the single-class pretraining task). Output shape is (g, g, g, 3, head_values)
with g = patch_size / 4.

Checkpoint file: one JSON manifest line (names, shapes, fingerprints,
metadata), newline, then every tensor's raw little-endian float32 bytes
concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError
from .layers import ConvBlock, Conv3d, IRBlock, PlainBlock, ResBlock, Upsample2x

PRESETS = ("unet_rpn", "vnet_rpn", "vnet_ir_rpn")
N_ANCHORS_PER_CELL = 3
OUTPUT_STRIDE = 4
# the encoder bottoms out at /8, so patches must divide by 8
MIN_DIVISOR = 8

FULL_HEAD_VALUES = 10
NODULE_HEAD_VALUES = 5


@dataclass
class ModelConfig:
    preset: str = "vnet_ir_rpn"
    patch_size: int = 32
    width: int = 8
    head_values: int = FULL_HEAD_VALUES
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")
        if self.patch_size % MIN_DIVISOR != 0:
            raise ValueError(
                f"patch size must be divisible by {MIN_DIVISOR}, got {self.patch_size}")
        if self.width < 4 or self.width % 2:
            raise ValueError(f"width must be an even integer >= 4, got {self.width}")
        if self.head_values not in (FULL_HEAD_VALUES, NODULE_HEAD_VALUES):
            raise ValueError(f"head_values must be 5 or 10, got {self.head_values}")

    @property
    def grid(self):
        return self.patch_size // OUTPUT_STRIDE


def _stage(kind, name, c, dtype):
    if kind == "plain":
        return PlainBlock(name, c, dtype=dtype)
    if kind == "res":
        return ResBlock(name, c, dtype=dtype)
    return IRBlock(name, c, dtype=dtype)


class Model:
    """One detector instance: layers, wiring, and parameter bookkeeping."""

    def __init__(self, cfg):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        w = cfg.width
        stage_kind = "plain" if cfg.preset == "unet_rpn" else "res"
        neck_kind = {"unet_rpn": "plain", "vnet_rpn": "res", "vnet_ir_rpn": "ir"}[cfg.preset]

        self.stem = ConvBlock("stem", 1, w, dtype=dtype)
        self.enc1 = ConvBlock("enc1", w, 2 * w, stride=2, dtype=dtype)
        self.stage1 = _stage(stage_kind, "stage1", 2 * w, dtype)
        self.enc2 = ConvBlock("enc2", 2 * w, 4 * w, stride=2, dtype=dtype)
        self.stage2 = _stage(stage_kind, "stage2", 4 * w, dtype)
        self.enc3 = ConvBlock("enc3", 4 * w, 8 * w, stride=2, dtype=dtype)
        self.neck = _stage(neck_kind, "neck", 8 * w, dtype)
        self.upsample = Upsample2x()
        self.up = ConvBlock("up", 8 * w, 4 * w, dtype=dtype)
        self.fuse = ConvBlock("fuse", 8 * w, 4 * w, dtype=dtype)
        self.head = Conv3d("head", 4 * w, N_ANCHORS_PER_CELL * cfg.head_values,
                           k=1, dtype=dtype)

        self._blocks = [self.stem, self.enc1, self.stage1, self.enc2, self.stage2,
                        self.enc3, self.neck, self.up, self.fuse]
        self._convs = []
        for blk in self._blocks:
            self._convs.extend(blk.layers())
        self._convs.append(self.head)
        self._skip_channels = 4 * w
        self._out_grid = None

        rng = np.random.default_rng(cfg.seed)
        for conv in self._convs:
            conv.init_params(rng)

    # --- structure -------------------------------------------------------

    def layer_specs(self, include_head=True):
        wiring = {"preset": self.cfg.preset,
                  "stages": [self.stage1.kind, self.stage2.kind, self.neck.kind]}
        specs = [c.spec() for c in self._convs if include_head or c.name != "head"]
        return {"wiring": wiring, "layers": specs}

    def fingerprint(self):
        blob = json.dumps(self.layer_specs(True), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def body_fingerprint(self):
        blob = json.dumps(self.layer_specs(False), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def params(self):
        out = {}
        for conv in self._convs:
            out.update(conv.params())
        return out

    def grads(self):
        out = {}
        for conv in self._convs:
            out.update(conv.grads())
        return out

    # --- compute ----------------------------------------------------------

    def forward(self, patch):
        """Run the detector on one normalized window.

        patch: (D, H, W) float array with values in [0, 1] (bytes / 255),
        every dim a multiple of 8. The layers are all convolutional, so the
        window need not match cfg.patch_size (that is the training size);
        inference may hand in a whole lung bounding box. Returns raw head
        outputs shaped (D/4, H/4, W/4, 3, head_values).
        """
        if patch.ndim != 3 or any(n % MIN_DIVISOR or n <= 0 for n in patch.shape):
            raise ValueError(
                f"window dims must be positive multiples of {MIN_DIVISOR}, got {patch.shape}")
        x = np.ascontiguousarray(patch[None], dtype=self.cfg.dtype)

        h0 = self.stem.forward(x)
        h1 = self.stage1.forward(self.enc1.forward(h0))
        h2 = self.stage2.forward(self.enc2.forward(h1))
        h3 = self.neck.forward(self.enc3.forward(h2))
        u = self.up.forward(self.upsample.forward(h3))
        cat = np.concatenate([u, h2], axis=0)
        f = self.fuse.forward(cat)
        raw = self.head.forward(f)

        gz, gy, gx = raw.shape[1:]
        self._out_grid = (gz, gy, gx)
        return np.moveaxis(raw, 0, -1).reshape(
            gz, gy, gx, N_ANCHORS_PER_CELL, self.cfg.head_values)

    def backward(self, upstream):
        """Backpropagate d(loss)/d(raw head output); fills every layer's grads.

        upstream has the same (gz, gy, gx, 3, head_values) shape forward
        returned.
        """
        if self._out_grid is None:
            raise RuntimeError("backward called before forward")
        gz, gy, gx = self._out_grid
        c = N_ANCHORS_PER_CELL * self.cfg.head_values
        d_raw = np.moveaxis(upstream.reshape(gz, gy, gx, c), -1, 0)
        d_raw = np.ascontiguousarray(d_raw, dtype=self.cfg.dtype)

        df = self.head.backward(d_raw)
        dcat = self.fuse.backward(df)
        du = dcat[: self._skip_channels]
        dh2_skip = dcat[self._skip_channels:]
        dh3 = self.upsample.backward(self.up.backward(du))
        dh2 = self.enc3.backward(self.neck.backward(dh3)) + dh2_skip
        dh1 = self.enc2.backward(self.stage2.backward(dh2))
        dh0 = self.enc1.backward(self.stage1.backward(dh1))
        return self.stem.backward(dh0)


def build_model(cfg):
    return Model(cfg)


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = "ctbckpt1"


@dataclass
class Checkpoint:
    fingerprint: str
    body_fingerprint: str
    tensors: dict
    meta: dict = field(default_factory=dict)


def model_to_checkpoint(model, meta=None):
    meta = dict(meta or {})
    meta.setdefault("preset", model.cfg.preset)
    meta.setdefault("width", model.cfg.width)
    meta.setdefault("patch_size", model.cfg.patch_size)
    meta.setdefault("head_values", model.cfg.head_values)
    # copy so later optimizer steps cannot mutate the snapshot
    tensors = {k: np.array(v, dtype=np.float32) for k, v in model.params().items()}
    return Checkpoint(model.fingerprint(), model.body_fingerprint(), tensors, meta)


def save_checkpoint(ck, path):
    names = list(ck.tensors.keys())
    manifest = {
        "magic": CKPT_MAGIC,
        "fingerprint": ck.fingerprint,
        "body_fingerprint": ck.body_fingerprint,
        "meta": ck.meta,
        "tensors": [{"name": n, "shape": list(ck.tensors[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("ascii") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(ck.tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing checkpoint manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint manifest") from exc
    if manifest.get("magic") != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    payload = raw[nl + 1:]
    tensors = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise DataError(f"{path}: checkpoint payload truncated at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} trailing bytes in checkpoint")
    return Checkpoint(manifest["fingerprint"], manifest["body_fingerprint"],
                      tensors, manifest.get("meta", {}))


def model_from_checkpoint(ck, seed=0, dtype="float32", patch_size=None):
    """Rebuild a model from checkpoint metadata and load its weights."""
    meta = ck.meta
    cfg = ModelConfig(
        preset=meta["preset"], patch_size=int(patch_size or meta["patch_size"]),
        width=int(meta["width"]), head_values=int(meta["head_values"]),
        seed=seed, dtype=dtype)
    model = Model(cfg)
    init_from_checkpoint(model, ck)
    return model


def init_from_checkpoint(model, ck, reinit_output=False):
    """Copy checkpoint tensors into a freshly built model.

    With reinit_output the head keeps its seeded-normal initialization and
    only the body is copied; fingerprints are then compared with the head
    excluded, which is how a 5-value pretraining head transfers into the
    10-value task.
    """
    if reinit_output:
        if ck.body_fingerprint != model.body_fingerprint():
            raise ValueError("checkpoint body does not match this model's topology")
    else:
        if ck.fingerprint != model.fingerprint():
            raise ValueError("checkpoint does not match this model's topology")
    dtype = np.dtype(model.cfg.dtype)
    for conv in model._convs:
        if reinit_output and conv.name == "head":
            continue
        wk, bk = f"{conv.name}.w", f"{conv.name}.b"
        if ck.tensors[wk].shape != conv.w.shape or ck.tensors[bk].shape != conv.b.shape:
            raise ValueError(f"checkpoint tensor shape mismatch at {conv.name}")
        conv.w = ck.tensors[wk].astype(dtype)
        conv.b = ck.tensors[bk].astype(dtype)
    return model
