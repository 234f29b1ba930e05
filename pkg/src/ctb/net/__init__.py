"""Hand-rolled 3D detection networks (forward and backward in numpy/Cython)."""

from .kernels import active_backend, native_available
from .model import (
    FULL_HEAD_VALUES,
    NODULE_HEAD_VALUES,
    Checkpoint,
    Model,
    ModelConfig,
    PRESETS,
    build_model,
    init_from_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    model_to_checkpoint,
    save_checkpoint,
)

__all__ = [
    "FULL_HEAD_VALUES",
    "NODULE_HEAD_VALUES",
    "Checkpoint",
    "Model",
    "ModelConfig",
    "PRESETS",
    "active_backend",
    "build_model",
    "init_from_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "model_to_checkpoint",
    "native_available",
    "save_checkpoint",
]
