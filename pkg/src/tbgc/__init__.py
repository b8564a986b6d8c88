"""Per-task backbone-oriented gradient clipping for multi-task training."""

from .gradclip import ClipConfig, ClipMode, VanillaSemantics, tbgc_clip, vanilla_clip
from .mtmodel import ModelConfig, ParamStore, init_model, make_tasks
from .trainer import TrainConfig, lr_at, multitask_step, train

__version__ = "0.1.0"

__all__ = [
    "ClipConfig", "ClipMode", "ModelConfig", "ParamStore", "TrainConfig", "VanillaSemantics",
    "init_model", "lr_at", "make_tasks", "multitask_step", "tbgc_clip", "train", "vanilla_clip",
]
