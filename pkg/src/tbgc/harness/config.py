"""Experiment configuration (TOML).

Top-level keys ``seed`` and ``out_dir`` plus the tables ``[train]``,
``[clip]``, ``[model]``, ``[tasks.<id>]`` and ``[augment.<id>]``. Every key
is optional. Defaults: AdamW with base lr 1e-4 and weight decay 1e-4,
5 warm-up epochs at ratio 0.001, 100 epochs, backbone lr x0.1, max norm
0.1, batch sizes det/seg/cls = 2/2/8.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w

from ..augment import AugBranch, AugOp, AugmentError, MultiBranchPipeline, ParallelPipeline
from ..gradclip import ClipConfig
from ..mtmodel import CLS, DET, SEG, TASKS, ArcFaceConfig, BackboneConfig, ModelConfig
from ..trainer import TrainConfig

METRICS = {CLS: "top1", SEG: "mean_pixel_iou", DET: "box_iou50_rate"}
AUG_MODES = ("none", "multibranch", "parallel")


class ConfigError(ValueError):
    def __init__(self, where: str, message: str) -> None:
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass
class TaskSpec:
    task: str
    size: int = 256
    batch_size: int = 2
    loss_scale: float = 1.0
    noise: float = 0.3

    @property
    def metric(self) -> str:
        return METRICS[self.task]


def default_tasks() -> dict[str, TaskSpec]:
    return {
        DET: TaskSpec(DET, size=256, batch_size=2, loss_scale=100.0, noise=0.1),
        SEG: TaskSpec(SEG, size=256, batch_size=2, loss_scale=10.0, noise=0.3),
        CLS: TaskSpec(CLS, size=1024, batch_size=8, loss_scale=1.0, noise=0.5),
    }


@dataclass
class AugmentSpec:
    mode: str = "none"
    branches: list[list[dict]] = field(default_factory=list)
    start_probs: list[float] = field(default_factory=list)
    end_probs: list[float] = field(default_factory=list)
    parallel: list[dict] = field(default_factory=list)

    def build(self, total_epochs: int, mode: str | None = None):
        mode = mode or self.mode
        if mode == "none":
            return None
        if mode == "parallel":
            return ParallelPipeline([AugOp.from_dict(d) for d in self.parallel])
        return MultiBranchPipeline(
            [AugBranch(tuple(AugOp.from_dict(d) for d in b)) for b in self.branches],
            self.start_probs,
            self.end_probs or None,
            total_epochs,
        )


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tasks: dict[str, TaskSpec] = field(default_factory=default_tasks)
    augment: dict[str, AugmentSpec] = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return self.model.backbone.input_shape[0]

    def with_clip(self, **kw) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        clip = {**_clip_dict(out.train.clip), **kw}
        out.train.clip = ClipConfig(**clip)
        return out

    def to_dict(self) -> dict:
        t = self.train
        m = self.model
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "train": {
                "epochs": t.epochs, "base_lr": t.base_lr, "weight_decay": t.weight_decay,
                "warmup_epochs": t.warmup_epochs, "warmup_ratio": t.warmup_ratio,
                "backbone_lr_factor": t.backbone_lr_factor,
                "log_iters_per_epoch": t.log_iters_per_epoch,
                "checkpoint_every": t.checkpoint_every,
            },
            "clip": _clip_dict(t.clip),
            "model": {
                "image_size": m.backbone.input_shape[0],
                "hidden": list(m.backbone.hidden),
                "feature_dim": m.backbone.feature_dim,
                "cls_hidden": m.cls_hidden,
                "num_classes": m.arcface.num_classes,
                "arcface_margin": m.arcface.margin,
                "arcface_scale": m.arcface.scale,
                "seg_classes": m.seg_classes,
                "smooth_l1_beta": m.smooth_l1_beta,
            },
            "tasks": {
                k: {"size": s.size, "batch_size": s.batch_size, "loss_scale": s.loss_scale, "noise": s.noise}
                for k, s in self.tasks.items()
            },
            "augment": {
                k: _drop_none({
                    "mode": a.mode, "branches": a.branches, "start_probs": a.start_probs,
                    "end_probs": a.end_probs, "parallel": a.parallel,
                })
                for k, a in self.augment.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _parse(d)


def _clip_dict(c: ClipConfig) -> dict:
    return {"mode": c.mode.value, "max_norm": c.max_norm, "vanilla": c.vanilla.value, "eps": c.eps}


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


# ------------------------------------------------------------------ parsing


def _table(d: dict, key: str, where: str) -> dict:
    v = d.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"{where}{key}", "must be a table")
    return v


def _take(tbl: dict, where: str, key: str, kind, default):
    if key not in tbl:
        return default
    v = tbl[key]
    ok = {
        int: isinstance(v, int) and not isinstance(v, bool),
        float: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: isinstance(v, str),
        list: isinstance(v, list),
    }[kind]
    if not ok:
        raise ConfigError(f"{where}.{key}", f"expected {kind.__name__}, got {v!r}")
    return float(v) if kind is float else v


def _reject_unknown(tbl: dict, where: str, allowed) -> None:
    extra = sorted(set(tbl) - set(allowed))
    if extra:
        raise ConfigError(f"{where}.{extra[0]}" if where else extra[0], "unknown key")


def _parse(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a table")
    _reject_unknown(d, "", ("seed", "out_dir", "train", "clip", "model", "tasks", "augment"))
    base = ExperimentConfig()
    seed = _take(d, "<root>", "seed", int, base.seed)
    out_dir = _take(d, "<root>", "out_dir", str, base.out_dir)

    tr = _table(d, "train", "")
    train_keys = {
        "epochs": int, "base_lr": float, "weight_decay": float, "warmup_epochs": int,
        "warmup_ratio": float, "backbone_lr_factor": float, "log_iters_per_epoch": int,
        "checkpoint_every": int,
    }
    _reject_unknown(tr, "train", train_keys)
    train_kw = {k: _take(tr, "train", k, t, getattr(base.train, k)) for k, t in train_keys.items()}

    cl = _table(d, "clip", "")
    _reject_unknown(cl, "clip", ("mode", "max_norm", "vanilla", "eps"))
    try:
        clip = ClipConfig(
            mode=_take(cl, "clip", "mode", str, "tbgc"),
            max_norm=_take(cl, "clip", "max_norm", float, 0.1),
            vanilla=_take(cl, "clip", "vanilla", str, "literal"),
            eps=_take(cl, "clip", "eps", float, 1e-12),
        )
    except ValueError as exc:
        raise ConfigError("clip", str(exc)) from None

    md = _table(d, "model", "")
    model_keys = {
        "image_size": int, "hidden": list, "feature_dim": int, "cls_hidden": int, "num_classes": int,
        "arcface_margin": float, "arcface_scale": float, "seg_classes": int, "smooth_l1_beta": float,
    }
    _reject_unknown(md, "model", model_keys)
    mdef = base.to_dict()["model"]
    mv = {k: _take(md, "model", k, t, mdef[k]) for k, t in model_keys.items()}
    try:
        model = ModelConfig(
            backbone=BackboneConfig((mv["image_size"], mv["image_size"], 1), tuple(mv["hidden"]), mv["feature_dim"]),
            arcface=ArcFaceConfig(mv["arcface_margin"], mv["arcface_scale"], mv["num_classes"]),
            cls_hidden=mv["cls_hidden"],
            seg_classes=mv["seg_classes"],
            smooth_l1_beta=mv["smooth_l1_beta"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError("model", str(exc)) from None

    tk = _table(d, "tasks", "")
    defaults = default_tasks()
    tasks = {}
    for name in (tk or {t: {} for t in defaults}):
        if name not in TASKS:
            raise ConfigError(f"tasks.{name}", f"unknown task id (expected one of {list(TASKS)})")
        tbl = _table(tk, name, "tasks.") if tk else {}
        where = f"tasks.{name}"
        _reject_unknown(tbl, where, ("size", "batch_size", "loss_scale", "noise"))
        dflt = defaults[name]
        spec = TaskSpec(
            name,
            size=_take(tbl, where, "size", int, dflt.size),
            batch_size=_take(tbl, where, "batch_size", int, dflt.batch_size),
            loss_scale=_take(tbl, where, "loss_scale", float, dflt.loss_scale),
            noise=_take(tbl, where, "noise", float, dflt.noise),
        )
        for key in ("size", "batch_size", "loss_scale"):
            if not getattr(spec, key) > 0:
                raise ConfigError(f"{where}.{key}", "must be positive")
        if spec.noise < 0:
            raise ConfigError(f"{where}.noise", "must be non-negative")
        if spec.size < 2:
            raise ConfigError(f"{where}.size", "needs at least 2 samples for a held-out split")
        tasks[name] = spec

    train_kw["batch_sizes"] = {k: s.batch_size for k, s in tasks.items()}
    try:
        train = TrainConfig(clip=clip, seed=seed, **train_kw)
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None

    ag = _table(d, "augment", "")
    augment = {}
    for name in ag:
        where = f"augment.{name}"
        if name not in tasks:
            raise ConfigError(where, "augmentation declared for a task that is not configured")
        tbl = _table(ag, name, "augment.")
        _reject_unknown(tbl, where, ("mode", "branches", "start_probs", "end_probs", "parallel"))
        spec = AugmentSpec(
            mode=_take(tbl, where, "mode", str, "none"),
            branches=_take(tbl, where, "branches", list, []),
            start_probs=[float(p) for p in _take(tbl, where, "start_probs", list, [])],
            end_probs=[float(p) for p in _take(tbl, where, "end_probs", list, [])],
            parallel=_take(tbl, where, "parallel", list, []),
        )
        if spec.mode not in AUG_MODES:
            raise ConfigError(f"{where}.mode", f"expected one of {list(AUG_MODES)}")
        for mode in ("multibranch", "parallel"):
            declared = spec.branches if mode == "multibranch" else spec.parallel
            if spec.mode != mode and not declared:
                continue
            try:
                spec.build(train.epochs, mode)
            except (AugmentError, ValueError, TypeError, KeyError) as exc:
                raise ConfigError(f"{where}.{'branches' if mode == 'multibranch' else 'parallel'}",
                                  str(exc)) from None
        augment[name] = spec

    return ExperimentConfig(seed, out_dir, train, model, tasks, augment)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return _parse(data)


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_config(cfg), encoding="utf-8")
    return path


def loads_config(text: str) -> ExperimentConfig:
    try:
        return _parse(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<string>", f"invalid TOML: {exc}") from None


__all__ = [
    "AugmentSpec", "ConfigError", "ExperimentConfig", "TaskSpec", "default_tasks",
    "dumps_config", "load_config", "loads_config", "save_config",
]
