"""Gradient clipping for multi-task training.

Three modes:

* ``VANILLA``: clip the summed multi-task gradient to norm ``S``.
* ``TBGC_STAR``: clip each task's full gradient to norm ``S``, then sum.
* ``TBGC``: normalise each task's gradient, then rescale it so that its
  *backbone* part has norm exactly ``S``, then sum. Every task therefore
  pushes the shared parameters equally hard. Head entries are scaled by the
  same factor as the backbone entries.

``LITERAL`` clipping always rescales to ``S``; ``CLAMPED`` only shrinks
(``min(1, S/||g||)``), which is what most frameworks ship.

Gradient maps are plain ``{name: ndarray}`` dicts aligned with a
:class:`~tbgc.mtmodel.ParamStore`; a missing entry means zero.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .kernels import sumsq
from .mtmodel import ParamStore

GradMap = Mapping[str, np.ndarray]


class ClipMode(str, enum.Enum):
    VANILLA = "vanilla"
    TBGC = "tbgc"
    TBGC_STAR = "tbgc_star"


class VanillaSemantics(str, enum.Enum):
    LITERAL = "literal"
    CLAMPED = "clamped"


class AlignmentError(ValueError):
    pass


class ZeroBackboneGradient(ArithmeticError):
    def __init__(self, task: str | None, norm: float) -> None:
        super().__init__(f"backbone gradient norm {norm:.3e} of task {task!r} is below epsilon")
        self.task = task
        self.norm = norm


class ZeroGradientWarning(UserWarning):
    """Clip skipped because the gradient norm is below epsilon."""


@dataclass(frozen=True)
class ClipConfig:
    mode: ClipMode = ClipMode.TBGC
    max_norm: float = 0.1
    vanilla: VanillaSemantics = VanillaSemantics.LITERAL
    eps: float = 1e-12

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ClipMode(self.mode))
        object.__setattr__(self, "vanilla", VanillaSemantics(self.vanilla))
        if not self.max_norm > 0:
            raise ValueError(f"max_norm must be positive, got {self.max_norm}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class TaskGradient:
    task: str
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, factor: float) -> "TaskGradient":
        return TaskGradient(self.task, {k: v * factor for k, v in self.grads.items()})


@dataclass
class AggregatedGradient:
    grads: dict[str, np.ndarray]


def _as_map(g) -> GradMap:
    return g.grads if isinstance(g, (TaskGradient, AggregatedGradient)) else g


def check_alignment(g, store: ParamStore) -> None:
    for name, value in _as_map(g).items():
        if name not in store:
            raise AlignmentError(f"gradient entry {name!r} has no parameter")
        if np.shape(value) != store[name].shape:
            raise AlignmentError(
                f"gradient {name!r} has shape {np.shape(value)}, parameter has {store[name].shape}"
            )


def grad_norm(g) -> float:
    """L2 norm of the whole map treated as one flat vector."""
    return math.sqrt(math.fsum(sumsq(v) for v in _as_map(g).values()))


def backbone_grad_norm(g, store: ParamStore) -> float:
    """L2 norm over the backbone-role entries only."""
    check_alignment(g, store)
    m = _as_map(g)
    return math.sqrt(math.fsum(sumsq(m[n]) for n in store.backbone_names() if n in m))


def _rescale(g, factor: float):
    if isinstance(g, TaskGradient):
        return g.scaled(factor)
    if isinstance(g, AggregatedGradient):
        return AggregatedGradient({k: v * factor for k, v in g.grads.items()})
    return {k: v * factor for k, v in g.items()}


def vanilla_factor(g, cfg: ClipConfig) -> float:
    """Scale factor vanilla clipping applies to ``g`` (1.0 when skipped)."""
    norm = grad_norm(g)
    if norm < cfg.eps:
        warnings.warn(ZeroGradientWarning(f"gradient norm {norm:.3e} below eps; clip skipped"))
        return 1.0
    factor = cfg.max_norm / norm
    if cfg.vanilla is VanillaSemantics.CLAMPED:
        factor = min(1.0, factor)
    return factor


def vanilla_clip(g, cfg: ClipConfig):
    """Rescale ``g`` to norm ``S`` (literal) or cap it at ``S`` (clamped).

    A gradient with norm below ``eps`` is returned unchanged and a
    :class:`ZeroGradientWarning` is issued.
    """
    return _rescale(g, vanilla_factor(g, cfg))


def tbgc_clip(g: TaskGradient, store: ParamStore, cfg: ClipConfig) -> TaskGradient:
    """Task-level backbone-oriented clip: afterwards the backbone norm is ``S``.

    Raises :class:`ZeroBackboneGradient` when the task does not reach the
    backbone; callers skip that task for the step.
    """
    bb = backbone_grad_norm(g, store)
    if bb < cfg.eps:
        raise ZeroBackboneGradient(getattr(g, "task", None), bb)
    unit = _rescale(g, 1.0 / grad_norm(g))
    return _rescale(unit, cfg.max_norm / backbone_grad_norm(unit, store))


def tbgc_star_clip(g: TaskGradient, cfg: ClipConfig) -> TaskGradient:
    """Per-task vanilla clip of the task's full gradient, no backbone rescale."""
    return vanilla_clip(g, cfg)


def aggregate(parts: Iterable[TaskGradient], store: ParamStore) -> AggregatedGradient:
    """Elementwise sum over parts, zero-filled to the full parameter set."""
    out = {name: np.zeros_like(value) for name, value in store.items()}
    for part in parts:
        check_alignment(part, store)
        for name, value in _as_map(part).items():
            out[name] += value
    return AggregatedGradient(out)


def clip_task(g: TaskGradient, store: ParamStore, cfg: ClipConfig) -> TaskGradient:
    """Per-task stage of ``cfg.mode``; vanilla defers clipping to the sum."""
    if cfg.mode is ClipMode.TBGC:
        return tbgc_clip(g, store, cfg)
    if cfg.mode is ClipMode.TBGC_STAR:
        return tbgc_star_clip(g, cfg)
    return g


def clip_total(total: AggregatedGradient, cfg: ClipConfig) -> tuple[AggregatedGradient, float]:
    """Post-sum stage of ``cfg.mode``; returns the gradient and the factor applied."""
    if cfg.mode is not ClipMode.VANILLA:
        return total, 1.0
    factor = vanilla_factor(total, cfg)
    return _rescale(total, factor), factor
