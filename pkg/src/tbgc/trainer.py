"""Multi-task training loop with per-task clipping.

Each multi-task iteration runs the tasks one after another. For every task
the forward pass is recorded on a fresh tape, ``backward`` releases that
tape, the raw gradient is clipped according to the clip mode and added to a
recorder; only after all tasks does a single AdamW step consume the
recorder. Peak activation memory is therefore that of the largest task,
not the sum over tasks.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping, Protocol

import numpy as np

from . import kernels
from . import ndgrad as nd
from .gradclip import (
    AggregatedGradient,
    ClipConfig,
    ClipMode,
    TaskGradient,
    ZeroBackboneGradient,
    ZeroGradientWarning,
    backbone_grad_norm,
    check_alignment,
    clip_task,
    clip_total,
    grad_norm,
)
from .mtmodel import DET, CLS, SEG, ParamStore, Role

TRACE_HEADER = ("epoch", "iteration", "task", "backbone_grad_norm", "total_grad_norm", "loss")


class Task(Protocol):
    name: str

    def loss(self, params, x, y) -> nd.Tensor: ...


class StepError(RuntimeError):
    def __init__(self, epoch: int, iteration: int, cause: BaseException) -> None:
        super().__init__(f"epoch {epoch}, iteration {iteration}: {type(cause).__name__}: {cause}")
        self.epoch = epoch
        self.iteration = iteration


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    warmup_ratio: float = 1e-3
    backbone_lr_factor: float = 0.1
    batch_sizes: dict[str, int] = field(default_factory=lambda: {DET: 2, SEG: 2, CLS: 8})
    clip: ClipConfig = field(default_factory=ClipConfig)
    seed: int = 0
    log_iters_per_epoch: int = 9
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if not self.base_lr > 0 or not self.backbone_lr_factor > 0:
            raise ValueError("learning rate and backbone factor must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must lie in (0, 1]")
        if any(int(b) <= 0 for b in self.batch_sizes.values()):
            raise ValueError("batch sizes must be positive")


@dataclass
class NormTraceRecord:
    epoch: int
    iteration: int
    task: str
    backbone_grad_norm: float
    total_grad_norm: float
    loss: float
    # backbone norm of the task's contribution after clipping; not in the CSV
    clipped_backbone_grad_norm: float | None = None


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "OptState":
        return cls(
            {n: np.zeros_like(p) for n, p in store.items()},
            {n: np.zeros_like(p) for n, p in store.items()},
        )


class GradRecorder:
    """Running sum of clipped per-task gradients for one iteration."""

    def __init__(self, store: ParamStore) -> None:
        self.grads = {n: np.zeros_like(p) for n, p in store.items()}

    def zero(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def is_zero(self) -> bool:
        return all(not g.any() for g in self.grads.values())

    def add(self, part: TaskGradient) -> None:
        for name, value in part.grads.items():
            self.grads[name] += value

    def total(self) -> AggregatedGradient:
        return AggregatedGradient({n: g.copy() for n, g in self.grads.items()})


# ----------------------------------------------------------------- optimizer


def param_group_lr(role: Role, base_lr: float, cfg: TrainConfig) -> float:
    return base_lr * cfg.backbone_lr_factor if role.is_backbone else base_lr


def adamw_update(
    params: ParamStore,
    grads: AggregatedGradient | Mapping[str, np.ndarray],
    opt: OptState,
    lr: float | Mapping[str, float],
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Decoupled AdamW step; ``lr`` may be a per-parameter mapping."""
    gmap = grads.grads if isinstance(grads, AggregatedGradient) else grads
    check_alignment(gmap, params)
    opt.step += 1
    bc1 = 1.0 - beta1 ** opt.step
    bc2 = 1.0 - beta2 ** opt.step
    for name, p in params.items():
        g = gmap.get(name)
        if g is None:
            g = np.zeros_like(p)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        kernels.adamw_inplace(p, g, opt.m[name], opt.v[name], rate, wd, beta1, beta2, eps, bc1, bc2)


def _warmup_lr(step: float, warmup_steps: int, cfg: TrainConfig) -> float:
    frac = step / warmup_steps
    return cfg.base_lr * (cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * frac)


def _cosine_lr(step: float, warmup_steps: int, total_steps: int, cfg: TrainConfig) -> float:
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return max(cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)), 0.0)


def lr_at(global_step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from ``warmup_ratio * base`` to ``base``, then cosine to 0."""
    if global_step < 0:
        raise ValueError("global_step must be non-negative")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    if global_step < warmup_steps:
        return _warmup_lr(global_step, warmup_steps, cfg)
    return _cosine_lr(global_step, warmup_steps, total_steps, cfg)


# ---------------------------------------------------------------------- step


def _capture_zero_warnings(counters: Counter, fn, *args):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ZeroGradientWarning)
        out = fn(*args)
    for w in caught:
        if issubclass(w.category, ZeroGradientWarning):
            counters["zero_gradient"] += 1
        else:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return out


def multitask_step(
    model: ParamStore,
    tasks: Mapping[str, Task],
    batches: Mapping[str, tuple],
    cfg: TrainConfig,
    opt: OptState,
    recorder: GradRecorder,
    *,
    lr: float | None = None,
    epoch: int = 0,
    iteration: int = 0,
    counters: Counter | None = None,
) -> list[NormTraceRecord]:
    """One multi-task iteration; tasks are processed in ``batches`` order."""
    counters = Counter() if counters is None else counters
    lr = cfg.base_lr if lr is None else lr
    recorder.zero()
    records = []
    for name, (x, y) in batches.items():
        tape = nd.Tape()
        loss = tasks[name].loss(model.bind(tape), x, y)
        loss_value = loss.item()
        raw = nd.backward(loss, tape)
        for key, g in raw.items():
            model.grads[key][...] = g
        g = TaskGradient(name, {key: model.grads[key] for key in raw})
        rec = NormTraceRecord(
            epoch, iteration, name, backbone_grad_norm(g, model), grad_norm(g), loss_value
        )
        try:
            clipped = _capture_zero_warnings(counters, clip_task, g, model, cfg.clip)
        except ZeroBackboneGradient:
            counters["skipped_task"] += 1
            clipped = None
        if clipped is not None:
            recorder.add(clipped)
            rec.clipped_backbone_grad_norm = backbone_grad_norm(clipped, model)
        else:
            rec.clipped_backbone_grad_norm = 0.0
        model.zero_grad()
        records.append(rec)

    total, factor = _capture_zero_warnings(counters, clip_total, recorder.total(), cfg.clip)
    if cfg.clip.mode is ClipMode.VANILLA:
        for rec in records:
            rec.clipped_backbone_grad_norm = factor * rec.backbone_grad_norm
    for key, g in total.grads.items():
        model.grads[key][...] = g
    lrs = {n: param_group_lr(model.role(n), lr, cfg) for n in model}
    adamw_update(model, total, opt, lrs, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    model.zero_grad()
    recorder.zero()
    return records


# --------------------------------------------------------------------- loader


class MultiTaskLoader:
    """Shuffled per-task batches; shorter tasks cycle to the longest one.

    ``transform(task, epoch, x, y, rng) -> (x, y)`` hooks in augmentation.
    """

    def __init__(
        self,
        datasets: Mapping[str, tuple[np.ndarray, np.ndarray]],
        batch_sizes: Mapping[str, int],
        seed: int = 0,
        transform: Callable | None = None,
    ) -> None:
        self.datasets = dict(datasets)
        self.batch_sizes = {t: int(batch_sizes[t]) for t in self.datasets}
        self.seed = seed
        self.transform = transform
        self.steps_per_epoch = max(
            max(1, len(x) // self.batch_sizes[t]) for t, (x, _) in self.datasets.items()
        )

    def epoch_batches(self, epoch: int) -> Iterator[dict[str, tuple]]:
        order, rngs = {}, {}
        for i, (task, (x, _)) in enumerate(self.datasets.items()):
            rng = np.random.default_rng([self.seed, epoch, i])
            need = self.steps_per_epoch * self.batch_sizes[task]
            perms = [rng.permutation(len(x)) for _ in range(-(-need // len(x)))]
            order[task] = np.concatenate(perms)[:need]
            rngs[task] = rng
        for it in range(self.steps_per_epoch):
            out = {}
            for task, (x, y) in self.datasets.items():
                bs = self.batch_sizes[task]
                idx = order[task][it * bs:(it + 1) * bs]
                xb, yb = x[idx], y[idx]
                if self.transform is not None:
                    xb, yb = self.transform(task, epoch, xb, yb, rngs[task])
                out[task] = (xb, yb)
            yield out


def logged_iterations(steps_per_epoch: int, per_epoch: int) -> list[int]:
    """``per_epoch`` evenly spaced iteration indices (all of them if fewer exist)."""
    if per_epoch <= 0:
        return []
    if steps_per_epoch <= per_epoch:
        return list(range(steps_per_epoch))
    return [(i * steps_per_epoch) // per_epoch for i in range(per_epoch)]


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    trace: list[NormTraceRecord]
    history: list[dict]
    counters: Counter
    opt: OptState
    steps_per_epoch: int


def train(
    model: ParamStore,
    tasks: Mapping[str, Task],
    loader: MultiTaskLoader,
    cfg: TrainConfig,
    *,
    evaluate: Callable[[ParamStore, int], dict] | None = None,
    on_epoch_end: Callable[[ParamStore, int], None] | None = None,
) -> TrainResult:
    opt = OptState.for_store(model)
    recorder = GradRecorder(model)
    counters: Counter = Counter()
    trace: list[NormTraceRecord] = []
    history: list[dict] = []
    spe = loader.steps_per_epoch
    logged = set(logged_iterations(spe, cfg.log_iters_per_epoch))
    step = 0
    for epoch in range(cfg.epochs):
        for it, batches in enumerate(loader.epoch_batches(epoch)):
            missing = set(tasks) - set(batches)
            if missing:
                raise StepError(epoch, it, KeyError(f"no batch for tasks {sorted(missing)}"))
            try:
                recs = multitask_step(
                    model, tasks, {t: batches[t] for t in tasks}, cfg, opt, recorder,
                    lr=lr_at(step, spe, cfg), epoch=epoch, iteration=it, counters=counters,
                )
            except Exception as exc:
                raise StepError(epoch, it, exc) from exc
            if it in logged:
                trace.extend(recs)
            step += 1
        if evaluate is not None:
            history.append({"epoch": epoch, **evaluate(model, epoch)})
        if on_epoch_end is not None:
            on_epoch_end(model, epoch)
    return TrainResult(trace, history, counters, opt, spe)


# ---------------------------------------------------------------------- trace


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def trace_csv_text(records: list[NormTraceRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for r in records:
        writer.writerow([_fmt(getattr(r, k)) for k in TRACE_HEADER])
    return buf.getvalue()


def write_trace_csv(records: list[NormTraceRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(trace_csv_text(records))
    return path


def read_trace_csv(path) -> list[NormTraceRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected trace header {reader.fieldnames}")
        types = {f.name: f.type for f in fields(NormTraceRecord)}
        out = []
        for row in reader:
            out.append(NormTraceRecord(**{
                k: (int(v) if types[k] == "int" else v if types[k] == "str" else float(v))
                for k, v in row.items()
            }))
        return out
