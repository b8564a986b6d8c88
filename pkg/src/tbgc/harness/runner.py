"""Experiment driver: single runs and the clip / augmentation ablations."""

from __future__ import annotations

import copy
import csv
import json
import time
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import augment as aug
from ..gradclip import ClipMode
from ..mtmodel import CLS, DET, SEG, init_model, make_tasks, save_checkpoint
from ..trainer import MultiTaskLoader, NormTraceRecord, train, write_trace_csv
from .config import ExperimentConfig
from .data import Dataset, generate_dataset
from .metrics import box_hit_rate, mean_pixel_iou, top1_accuracy

CLIP_ROWS = ((ClipMode.VANILLA, "vanilla"), (ClipMode.TBGC_STAR, "TBGC*"), (ClipMode.TBGC, "TBGC"))
AUG_ROWS = (("parallel", "parallel"), ("multibranch", "MultiBranch"))
TABLE_TASKS = (DET, SEG, CLS)


@dataclass
class RunReport:
    metrics: dict[str, float]
    overall: float
    history: list[dict]
    warnings: dict[str, int]
    config: dict
    steps_per_epoch: int
    trace_rows: int
    shares_pre: dict[str, float] = field(default_factory=dict)
    shares_post: dict[str, float] = field(default_factory=dict)
    wall_clock: float = field(default=0.0, compare=False)
    # in-memory only
    trace: list = field(default_factory=list, repr=False, compare=False)
    store: object = field(default=None, repr=False, compare=False)
    op_logs: list = field(default_factory=list, repr=False, compare=False)

    _TRANSIENT = ("trace", "store", "op_logs")

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)
                if f.name not in self._TRANSIENT}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ------------------------------------------------------------ augmentation


def to_sample(task: str, x: np.ndarray, y) -> aug.Sample:
    if task == CLS:
        return aug.Sample(x, label=y if np.ndim(y) else int(y))
    if task == SEG:
        return aug.Sample(x, mask=y)
    return aug.Sample(x, box=np.asarray(y, dtype=np.float64))


class AugmentTransform:
    """Loader hook applying each task's pipeline sample by sample.

    Samples rejected by an op (for example a box cropped away) fall back to
    the un-augmented sample and bump ``counters['rejected_sample']``.
    """

    def __init__(self, pipelines: dict, train_sets: dict[str, Dataset], image_size: int,
                 num_classes: int, counters: Counter, record_ops: bool = False) -> None:
        self.pipelines = {k: v for k, v in pipelines.items() if v is not None}
        self.train_sets = train_sets
        self.size = image_size
        self.num_classes = num_classes
        self.counters = counters
        self.record_ops = record_ops
        self.op_logs: list[tuple[str, list]] = []

    def __call__(self, task, epoch, xb, yb, rng):
        pipe = self.pipelines.get(task)
        if pipe is None:
            return xb, yb
        ds = self.train_sets[task]
        out = []
        for x, y in zip(xb, yb):
            s = to_sample(task, x, y)
            partners = [to_sample(task, ds.images[j], ds.labels[j])
                        for j in rng.integers(0, len(ds), pipe.partners_needed)]
            log: list = []
            try:
                res = pipe.apply(s, epoch, rng, partners, log)
            except aug.SampleRejected:
                self.counters["rejected_sample"] += 1
                res = s
            if self.record_ops:
                self.op_logs.append((task, log))
            out.append(aug.resize(res, self.size, self.size))
        images = np.stack([s.image for s in out])
        if task == CLS:
            if any(isinstance(s.label, np.ndarray) for s in out):
                labels = np.stack([aug._soft(s.label, self.num_classes) for s in out])
            else:
                labels = np.array([s.label for s in out], dtype=np.int64)
        elif task == SEG:
            labels = np.stack([s.mask for s in out])
        else:
            labels = np.stack([s.box for s in out])
        return images, labels


def build_pipelines(cfg: ExperimentConfig, mode: str | None = None) -> dict:
    """Per-task pipelines; ``mode`` overrides tasks that declare that layout."""
    out = {}
    for task, spec in cfg.augment.items():
        chosen = spec.mode
        if mode == "multibranch" and spec.branches or mode == "parallel" and spec.parallel:
            chosen = mode
        out[task] = spec.build(cfg.train.epochs, chosen)
    return out


# ------------------------------------------------------------------- runs


def evaluate(store, tasks, test_sets: dict[str, Dataset], seg_classes: int) -> dict[str, float]:
    out = {}
    for name, task in tasks.items():
        ds = test_sets[name]
        pred = task.predict(store, ds.images)
        if name == CLS:
            out[name] = top1_accuracy(pred, ds.labels)
        elif name == SEG:
            out[name] = mean_pixel_iou(pred, ds.labels, seg_classes)
        else:
            out[name] = box_hit_rate(pred, ds.labels)
    return out


def _iteration_groups(trace: list[NormTraceRecord]) -> dict[tuple[int, int], dict[str, NormTraceRecord]]:
    groups: dict[tuple[int, int], dict[str, NormTraceRecord]] = {}
    for r in trace:
        groups.setdefault((r.epoch, r.iteration), {})[r.task] = r
    return groups


def backbone_shares(trace: list[NormTraceRecord], post: bool = False) -> dict[str, np.ndarray]:
    """Per logged iteration, each task's fraction of the summed backbone norms."""
    shares: dict[str, list[float]] = {}
    for recs in _iteration_groups(trace).values():
        vals = {t: (r.clipped_backbone_grad_norm if post else r.backbone_grad_norm) for t, r in recs.items()}
        total = sum(v for v in vals.values() if v is not None)
        for t, v in vals.items():
            shares.setdefault(t, []).append((v / total) if total > 0 else 0.0)
    return {t: np.array(v) for t, v in shares.items()}


def dominance_fraction(trace: list[NormTraceRecord], threshold: float = 0.5) -> float:
    """Fraction of logged iterations where the largest pre-clip share exceeds ``threshold``."""
    shares = backbone_shares(trace)
    if not shares:
        return 0.0
    stacked = np.stack(list(shares.values()))
    return float(np.mean(stacked.max(axis=0) > threshold))


def prepare_data(cfg: ExperimentConfig) -> tuple[dict[str, Dataset], dict[str, Dataset]]:
    train_sets, test_sets = {}, {}
    for name, spec in cfg.tasks.items():
        ds = generate_dataset(spec, cfg.seed, cfg.image_size, cfg.model.arcface.num_classes)
        train_sets[name], test_sets[name] = ds.split(cfg.seed)
    return train_sets, test_sets


def run_experiment(cfg: ExperimentConfig, *, aug_mode: str | None = None, write: bool = True,
                   record_ops: bool = False, out_dir=None) -> RunReport:
    """Train on the synthetic suite and evaluate every epoch on held-out data.

    Writes ``trace.csv``, ``model.ckpt`` and ``report.json`` into ``out_dir``
    (default ``cfg.out_dir``) unless ``write`` is false.
    """
    t0 = time.perf_counter()
    out = Path(out_dir or cfg.out_dir)
    train_sets, test_sets = prepare_data(cfg)
    store = init_model(cfg.model, cfg.seed)
    tasks = make_tasks(cfg.model, {k: s.loss_scale for k, s in cfg.tasks.items()})
    tasks = {k: tasks[k] for k in cfg.tasks}
    counters: Counter = Counter()
    transform = AugmentTransform(build_pipelines(cfg, aug_mode), train_sets, cfg.image_size,
                                 cfg.model.arcface.num_classes, counters, record_ops)
    loader = MultiTaskLoader(
        {k: (d.images, d.labels) for k, d in train_sets.items()},
        cfg.train.batch_sizes, cfg.seed, transform,
    )

    def on_epoch_end(model, epoch):
        every = cfg.train.checkpoint_every
        if write and every and (epoch + 1) % every == 0:
            save_checkpoint(model, out / f"ckpt_epoch{epoch + 1:03d}.ckpt")

    result = train(
        store, tasks, loader, cfg.train,
        evaluate=lambda m, e: evaluate(m, tasks, test_sets, cfg.model.seg_classes),
        on_epoch_end=on_epoch_end,
    )
    counters.update(result.counters)
    final = {k: v for k, v in result.history[-1].items() if k != "epoch"}
    report = RunReport(
        metrics=final,
        overall=float(np.mean(list(final.values()))),
        history=result.history,
        warnings={k: counters.get(k, 0) for k in ("zero_gradient", "skipped_task", "rejected_sample")},
        config=cfg.to_dict(),
        steps_per_epoch=result.steps_per_epoch,
        trace_rows=len(result.trace),
        shares_pre={k: float(v.mean()) for k, v in backbone_shares(result.trace).items()},
        shares_post={k: float(v.mean()) for k, v in backbone_shares(result.trace, post=True).items()},
        wall_clock=time.perf_counter() - t0,
    )
    report.trace, report.store, report.op_logs = result.trace, store, transform.op_logs
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_trace_csv(result.trace, out / "trace.csv")
        save_checkpoint(store, out / "model.ckpt")
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return report


# --------------------------------------------------------------- ablations


@dataclass
class Ablation:
    rows: list[dict]
    reports: dict[str, RunReport]
    path: Path | None = None


def _table_row(method: str, rep: RunReport) -> dict:
    row = {"Method": method, "Overall": rep.overall}
    row.update({t.capitalize(): rep.metrics.get(t, float("nan")) for t in TABLE_TASKS})
    return row


def _write_table(rows: list[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def compare_clip_modes(cfg: ExperimentConfig, write: bool = True) -> Ablation:
    """Same data and seed under vanilla, TBGC* and TBGC."""
    rows, reports = [], {}
    for mode, label in CLIP_ROWS:
        run_cfg = cfg.with_clip(mode=mode.value)
        rep = run_experiment(run_cfg, write=write, out_dir=Path(cfg.out_dir) / mode.value)
        reports[label] = rep
        row = _table_row(label, rep)
        for t in TABLE_TASKS:
            row[f"share_pre_{t}"] = rep.shares_pre.get(t, float("nan"))
        for t in TABLE_TASKS:
            row[f"share_post_{t}"] = rep.shares_post.get(t, float("nan"))
        rows.append(row)
    path = _write_table(rows, Path(cfg.out_dir) / "ablation_clip.csv") if write else None
    return Ablation(rows, reports, path)


def compare_aug_modes(cfg: ExperimentConfig, write: bool = True, record_ops: bool = False) -> Ablation:
    """Parallel vs multi-branch augmentation with shared seed."""
    declared = [t for t, a in cfg.augment.items() if a.branches and a.parallel]
    if not declared:
        raise ValueError("compare-aug needs at least one task declaring both 'branches' and 'parallel'")
    rows, reports = [], {}
    for mode, label in AUG_ROWS:
        rep = run_experiment(copy.deepcopy(cfg), aug_mode=mode, write=write, record_ops=record_ops,
                             out_dir=Path(cfg.out_dir) / mode)
        reports[label] = rep
        rows.append(_table_row(label, rep))
    path = _write_table(rows, Path(cfg.out_dir) / "ablation_aug.csv") if write else None
    return Ablation(rows, reports, path)
