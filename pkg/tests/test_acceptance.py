"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one ``AC n: PASS|FAIL ...`` line, printed together in
the pytest terminal summary.
"""

import dataclasses
import time
from collections import Counter

import numpy as np
import pytest

from tbgc import augment as aug
from tbgc import ndgrad as nd
from tbgc.gradclip import ClipConfig, TaskGradient, backbone_grad_norm, tbgc_clip
from tbgc.harness.config import ExperimentConfig, TaskSpec
from tbgc.harness.data import rect_box, rect_mask
from tbgc.harness.runner import backbone_shares, dominance_fraction, run_experiment
from tbgc.mtmodel import BackboneConfig, ModelConfig, gradcheck, init_model, make_tasks
from tbgc.trainer import (
    GradRecorder, OptState, TrainConfig, _cosine_lr, _warmup_lr, lr_at, multitask_step, read_trace_csv,
)

from conftest import ACCEPTANCE_LINES, random_partitioned
from oracles import LinTask, oracle_steps, tiny_batches, tiny_store


def record(n: int, ok: bool, detail: str) -> None:
    line = f"AC {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def triples():
    rng = np.random.default_rng(2024)
    out = []
    for _ in range(1000):
        store, grads = random_partitioned(rng)
        out.append((store, TaskGradient("t", grads), float(10.0 ** rng.uniform(-4, 2))))
    return out


def test_ac01_exact_norm_law(triples):
    t0 = time.perf_counter()
    worst = 0.0
    for store, g, s in triples:
        out = tbgc_clip(g, store, ClipConfig(max_norm=s))
        worst = max(worst, abs(backbone_grad_norm(out, store) - s) / s)
    dt = time.perf_counter() - t0
    record(1, worst < 1e-10 and dt < 1.0, f"exact-norm law: max rel err {worst:.2e} (< 1e-10), {dt:.2f}s (< 1s)")


def test_ac02_composite_collapse(triples):
    worst = 0.0
    for store, g, s in triples:
        out = tbgc_clip(g, store, ClipConfig(max_norm=s))
        factor = s / backbone_grad_norm(g, store)
        for k, v in g.grads.items():
            ref = v * factor
            nz = ref != 0
            if nz.any():
                worst = max(worst, float(np.max(np.abs(out.grads[k][nz] - ref[nz]) / np.abs(ref[nz]))))
    record(2, worst < 1e-12, f"composite collapse vs one-step oracle: max elementwise rel err {worst:.2e} (< 1e-12)")


def test_ac03_scale_invariance(triples):
    worst = 0.0
    for store, g, s in triples[:300]:
        cfg = ClipConfig(max_norm=s)
        base = tbgc_clip(g, store, cfg)
        for c in (1e-6, 1.0, 1e6):
            out = tbgc_clip(g.scaled(c), store, cfg)
            for k, v in base.grads.items():
                nz = v != 0
                if nz.any():
                    worst = max(worst, float(np.max(np.abs(out.grads[k][nz] - v[nz]) / np.abs(v[nz]))))
    record(3, worst < 1e-10, f"scale invariance c in {{1e-6, 1, 1e6}}: max rel err {worst:.2e} (< 1e-10)")


def test_ac04_gradient_correctness():
    t0 = time.perf_counter()
    results = {r.case: r for r in gradcheck(instances=50, model_instances=0, tol=1e-4)}
    dt = time.perf_counter() - t0
    cases = ("softmax_ce", "pixel_ce", "smooth_l1", "arcface")
    ok = all(c in results and results[c].passed and results[c].instances >= 50 for c in cases) and dt < 30
    detail = ", ".join(f"{c} {results[c].max_rel_err:.1e}/n={results[c].instances}" for c in cases)
    record(4, ok, f"finite-difference gradcheck (< 1e-4): {detail}; {dt:.1f}s (< 30s)")


def test_ac05_one_step_oracle():
    worst = {}
    for mode in ("vanilla", "tbgc_star", "tbgc"):
        store = tiny_store(1)
        scales = {"a": 1.0, "b": 40.0}
        batches = tiny_batches(1)
        want = oracle_steps({k: store[k] for k in store}, batches, scales, mode, 0.1, 1e-2, 1e-4, steps=1)
        cfg = TrainConfig(clip=ClipConfig(mode=mode, max_norm=0.1), weight_decay=1e-4)
        multitask_step(store, {k: LinTask(k, s) for k, s in scales.items()}, batches, cfg,
                       OptState.for_store(store), GradRecorder(store), lr=1e-2)
        worst[mode] = max(float(np.max(np.abs(store[k] - want[k]))) for k in store)
        n_params = store.num_params
    ok = n_params <= 100 and all(v < 1e-12 for v in worst.values())
    record(5, ok, f"one-step oracle ({n_params} params): max abs diff "
           + ", ".join(f"{m} {v:.1e}" for m, v in worst.items()) + " (< 1e-12)")


def _desk_config(epochs: int, seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed)
    cfg.train = dataclasses.replace(cfg.train, epochs=epochs, seed=seed)
    assert {k: s.loss_scale for k, s in cfg.tasks.items()} == {"det": 100.0, "seg": 10.0, "cls": 1.0}
    return cfg


def test_ac06_equal_influence():
    t0 = time.perf_counter()
    cfg = _desk_config(20)
    tb = run_experiment(cfg.with_clip(mode="tbgc"), write=False)
    van = run_experiment(cfg.with_clip(mode="vanilla"), write=False)
    dt = time.perf_counter() - t0
    post = backbone_shares(tb.trace, post=True)
    dev = max(float(np.max(np.abs(v - 1 / 3))) for v in post.values())
    dom = dominance_fraction(van.trace)
    pre = backbone_shares(van.trace)
    top = max(pre, key=lambda t: pre[t].mean())
    ok = dev <= 1e-3 and dom >= 0.9 and dt < 300
    record(6, ok, f"equal influence: TBGC post-clip share dev {dev:.1e} (<= 1e-3); vanilla dominant "
           f"pre-clip share > 0.5 in {dom:.1%} of {len(pre[top])} iterations (>= 90%, task {top}); {dt:.0f}s")


def test_ac07_directional_ablation():
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        cfg = _desk_config(30, seed)
        worst = {}
        for mode in ("vanilla", "tbgc"):
            rep = run_experiment(cfg.with_clip(mode=mode), write=False)
            task = min(rep.metrics, key=rep.metrics.get)
            worst[mode] = (rep.metrics[task], task)
        win = worst["tbgc"][0] >= worst["vanilla"][0]
        wins += win
        rows.append(f"s{seed} {worst['tbgc'][0]:.3f}({worst['tbgc'][1]}) vs {worst['vanilla'][0]:.3f}"
                    f"({worst['vanilla'][1]})")
    dt = time.perf_counter() - t0
    record(7, wins >= 4 and dt < 1800, f"worst-task TBGC >= vanilla in {wins}/5 seeds (>= 4): "
           + "; ".join(rows) + f"; {dt:.0f}s (< 1800s)")


def test_ac08_memory_contract():
    cfg = ModelConfig(BackboneConfig((8, 8, 1), (16,), 8))
    store = init_model(cfg, 0)
    tasks = make_tasks(cfg, {"det": 100.0, "seg": 10.0})
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8, 1))
    batches = {"cls": (x, np.array([0, 3])), "seg": (x, rng.integers(0, 3, (2, 8, 8))),
               "det": (x, rng.uniform(0.2, 0.8, (2, 4)))}
    singles = {}
    for name, (xb, yb) in batches.items():
        tape = nd.Tape()
        tasks[name].loss(store.bind(tape), xb, yb)
        singles[name] = len(tape)
        tape.release()
    base = nd.ACTIVATIONS.live
    nd.ACTIVATIONS.reset_peak()
    multitask_step(store, tasks, batches, TrainConfig(), OptState.for_store(store), GradRecorder(store),
                   counters=Counter())
    peak = nd.ACTIVATIONS.peak - base
    ok = peak <= max(singles.values()) and nd.ACTIVATIONS.live == base
    record(8, ok, f"memory contract: 3-task peak {peak} <= max single-task {max(singles.values())} "
           f"(per task {singles}, sum {sum(singles.values())})")


def test_ac09_trace_fidelity(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path / "run"))
    cfg.model = ModelConfig(BackboneConfig((8, 8, 1), (8,), 8), cfg.model.arcface, cls_hidden=8)
    cfg.tasks = {"det": TaskSpec("det", 24, 2, 100.0, 0.1), "seg": TaskSpec("seg", 24, 2, 10.0),
                  "cls": TaskSpec("cls", 96, 8, 1.0, 0.5)}
    assert cfg.train.epochs == 100 and cfg.train.log_iters_per_epoch == 9
    rep = run_experiment(cfg)
    rows = read_trace_csv(tmp_path / "run" / "trace.csv")
    per_task = Counter(r.task for r in rows)
    finite = all(np.isfinite([r.backbone_grad_norm, r.total_grad_norm, r.loss]).all() for r in rows)
    ok = rep.steps_per_epoch >= 9 and all(per_task[t] == 900 for t in cfg.tasks) and len(rows) == 2700 and finite
    record(9, ok, f"trace fidelity: samples per task {dict(per_task)} (== 900), all {len(rows)} rows parsed")


def test_ac10_augmentation_laws():
    rng = np.random.default_rng(10)
    fails = []
    try:
        aug.AugBranch((aug.AugOp("mosaic"), aug.AugOp("mixup", {"num_classes": 3})))
        fails.append("double-strong branch accepted")
    except aug.BranchConflict:
        pass
    branches = [aug.AugBranch((aug.AugOp("hflip"),)) for _ in range(3)]
    pipe = aug.MultiBranchPipeline(branches, [0.2, 0.5, 0.3], [0.6, 0.2, 0.2], total_epochs=10)
    n = 10_000
    z_max = 0.0
    for epoch in (0, 5, 10):
        p = pipe.branch_probs(epoch)
        counts = np.bincount([pipe.choose(epoch, rng) for _ in range(n)], minlength=3)
        z = np.abs(counts / n - p) / np.sqrt(p * (1 - p) / n)
        z_max = max(z_max, float(z.max()))
    if z_max > 4:
        fails.append(f"branch frequency z={z_max:.2f}")
    for _ in range(200):
        size = int(rng.integers(4, 33))
        x0, y0 = int(rng.integers(0, size - 2)), int(rng.integers(0, size - 2))
        pw, ph = int(rng.integers(1, size - x0 + 1)), int(rng.integers(1, size - y0 + 1))
        s = aug.Sample(rng.normal(size=(size, size, 1)), label=int(rng.integers(5)),
                       mask=rect_mask(size, x0, y0, pw, ph), box=rect_box(size, x0, y0, pw, ph))
        if not aug.hflip(aug.hflip(s)).equals(s):
            fails.append("hflip involution")
        r = s
        for _ in range(4):
            r = aug.rotate90(r)
        if not r.equals(s):
            fails.append("rotate-360 identity")
        t = aug.Sample(rng.normal(size=(size, size, 1)), label=int(rng.integers(5)))
        if not (aug.mixup(s, t, 1.0, 5).equals(s) and aug.mixup(s, t, 0.0, 5).equals(t)):
            fails.append("mixup endpoints")
    record(10, not fails, "augmentation laws: branch exclusivity, frequencies max |z| "
           f"{z_max:.2f} (<= 4) over 1e4 draws, 200 hflip/rotate/mixup bit-exact identities"
           + (f"; failures: {sorted(set(fails))}" if fails else ""))


def test_ac11_schedule_anchors():
    cfg = TrainConfig()
    spe = 9
    end = cfg.warmup_epochs * spe
    lr0, lr_end = lr_at(0, spe, cfg), lr_at(end, spe, cfg)
    gap = abs(_warmup_lr(end, end, cfg) - _cosine_lr(end, end, cfg.epochs * spe, cfg))
    ok = abs(lr0 - 1e-7) <= 1e-21 and abs(lr_end - 1e-4) <= 1e-19 and gap <= 1e-15
    record(11, ok, f"schedule anchors: lr_at(0) = {lr0!r}, lr(warmup end) = {lr_end!r}, boundary gap {gap:.1e} (<= 1e-15)")
