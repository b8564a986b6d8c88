"""Command-line entry point (``tbgc``).

Exit codes: 0 success, 1 configuration error, 2 runtime error. argparse
usage errors exit with its own code 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .. import augment as aug
from ..mtmodel import gradcheck
from .config import ConfigError, ExperimentConfig, load_config
from .runner import to_sample, build_pipelines, compare_aug_modes, compare_clip_modes, prepare_data, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs", "must be >= 1")
        warmup = cfg.train.warmup_epochs
        if warmup >= args.epochs:
            warmup = args.epochs - 1
            print(f"tbgc: note: warmup_epochs lowered to {warmup} for --epochs {args.epochs}", file=sys.stderr)
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs, warmup_epochs=warmup)
    return cfg


def write_pgm(image: np.ndarray, path: Path) -> Path:
    """Binary (P5) graymap, min-max scaled to 8 bits."""
    img = np.asarray(image, dtype=np.float64)
    img = img[..., 0] if img.ndim == 3 else img
    lo, hi = float(img.min()), float(img.max())
    px = np.zeros(img.shape, np.uint8) if hi <= lo else np.round(255 * (img - lo) / (hi - lo)).astype(np.uint8)
    h, w = px.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
    return path


def _cmd_train(cfg, args) -> int:
    rep = run_experiment(cfg)
    print(json.dumps({"metrics": rep.metrics, "overall": rep.overall, "warnings": rep.warnings}, sort_keys=True))
    print(f"wrote {Path(cfg.out_dir) / 'report.json'}")
    return EXIT_OK


def _print_table(ab) -> None:
    for row in ab.rows:
        cells = [row["Method"]] + [f"{row[k]:.4f}" for k in ("Overall", "Det", "Seg", "Cls")]
        print("\t".join(cells))
    if ab.path:
        print(f"wrote {ab.path}")


def _cmd_compare_clip(cfg, args) -> int:
    _print_table(compare_clip_modes(cfg))
    return EXIT_OK


def _cmd_compare_aug(cfg, args) -> int:
    try:
        ab = compare_aug_modes(cfg)
    except ValueError as exc:
        raise ConfigError("augment", str(exc)) from None
    _print_table(ab)
    return EXIT_OK


def _cmd_aug_demo(cfg, args) -> int:
    if args.samples < 1:
        raise ConfigError("--samples", "must be >= 1")
    pipelines = {k: p for k, p in build_pipelines(cfg).items() if p is not None}
    if not pipelines:
        raise ConfigError("augment", "no task has an augmentation pipeline (mode is 'none' everywhere)")
    train_sets, _ = prepare_data(cfg)
    out = Path(cfg.out_dir) / "aug_demo"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 0xA06])
    log_rows = []
    for task, pipe in pipelines.items():
        ds = train_sets[task]
        for i in range(args.samples):
            j = int(rng.integers(len(ds)))
            s = to_sample(task, ds.images[j], ds.labels[j])
            partners = [to_sample(task, ds.images[q], ds.labels[q])
                        for q in rng.integers(0, len(ds), pipe.partners_needed)]
            log: list = []
            status = "ok"
            try:
                res = pipe.apply(s, args.epoch, rng, partners, log)
            except aug.SampleRejected as exc:
                res, status = s, f"rejected: {exc}"
            stem = f"{task}_{i:03d}"
            write_pgm(s.image, out / f"{stem}_before.pgm")
            write_pgm(res.image, out / f"{stem}_after.pgm")
            log_rows.append({"sample": stem, "index": j, "status": status,
                             "ops": [{"branch": b, "op": name} for b, name in log]})
    (out / "ops.json").write_text(json.dumps(log_rows, indent=2) + "\n", encoding="utf-8")
    for row in log_rows:
        print(row["sample"], " ".join(o["op"] for o in row["ops"]), "" if row["status"] == "ok" else row["status"])
    print(f"wrote {len(log_rows)} sample pairs to {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = gradcheck(instances=args.instances, seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.case:<12} n={r.instances:<4} max_rel_err={r.max_rel_err:.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbgc", description="Per-task backbone gradient clipping experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="experiment TOML file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--epochs", type=int)
        return p

    common(sub.add_parser("train", help="train one model and write trace / report / checkpoint"))
    common(sub.add_parser("compare-clip", help="vanilla vs TBGC* vs TBGC on the same data"))
    common(sub.add_parser("compare-aug", help="parallel vs multi-branch augmentation"))
    demo = common(sub.add_parser("aug-demo", help="dump before/after augmented samples as PGM"))
    demo.add_argument("--samples", type=int, default=4)
    demo.add_argument("--epoch", type=int, default=0, help="curriculum epoch for branch probabilities")
    gc = common(sub.add_parser("gradcheck", help="finite-difference check of every loss"), config=False)
    gc.add_argument("--instances", type=int, default=50)
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "compare-clip": _cmd_compare_clip,
    "compare-aug": _cmd_compare_aug,
    "aug-demo": _cmd_aug_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        cfg = _override(load_config(args.config), args)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"tbgc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        print(f"tbgc: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
