"""Time each accelerated kernel against its numpy twin.

    python benchmarks/bench_kernels.py [--repeat N]

Numba timings exclude the first (compiling) call.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tbgc import kernels
from tbgc._accel import NUMBA_ENABLED


def cases(rng):
    grad = rng.normal(size=(1024, 64))
    logits = rng.normal(size=(2048, 3))
    onehot = np.eye(3)[rng.integers(0, 3, 2048)]
    img = rng.normal(size=(32, 32, 1))
    p, g = rng.normal(size=65536), rng.normal(size=65536)
    m, v = np.zeros_like(p), np.zeros_like(p)
    adam = (p, g, m, v, 1e-4, 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001)
    return {
        "sumsq 1024x64": ("sumsq", (grad,)),
        "softmax_xent 2048x3": ("softmax_xent", (logits, onehot)),
        "resize_nearest 32->25": ("resize_nearest", (img, 25, 25)),
        "adamw_inplace 65536": ("adamw_inplace", adam),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"numba available: {NUMBA_ENABLED}")
    print(f"{'kernel':<24}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for label, (name, call_args) in cases(rng).items():
        np_fn, nb_fn = getattr(kernels, f"{name}_np"), getattr(kernels, f"{name}_nb")
        nb_fn(*call_args)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=args.repeat, repeat=3)) / args.repeat
        print(f"{label:<24}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
