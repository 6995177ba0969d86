#!/usr/bin/env python3
"""Benchmark the numba kernels against the numpy/scipy fallback.

Times the hot ops at training shapes (3x3 convolutions forward/backward, the
exact distance transform) plus one full optimization step, under both
backends.  Run:

    python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mcseg import backend, nn
from mcseg.data import SynthConfig, generate_synthetic, sample_batch, split_labeled
from mcseg.geometry import sdf_transform
from mcseg.model import NetConfig
from mcseg.trainer import TrainConfig, init_state, step_rng, train_step


def timeit(fn, repeats):
    fn()  # warmup (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8, 64, 64)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    b = np.zeros(8, dtype=np.float32)
    g = rng.standard_normal((4, 8, 64, 64)).astype(np.float32)
    fwd = timeit(lambda: nn.conv_same(x, w, b), repeats)
    bwd = timeit(lambda: nn.conv_same_vjp(x, w, g), repeats)
    return fwd, bwd


def bench_edt(repeats):
    rng = np.random.default_rng(1)
    mask = (rng.random((64, 64)) < 0.3).astype(np.uint8)
    mask3 = (rng.random((32, 32, 32)) < 0.3).astype(np.uint8)
    t2 = timeit(lambda: sdf_transform(mask), repeats)
    t3 = timeit(lambda: sdf_transform(mask3), max(1, repeats // 4))
    return t2, t3


def bench_step(repeats):
    ds = split_labeled(
        generate_synthetic(SynthConfig(num_cases=10, extents=(64, 64), noise_sigma=0.5, seed=0)),
        0.5,
        seed=1,
    )
    cfg = TrainConfig(net=NetConfig(base_width=8, depth=3), max_iters=10_000, log_every=0)
    state = init_state(cfg)
    batch = sample_batch(ds, cfg.patch, step_rng(cfg.seed, 0, 0))

    def one_step():
        train_step(state, batch)

    return timeit(one_step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    names = ["numba", "numpy"] if backend.HAVE_NUMBA else ["numpy"]
    results = {}
    for name in names:
        backend.set_backend(name)
        conv_f, conv_b = bench_conv(args.repeats)
        edt2, edt3 = bench_edt(args.repeats)
        step = bench_step(max(3, args.repeats // 4))
        results[name] = {
            "conv fwd (4x8x64x64)": conv_f,
            "conv bwd (4x8x64x64)": conv_b,
            "sdf 64x64": edt2,
            "sdf 32^3": edt3,
            "train step (full method)": step,
        }

    ops = list(next(iter(results.values())))
    width = max(len(op) for op in ops)
    header = f"{'op':<{width}} " + " ".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for op in ops:
        row = f"{op:<{width}} "
        row += " ".join(f"{results[n][op] * 1e3:>10.2f}ms" for n in names)
        if len(names) == 2:
            row += f" {results['numpy'][op] / results['numba'][op]:>8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
