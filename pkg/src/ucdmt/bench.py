"""Kernel backend benchmark: numba vs pure numpy.

Times the three convolution primitives on the layer shapes this package
actually trains, plus one full generator/discriminator update pair and
single-image translation latency on each backend.

    python -m ucdmt.bench [--reps 5] [--batch 16] [--size 64]
"""

import argparse
import time

import numpy as np

from ucdmt import kernels
from ucdmt.data import Batch
from ucdmt.models import ArchConfig, init_bundle
from ucdmt.training import (TrainConfig, init_train_state,
                            train_discriminator_step, train_generator_step)

# (label, Ci, H, Co, k, stride, pad) at the benchmark batch size
LAYER_SHAPES = [
    ("enc 7x7 stem", 1, 64, 32, 7, 1, 3),
    ("enc 4x4 s2 down1", 32, 64, 64, 4, 2, 1),
    ("enc 4x4 s2 down2", 64, 32, 64, 4, 2, 1),
    ("res 3x3 @64", 64, 16, 64, 3, 1, 1),
    ("dec res 3x3 @68", 68, 16, 68, 3, 1, 1),
    ("dis 4x4 s2 mid", 32, 32, 64, 4, 2, 1),
]


def _time(fn, reps):
    fn()  # warm-up / jit compile
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_kernels(backend, batch, reps, rng):
    k = kernels.set_backend(backend)
    rows = []
    for label, ci, h, co, ksz, stride, pad in LAYER_SHAPES:
        x = rng.standard_normal((batch, ci, h, h), dtype=np.float32)
        w = rng.standard_normal((co, ci, ksz, ksz), dtype=np.float32)
        ho = (h + 2 * pad - ksz) // stride + 1
        dy = rng.standard_normal((batch, co, ho, ho), dtype=np.float32)
        flop = 2.0 * batch * co * ho * ho * ci * ksz * ksz
        t_f = _time(lambda: k.conv2d_fwd(x, w, stride, pad), reps)
        t_d = _time(lambda: k.conv2d_dgrad(dy, w, stride, pad, h, h), reps)
        t_w = _time(lambda: k.conv2d_wgrad(dy, x, ksz, ksz, stride, pad), reps)
        rows.append((label, t_f, t_d, t_w, flop))
    return rows


def bench_train_step(backend, batch, size, reps):
    kernels.set_backend(backend)
    rng = np.random.default_rng(0)
    config = TrainConfig(batch_size=batch, epochs=1)
    state = init_train_state(config, ArchConfig())
    b = Batch(
        x=rng.uniform(-1, 1, (batch, 1, size, size)).astype(np.float32),
        m_x=np.tile(np.arange(4), batch // 4),
        x_y=rng.uniform(-1, 1, (batch, 1, size, size)).astype(np.float32),
        m_y=rng.integers(0, 4, batch))

    def step():
        train_discriminator_step(state, b, config)
        train_generator_step(state, b, config)

    return _time(step, reps)


def bench_translate(backend, size, reps):
    from ucdmt.inference import translate_batch
    kernels.set_backend(backend)
    rng = np.random.default_rng(0)
    bundle = init_bundle(ArchConfig(), rng)
    x = rng.uniform(-1, 1, (1, 1, size, size)).astype(np.float32)
    return _time(lambda: translate_batch(bundle, x, 1), reps)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)

    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.insert(0, "numba")
    except ImportError:
        print("numba unavailable; benchmarking numpy only")

    print(f"conv kernels (batch {args.batch}, float32, {args.reps} reps)")
    header = f"{'layer':<20}" + "".join(
        f"{be + ' ' + p + ' ms':>16}" for be in backends for p in ("fwd", "dgrad", "wgrad"))
    print(header)
    rng = np.random.default_rng(0)
    results = {be: bench_kernels(be, args.batch, args.reps, rng) for be in backends}
    for i, (label, *_rest) in enumerate(results[backends[0]]):
        cells = ""
        for be in backends:
            _, t_f, t_d, t_w, _ = results[be][i]
            cells += f"{t_f * 1e3:16.2f}{t_d * 1e3:16.2f}{t_w * 1e3:16.2f}"
        print(f"{label:<20}" + cells)
    for be in backends:
        tot = sum(t_f + t_d + t_w for _, t_f, t_d, t_w, _ in results[be])
        flop = sum(3 * f for *_x, f in results[be])
        print(f"{be}: kernel-suite total {tot * 1e3:.1f} ms  "
              f"(~{flop / tot / 1e9:.1f} GFLOP/s)")

    print(f"\nfull D+G training step (batch {args.batch}, {args.size}x{args.size})")
    for be in backends:
        t = bench_train_step(be, args.batch, args.size, max(2, args.reps // 2))
        print(f"  {be}: {t:.3f} s/step")

    print(f"\nsingle-image translation latency ({args.size}x{args.size})")
    for be in backends:
        t = bench_translate(be, args.size, args.reps)
        print(f"  {be}: {t * 1e3:.1f} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
