"""Compiled vs pure-Python convolution backends.

Times the raw kernels on a few layer shapes, then one full SGD step of a
depth-8 network, under each available backend.

    python3 benchmarks/bench_conv.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from resequiv import dataio, engine, network, trainer, transform
from resequiv.params import NetworkSpec

SHAPES = [
    # (batch, C, H, D, stride)
    (32, 16, 8, 16, 1),
    (32, 16, 8, 32, 2),
    (8, 16, 32, 16, 1),
    (8, 64, 8, 64, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for b, c, h, d, s in SHAPES:
        x = rng.standard_normal((b, c, h, h))
        w = rng.standard_normal((d, c, 3, 3))
        bias = np.zeros(d)
        g = rng.standard_normal((b, d, h // s, h // s))
        timing = {}
        for name in engine.available_backends():
            with engine.use_backend(name):
                fwd = best_of(lambda: engine.conv2d_forward(x, w, bias, s), repeat)
                bwd = best_of(lambda: engine.conv2d_backward(x, w, s, g), repeat)
            timing[name] = (fwd, bwd)
        rows.append((f"B{b} C{c} {h}x{h} D{d} s{s}", timing))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = engine.available_backends()
    print(f"backends: {', '.join(names)} (default {engine.get_backend()})")
    print(f"{'shape':<24}" + "".join(f"{n + ' fwd':>14}{n + ' bwd':>14}" for n in names))
    for label, timing in kernel_rows(args.repeat):
        print(f"{label:<24}" + "".join(f"{timing[n][0] * 1e3:>12.2f}ms{timing[n][1] * 1e3:>12.2f}ms" for n in names))
    steps = {}
    for name in names:
        with engine.use_backend(name):
            steps[name] = step_time(args.repeat)
    print("depth-8 SGD step, batch 32: " + ", ".join(f"{n} {t * 1e3:.1f}ms" for n, t in steps.items()))
    if len(steps) == 2:
        print(f"speed-up of compiled over python: {steps['python'] / steps['compiled']:.2f}x")


def step_time(repeat):
    spec = NetworkSpec.from_depth(8, kind="residual", image_size=8)
    params = transform.hmwi_init(spec, 0)
    data = dataio.synth_dataset(0, 32)
    cfg = trainer.TrainConfig()

    def step():
        _, g = network.backward(params, spec, data.images, data.labels)
        trainer.sgd_step(params, g, cfg, 0)

    return best_of(step, repeat)


if __name__ == "__main__":
    main()
