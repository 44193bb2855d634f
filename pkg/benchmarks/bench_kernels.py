"""Compiled vs numpy kernels, per kernel and for one full training step.

    python3 benchmarks/bench_kernels.py [--repeat N] [--no-step]

Shapes follow the desk-scale model (L=4, d=64, 17 tokens, batch 64).
The training-step timing runs each backend in a fresh interpreter because
the backend is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fact import kernels

B, N, D, HEADS = 64, 17, 64, 4

STEP_SNIPPET = """
import time
import numpy as np
from fact import kernels, tensor as T, training, vit
cfg = vit.vit_config(L=4, d=64, heads=4, image_size=16, patch_size=4, num_classes=4)
model = vit.VisionTransformer.random(cfg, seed=0)
model.set_trainable("head")
part = vit.make_partition(cfg, "tt", 4)
opt = training.AdamW(model.trainable_parameters() + part.parameters())
x = np.random.default_rng(0).normal(size=(64, 3, 16, 16)).astype(np.float32)
y = np.arange(64) % 4
def step():
    opt.zero_grad()
    loss = T.cross_entropy(model(x, part), y)
    T.backward(loss)
    opt.step(1e-3)
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print(kernels.BACKEND, (time.perf_counter() - t) / {n})
"""


def cases(rng):
    act = rng.normal(size=B * N * 4 * D).astype(np.float32)
    att = rng.normal(size=(B * HEADS * N, N)).astype(np.float32)
    x = rng.normal(size=(B * N, D)).astype(np.float32)
    gamma, beta = np.ones(D, np.float32), np.zeros(D, np.float32)
    params = rng.normal(size=150_000).astype(np.float32)
    return {
        "gelu_forward": lambda k: k.gelu_forward(act),
        "gelu_backward": lambda k: k.gelu_backward(act, act),
        "softmax_forward": lambda k: k.softmax_forward(att),
        "softmax_backward": lambda k: k.softmax_backward(att, att),
        "layernorm_forward": lambda k: k.layernorm_forward(x, gamma, beta, 1e-6),
        "layernorm_backward": lambda k: k.layernorm_backward(x, x, np.ones(B * N, np.float32), gamma),
        "adamw_update": lambda k: k.adamw_update(params.copy(), params, np.zeros_like(params),
                                                 np.zeros_like(params), 1e-3, 0.9, 0.999, 1e-8, 1e-4, 1),
    }


def kernel_table(repeat):
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    names = sorted(backends)
    print(f"{'kernel':<20}" + "".join(f"{n + ' (ms)':>16}" for n in names) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for b in names:
            mod = backends[b]
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat)) * 1e3
        ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<20}" + "".join(f"{times[b]:>16.3f}" for b in names) + f"{ratio:>9.2f}x")


def step_times(n):
    results = {}
    for pure in ("0", "1"):
        env = dict(os.environ, FACT_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        results[out[0]] = float(out[1])
    print()
    for name, t in sorted(results.items()):
        print(f"training step, TT r=4, batch {B}: {name:<7} {t * 1e3:8.1f} ms")
    if len(results) == 2:
        print(f"step speedup: {results['python'] / results['cython']:.2f}x")


def main():
    ap = argparse.ArgumentParser(description="compare kernel backends")
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--no-step", action="store_true")
    args = ap.parse_args()
    kernel_table(args.repeat)
    if not args.no_step:
        step_times(args.steps)


if __name__ == "__main__":
    main()
