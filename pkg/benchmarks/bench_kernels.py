"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--forward]

Kernels are timed in-process (numba compile time excluded by a warm-up call).
``--forward`` also times one network forward pass in two subprocesses, one
with ``GCNV_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gcnv import _kernels as K


def cases(rng):
    x = rng.normal(size=(32, 32, 32, 2))
    w = rng.normal(size=(2, 2, 2, 2, 12))
    g = rng.normal(size=(16, 16, 16, 12))
    cells = rng.choice(32**3, size=6000, replace=False)
    coords = np.stack(np.unravel_index(cells, (32, 32, 32)), 1)
    a, b = rng.uniform(0, 32, (3000, 3)), rng.uniform(0, 32, (3000, 3))
    ranks = np.arange(1.0, 15.0)
    return {
        "conv3d": ("conv3d", (x, w, 2)),
        "conv3d_grad_input": ("conv3d_grad_input", (g, w, 2, x.shape)),
        "conv3d_grad_weight": ("conv3d_grad_weight", (x, g, 2, 2)),
        "neighbor_table": ("neighbor_table", (coords, (32, 32, 32), 1)),
        "nearest_distances": ("nearest_distances", (a, b)),
        "signed_rank_sums": ("signed_rank_sums", (ranks,)),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def bench_kernels(repeat):
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy path can be timed")
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (kernel, args) in cases(np.random.default_rng(0)).items():
        t_np = best_of(getattr(K, f"numpy_{kernel}"), args, repeat)
        if K.HAVE_NUMBA:
            fast = getattr(K, kernel)
            ref = getattr(K, f"numpy_{kernel}")(*args)
            got = fast(*args)  # warm-up, also compiles
            assert np.allclose(got, ref, rtol=1e-10, atol=1e-10), name
            t_nb = best_of(fast, args, repeat)
            print(f"{name:<22}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<22}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}")


FORWARD = """
import time
from gcnv import net as N, volume as V
cfg = N.ModelConfig()
ph = V.generate_phantom(0, (32, 32, 32), background_fraction=0.5)
w = N.as_params(N.init_weights(cfg, 1))
N.forward(ph.volume, cfg, w)
t = time.perf_counter()
N.forward(ph.volume, cfg, w)
print(time.perf_counter() - t)
"""


def bench_forward():
    for label, flag in (("numba", ""), ("numpy", "1")):
        env = dict(os.environ, GCNV_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", FORWARD], env=env, capture_output=True, text=True, check=True)
        print(f"forward 32^3 ({label}): {1e3 * float(out.stdout.strip()):.1f} ms")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--forward", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if args.forward:
        bench_forward()
