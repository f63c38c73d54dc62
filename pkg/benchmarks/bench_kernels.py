"""Compiled vs numpy Adam kernel: time per call and bitwise agreement.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from milkt import _pykernels, kernels

try:
    from milkt._ext import ckernels
except ImportError:
    ckernels = None

# tensor sizes seen in training: b_embed, attn_V, W_embed, one MHFA head's W_V,
# and a whole small-student-plus-MHFA parameter set
SIZES = {"512": 512, "512x256": 512 * 256, "1024x512": 1024 * 512, "768x512": 768 * 512, "3.7M": 3_700_000}
HYPER = dict(lr=2e-4, weight_decay=1e-5, beta1=0.9, beta2=0.999, eps=1e-8)


def time_impl(impl, n, repeat, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)
    kernels.adam_update(p, g, m, v, step=1, impl=impl, **HYPER)  # warm up
    best = np.inf
    for step in range(2, repeat + 2):
        t = time.perf_counter()
        kernels.adam_update(p, g, m, v, step=step, impl=impl, **HYPER)
        best = min(best, time.perf_counter() - t)
    return best, p


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    if ckernels is None:
        print("compiled extension not built; only the numpy kernel is timed")
    print(f"{'size':>10} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8} {'bitwise':>8}")
    for label, n in SIZES.items():
        t_py, p_py = time_impl(_pykernels, n, args.repeat)
        if ckernels is None:
            print(f"{label:>10} {t_py * 1e3:10.3f} {'-':>10} {'-':>8} {'-':>8}")
            continue
        t_c, p_c = time_impl(ckernels, n, args.repeat)
        same = p_py.tobytes() == p_c.tobytes()
        print(f"{label:>10} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:8.2f} {str(same):>8}")


if __name__ == "__main__":
    main()
