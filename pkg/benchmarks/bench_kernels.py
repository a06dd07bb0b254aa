"""Compare the compiled kernel backend against the NumPy reference.

Runs every fused kernel on encoder-shaped workloads under both backends
and reports wall-clock medians plus the speedup ratio. The compiled
extension must be built; otherwise only the reference column is shown.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 9 --preset small
"""

import argparse
import statistics
import timeit

import numpy as np

from redbert.kernels import pykernels

try:
    from redbert.kernels import _ckernels
except ImportError:
    _ckernels = None

PRESETS = {
    # batch 32, 4 heads, seq 128, hidden 256: one desk-scale encoder step
    "full": {
        "attn_scores": (32, 4, 128, 128),
        "hidden": (32, 128, 256),
        "adam": (256 * 256 * 16,),
    },
    "small": {
        "attn_scores": (8, 2, 32, 32),
        "hidden": (8, 32, 64),
        "adam": (64 * 64 * 4,),
    },
}


def median_ms(fn, repeats):
    fn()  # warm up caches and any lazy allocation
    times = timeit.repeat(fn, number=1, repeat=repeats)
    return statistics.median(times) * 1e3


def build_cases(preset, dtype):
    rng = np.random.default_rng(0)
    scores = rng.standard_normal(preset["attn_scores"]).astype(dtype)
    d_scores = rng.standard_normal(preset["attn_scores"]).astype(dtype)
    hidden = rng.standard_normal(preset["hidden"]).astype(dtype)
    d_hidden = rng.standard_normal(preset["hidden"]).astype(dtype)
    width = preset["hidden"][-1]
    gamma = rng.standard_normal(width).astype(dtype)
    beta = rng.standard_normal(width).astype(dtype)
    probs = pykernels.softmax_fwd(scores)
    logp = pykernels.log_softmax_fwd(scores)
    _, mean, rstd = pykernels.layer_norm_fwd(hidden, gamma, beta, 1e-5)

    n = preset["adam"][0]
    adam_state = lambda: (rng.standard_normal(n).astype(dtype),  # noqa: E731
                          rng.standard_normal(n).astype(dtype),
                          np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype))

    def adam_case(backend):
        param, grad, m, v = adam_state()
        return lambda: backend.adam_update(param, grad, m, v, 1e-3, 0.9,
                                           0.999, 1e-8, 1)

    cases = [
        ("softmax_fwd", scores.shape,
         lambda b: lambda: b.softmax_fwd(scores)),
        ("softmax_bwd", scores.shape,
         lambda b: lambda: b.softmax_bwd(probs, d_scores)),
        ("log_softmax_fwd", scores.shape,
         lambda b: lambda: b.log_softmax_fwd(scores)),
        ("log_softmax_bwd", scores.shape,
         lambda b: lambda: b.log_softmax_bwd(logp, d_scores)),
        ("gelu_fwd", hidden.shape, lambda b: lambda: b.gelu_fwd(hidden)),
        ("gelu_bwd", hidden.shape,
         lambda b: lambda: b.gelu_bwd(hidden, d_hidden)),
        ("layer_norm_fwd", hidden.shape,
         lambda b: lambda: b.layer_norm_fwd(hidden, gamma, beta, 1e-5)),
        ("layer_norm_bwd", hidden.shape,
         lambda b: lambda: b.layer_norm_bwd(hidden, gamma, mean, rstd,
                                            d_hidden)),
        ("adam_update", preset["adam"], adam_case),
    ]
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--preset", choices=sorted(PRESETS), default="full")
    parser.add_argument("--dtype", choices=["float32", "float64"],
                        default="float32")
    args = parser.parse_args()

    dtype = np.dtype(args.dtype)
    cases = build_cases(PRESETS[args.preset], dtype)

    print(f"preset={args.preset} dtype={dtype.name} repeats={args.repeats}")
    header = f"{'kernel':<17} {'shape':<18} {'numpy ms':>10} "
    header += f"{'cython ms':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, shape, make in cases:
        ref_ms = median_ms(make(pykernels), args.repeats)
        if _ckernels is None:
            print(f"{name:<17} {str(shape):<18} {ref_ms:>10.3f} "
                  f"{'n/a':>10} {'n/a':>8}")
            continue
        fast_ms = median_ms(make(_ckernels), args.repeats)
        print(f"{name:<17} {str(shape):<18} {ref_ms:>10.3f} "
              f"{fast_ms:>10.3f} {ref_ms / fast_ms:>7.2f}x")
    if _ckernels is None:
        print("\ncompiled extension not built; reference backend only")


if __name__ == "__main__":
    main()
