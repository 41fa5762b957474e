"""Timing comparison of the jitted and pure-numpy hot kernels.

Both implementations of each kernel are importable regardless of which one
the package selected at import time, so this script times them side by side:
nearest-codeword search at tokenizer-training scale and causal attention
(forward and backward) at LM-training scale.

Run:  python benchmarks/bench_kernels.py [--reps 5] [--scale small|full]
"""

import argparse
import time

import numpy as np

from speechsel._kernels import (
    _HAS_NUMBA,
    _attn_bwd_nb,
    _attn_bwd_np,
    _attn_fwd_nb,
    _attn_fwd_np,
    _nearest_codeword_nb,
    _nearest_codeword_np,
    verify_jit,
)

SCALES = {
    # (frames, feature dim, codewords), (batch, heads, context, head dim)
    "small": ((4000, 16, 64), (4, 4, 48, 16)),
    "full": ((40000, 16, 64), (16, 4, 128, 32)),
}


def median_time(fn, reps):
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--reps", type=int, default=5,
                        help="repetitions per kernel (median reported)")
    parser.add_argument("--scale", choices=sorted(SCALES), default="small")
    args = parser.parse_args()

    if _HAS_NUMBA:
        verify_jit()  # pay compilation cost before timing
    else:
        print("numba unavailable or disabled; the 'numba' column is "
              "plain-python loop timing")

    (n_frames, dim, n_codes), (b, h, t, hd) = SCALES[args.scale]
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(n_frames, dim))
    codebook = rng.normal(size=(n_codes, dim))
    q = rng.normal(size=(b, h, t, hd))
    k = rng.normal(size=(b, h, t, hd))
    v = rng.normal(size=(b, h, t, hd))
    g = rng.normal(size=(b, h, t, hd))
    _, w = _attn_fwd_np(q, k, v)

    cases = [
        (f"nearest_codeword {n_frames}x{dim} vs {n_codes}",
         lambda: _nearest_codeword_nb(frames, codebook),
         lambda: _nearest_codeword_np(frames, codebook)),
        (f"attn_fwd {b}x{h}x{t}x{hd}",
         lambda: _attn_fwd_nb(q, k, v),
         lambda: _attn_fwd_np(q, k, v)),
        (f"attn_bwd {b}x{h}x{t}x{hd}",
         lambda: _attn_bwd_nb(g, q, k, v, w),
         lambda: _attn_bwd_np(g, q, k, v, w)),
    ]

    header = f"{'kernel':<38} {'numba':>10} {'numpy':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, nb_fn, np_fn in cases:
        t_nb = median_time(nb_fn, args.reps)
        t_np = median_time(np_fn, args.reps)
        print(f"{name:<38} {t_nb * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
