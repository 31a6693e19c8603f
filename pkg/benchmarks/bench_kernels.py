"""Time the spatio-temporal convolution kernels on both backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow training: batch 32, latent 16, conv lag 3, plus a larger
station count to show scaling.
"""

import argparse
import timeit

import numpy as np

from heartcast import kernels

SHAPES = [
    # (batch, stations, latent, t_in, conv_lag)
    (32, 2, 16, 72, 3),
    (32, 4, 16, 72, 3),
    (32, 8, 16, 168, 5),
]


def bench(shape, backend, repeat):
    b, s, h, t, k = shape
    rng = np.random.default_rng(0)
    u = rng.normal(size=(b, s, h, t))
    w = rng.normal(size=(h, s, s, k))
    g = rng.normal(size=(b, s, h, t))
    pad = kernels.same_padding(k)[0]
    kernels.stconv_forward(u, w, pad, backend)  # jit warm-up
    kernels.stconv_backward(g, u, w, pad, backend)
    fwd = min(timeit.repeat(lambda: kernels.stconv_forward(u, w, pad, backend), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: kernels.stconv_backward(g, u, w, pad, backend), number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = sorted(kernels.IMPLEMENTATIONS)
    print(f"{'shape (B,S,H,T,K)':<24}" + "".join(f"{b + ' fwd':>14}{b + ' bwd':>14}" for b in backends))
    for shape in SHAPES:
        row = f"{str(shape):<24}"
        for backend in backends:
            fwd, bwd = bench(shape, backend, args.repeat)
            row += f"{fwd * 1e3:>12.3f}ms{bwd * 1e3:>12.3f}ms"
        print(row)


if __name__ == "__main__":
    main()
