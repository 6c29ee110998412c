"""Time the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_backends.py --width 240 --height 184 --repeat 5

Shapes follow the network at the given resolution: the head conv's im2col,
the dynamic decoder's per-pixel filtering, warping and voxelization.
"""

import argparse
import time

import numpy as np

from evrecon import kernels


def timeit(fn, repeat):
    fn()  # warm-up, includes numba compilation
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(best))


def cases(width, height, rng):
    h4, w4 = height // 4, width // 4
    xpad = rng.standard_normal((1, 5, height + 4, width + 4)).astype(np.float32)
    zpad = rng.standard_normal((1, 256, h4 + 4, w4 + 4)).astype(np.float32)
    atoms = rng.standard_normal((1, 6, 25, h4, w4)).astype(np.float32)
    gz = rng.standard_normal((1, 256, 6, h4, w4)).astype(np.float32)
    img = rng.random((2, 1, height, width))
    sx = rng.uniform(-2, width + 1, (2, height, width))
    sy = rng.uniform(-2, height + 1, (2, height, width))
    n_ev = 200_000
    ev = (
        rng.integers(0, width, n_ev),
        rng.integers(0, height, n_ev),
        rng.uniform(0, 4, n_ev),
        rng.choice([-1.0, 1.0], n_ev),
    )
    cols = None

    def im2col(b):
        return lambda: b.im2col(xpad, 5, 1, height, width)

    def col2im(b):
        nonlocal cols
        if cols is None:
            cols = kernels.NUMPY.im2col(xpad, 5, 1, height, width)
        return lambda: b.col2im(cols, 5, height + 4, width + 4, 5, 1, height, width)

    return {
        "im2col (head, k=5)": im2col,
        "col2im (head, k=5)": col2im,
        "pixel_filter (CGDD)": lambda b: (lambda: b.pixel_filter(zpad, atoms, 5)),
        "pixel_filter_grad (CGDD)": lambda b: (lambda: b.pixel_filter_grad(zpad, atoms, gz, 5)),
        "bilinear_sample (warp)": lambda b: (lambda: b.bilinear_sample(img, sx, sy)),
        "bilinear_sample_grad": lambda b: (lambda: b.bilinear_sample_grad(img, sx, sy)),
        "voxel_accumulate (200k ev)": lambda b: (lambda: b.voxel_accumulate(*ev, 5, height, width)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=240)
    ap.add_argument("--height", type=int, default=184)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.NUMBA is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    rows = []
    for name, make in cases(args.width, args.height, rng).items():
        t_np = timeit(make(kernels.NUMPY), args.repeat)
        t_nb = timeit(make(kernels.NUMBA), args.repeat)
        rows.append((name, t_np, t_nb))
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, a, b in rows:
        print(f"{name:28s} {a:10.2f} {b:10.2f} {a / b:7.1f}x")
    return rows


if __name__ == "__main__":
    main()
