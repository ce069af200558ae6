"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py --size 256 --repeat 3
"""

import argparse
import timeit

import numpy as np
from scipy import ndimage, sparse

from hybridflow import _fallback

try:
    from hybridflow import _kernels
except ImportError:  # extension not built
    _kernels = None


def make_cases(size: int, seed: int):
    """Inputs of each kernel at image side ``size``; returns name -> args builder."""
    rng = np.random.default_rng(seed)
    cost = ndimage.gaussian_filter(rng.random((size, size)), 2)
    cost = np.ascontiguousarray(cost / cost.max())
    n_seeds = max(4, size * size // 40)
    idx = rng.choice(size * size, n_seeds, replace=False)
    sy = np.ascontiguousarray(idx // size, dtype=np.intp)
    sx = np.ascontiguousarray(idx % size, dtype=np.intp)

    # random geometric graph over the seeds for the k-NN search
    pts = np.stack([sx, sy], 1).astype(float)
    rows, cols = [], []
    for i in range(n_seeds):
        d = np.hypot(*(pts - pts[i]).T)
        nb = np.argsort(d)[1:7]
        rows += [i] * len(nb)
        cols += nb.tolist()
    w = np.hypot(*(pts[rows] - pts[cols]).T)
    g = sparse.csr_matrix((w, (rows, cols)), shape=(n_seeds, n_seeds))
    g = g.maximum(g.T).tocsr()

    labels = np.ascontiguousarray(rng.integers(0, 12, (size, size)), dtype=np.int32)
    labels = np.ascontiguousarray(ndimage.median_filter(labels, 5), dtype=np.int32)
    mask = np.ones((size, size), dtype=np.uint8)

    def sor_args():
        shape = (size, size)
        a11 = rng.random(shape) + 0.1
        a22 = rng.random(shape) + 0.1
        a12 = 0.1 * rng.standard_normal(shape)
        b1, b2 = rng.standard_normal(shape), rng.standard_normal(shape)
        wx = np.ascontiguousarray(rng.random((size, size - 1)))
        wy = np.ascontiguousarray(rng.random((size - 1, size)))
        return (np.zeros(shape), np.zeros(shape), a11, a12, a22, b1, b2, wx, wy,
                np.zeros(shape), np.zeros(shape), 10.0, 1.85, 30)

    sor = sor_args()
    return {
        "geodesic_voronoi": lambda: (cost, sy, sx, 0.01),
        "seed_knn": lambda: (n_seeds, g.indptr.astype(np.intp), g.indices.astype(np.intp),
                             g.data.astype(np.float64), 25),
        "label_components": lambda: (labels, mask),
        # fresh increments each call, the kernel updates them in place
        "sor_red_black": lambda: (np.zeros_like(sor[0]), np.zeros_like(sor[1])) + sor[2:],
    }


def bench(fn, build, repeat):
    return min(timeit.repeat(lambda: fn(*build()), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=256, help="image side in pixels")
    parser.add_argument("--repeat", type=int, default=3, help="timing repeats (best is kept)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    cases = make_cases(args.size, args.seed)
    print(f"image {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':<18} {'python [ms]':>12} {'cython [ms]':>12} {'speedup':>8}")
    for name, build in cases.items():
        t_py = bench(getattr(_fallback, name), build, args.repeat)
        if _kernels is None:
            print(f"{name:<18} {1e3 * t_py:12.1f} {'n/a':>12} {'':>8}")
            continue
        t_cy = bench(getattr(_kernels, name), build, args.repeat)
        print(f"{name:<18} {1e3 * t_py:12.1f} {1e3 * t_cy:12.1f} {t_py / t_cy:7.1f}x")
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
