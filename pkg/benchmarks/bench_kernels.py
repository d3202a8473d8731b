"""Time the compiled kernels against the numpy fallback on representative sizes.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time for each backend,
the speed-up, and whether both backends returned identical results.
"""

import argparse
import timeit

import numpy as np

from pixseg import kernels


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cases(rng):
    ids = rng.integers(0, 36, 224 * 224)
    values = rng.standard_normal((224 * 224, 64))
    yield "segment_sums", (ids, values, 36)

    a = rng.integers(0, 36, 224 * 224)
    b = rng.integers(0, 21, 224 * 224)
    yield "crosstab", (a, b, 36, 21)

    x = _unit(rng.standard_normal((20000, 64)))
    yield "cosine_assign", (x, _unit(rng.standard_normal((36, 64))))

    query = _unit(rng.standard_normal((28, 28, 32)))
    refs = _unit(rng.standard_normal((2, 28, 28, 32)))
    labels = rng.integers(0, 3, (2, 28, 28))
    yield "window_propagate", (query, refs, labels, 6, 5, 3)

    pts = _unit(rng.standard_normal((5000, 64)))
    yield "kmeanspp_seed", (pts, 36, 0, rng.random(35))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if kernels.compiled is None:
        raise SystemExit("compiled kernels unavailable: run `python setup.py build_ext --inplace` "
                         "and unset PIXSEG_PURE_PYTHON")

    print(f"{'kernel':<18}{'python (ms)':>13}{'cython (ms)':>13}{'speed-up':>10}  identical")
    for name, argv in cases(np.random.default_rng(args.seed)):
        py_fn = getattr(kernels.python, name)
        c_fn = getattr(kernels.compiled, name)
        t_py = min(timeit.repeat(lambda: py_fn(*argv), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: c_fn(*argv), number=1, repeat=args.repeat))
        print(f"{name:<18}{1e3 * t_py:>13.2f}{1e3 * t_c:>13.2f}{t_py / t_c:>9.1f}x  {same(py_fn(*argv), c_fn(*argv))}")


if __name__ == "__main__":
    main()
