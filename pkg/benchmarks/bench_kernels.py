"""Time the compiled and pure-numpy convolution kernels on MNIST-shaped batches.

    python benchmarks/bench_kernels.py [--batch 200] [--repeat 5]

Prints per-call times for each backend and the speed-up, after checking that
both backends agree on the same inputs.
"""

import argparse
import timeit

import numpy as np

from ssimadv import kernels

# (input shape, weight shape, stride) for the two conv layers of the desk model
LAYERS = [((28, 28, 1), (3, 3, 1, 16), 2), ((13, 13, 16), (3, 3, 16, 32), 2)]


def cases(batch, rng):
    for shape, wshape, stride in LAYERS:
        x = rng.random((batch,) + shape)
        w = rng.normal(size=wshape)
        b = rng.normal(size=wshape[-1])
        dy = kernels.get_backend("python").conv2d_forward(x, w, b, stride)
        yield f"{shape[2]}->{wshape[3]} s{stride}", x, w, b, dy, stride


def ops(be, x, w, b, dy, stride):
    return {
        "forward": lambda: be.conv2d_forward(x, w, b, stride),
        "backward_input": lambda: be.conv2d_backward_input(dy, w, x.shape, stride),
        "backward_weight": lambda: be.conv2d_backward_weight(dy, x, w.shape, stride),
    }


def _tuple(r):
    return r if isinstance(r, tuple) else (r,)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    names = kernels.available_backends()
    print(f"backends: {', '.join(names)}; active: {kernels.BACKEND}; batch {args.batch}")
    rng = np.random.default_rng(0)
    print(f"{'layer':<12}{'op':<17}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speed-up':>10}")
    for label, x, w, b, dy, stride in cases(args.batch, rng):
        per = {n: ops(kernels.get_backend(n), x, w, b, dy, stride) for n in names}
        for op in per[names[0]]:
            results = [_tuple(per[n][op]()) for n in names]
            for r in results[1:]:
                for u, v in zip(results[0], r):
                    np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-9)
            ms = {n: 1e3 * min(timeit.repeat(per[n][op], number=1, repeat=args.repeat)) for n in names}
            line = f"{label:<12}{op:<17}" + "".join(f"{ms[n]:>12.2f}" for n in names)
            if "cython" in ms:
                line += f"{ms['python'] / ms['cython']:>9.1f}x"
            print(line)


if __name__ == "__main__":
    main()
