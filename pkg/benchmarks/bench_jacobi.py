"""Compare the compiled Jacobi kernel with the pure-numpy fallback.

Run with ``python3 benchmarks/bench_jacobi.py``. Reports the median wall time
per call for batched eigendecompositions and for one model forward pass.
"""
import argparse
import time

import numpy as np

from tensorcspnet import symmat
from tensorcspnet.model import Model, ModelConfig


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _spd_batch(rng, batch, n):
    A = rng.standard_normal((batch, n, n))
    return A @ np.swapaxes(A, -1, -2) / n + np.eye(n)


def bench_eig(sizes, batch, repeat, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        S = _spd_batch(rng, batch, n)
        row = {"n": n}
        for backend in ("compiled", "python"):
            if backend == "compiled" and symmat.BACKEND != "compiled":
                row[backend] = float("nan")
                continue
            row[backend] = _median_time(lambda: symmat.sym_eig(S, backend=backend), repeat)
        rows.append(row)
    return rows


def bench_forward(batch, repeat, seed=0):
    cfg = ModelConfig(w=1, m=9, n=1, l=1, o=8, classes=2, channels=8).validate()
    model = Model.build(cfg, seed=seed)
    x = _spd_batch(np.random.default_rng(seed), batch * 9, 8).reshape(batch, 1, 9, 8, 8)
    out = {}
    saved = symmat.BACKEND
    try:
        for backend in ("compiled", "python"):
            if backend == "compiled" and saved != "compiled":
                out[backend] = float("nan")
                continue
            symmat.set_backend(backend)
            out[backend] = _median_time(lambda: model.forward(x, mode="eval"), repeat)
    finally:
        symmat.set_backend(saved)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 22, 32])
    args = ap.parse_args(argv)
    print(f"active backend: {symmat.BACKEND}")
    print(f"{'n':>4} {'compiled [ms]':>14} {'python [ms]':>12} {'speedup':>8}")
    for r in bench_eig(args.sizes, args.batch, args.repeat):
        print(f"{r['n']:>4} {1e3 * r['compiled']:>14.2f} {1e3 * r['python']:>12.2f} "
              f"{r['python'] / r['compiled']:>8.1f}")
    f = bench_forward(min(args.batch, 64), args.repeat)
    print(f"forward pass (batch {min(args.batch, 64)}, 9 bands, 8x8): "
          f"compiled {1e3 * f['compiled']:.1f} ms, python {1e3 * f['python']:.1f} ms")


if __name__ == "__main__":
    main()
