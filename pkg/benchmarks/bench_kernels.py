"""Time the int8 accumulation kernel: numba jit vs pure numpy.

Both paths compute the same exact int32 result (asserted below), so the only
question is speed. Shapes mirror what the quantized forward pass actually
runs: (tokens x hidden) @ (hidden x out) for attention projections and the
two FFN matmuls.

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from latq.kernels import int8_acc_matmul_numba, int8_acc_matmul_numpy
from latq.rng import make_rng

SHAPES = [
    (64, 384, 384),     # short sequence, attention projection
    (384, 384, 384),    # full sequence, attention projection
    (384, 384, 1536),   # full sequence, FFN expand
    (384, 1536, 384),   # full sequence, FFN contract
]
REPS = 5


def bench(fn, xq, z, wq) -> float:
    best = float("inf")
    for _ in range(REPS):
        t0 = time.perf_counter()
        fn(xq, z, wq)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    rng = make_rng(1234)
    print(f"{'shape':>18}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for m, k, n in SHAPES:
        xq = rng.integers(0, 256, size=(m, k)).astype(np.uint8)
        wq = rng.integers(-127, 128, size=(k, n)).astype(np.int8)
        z = 117
        ref = int8_acc_matmul_numpy(xq, z, wq)
        got = int8_acc_matmul_numba(xq, z, wq)  # first call also compiles
        assert np.array_equal(ref, got), "backends disagree"
        t_np = bench(int8_acc_matmul_numpy, xq, z, wq)
        t_nb = bench(int8_acc_matmul_numba, xq, z, wq)
        print(f"{f'{m}x{k}x{n}':>18}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms"
              f"  {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
