"""Numeric kernels with a numba fast path and a pure-numpy fallback.

The hot loop here is the int8 linear layer: numpy has no BLAS route for
integer matmul, so the numba kernel wins by a wide margin on the sizes the
quantized forward pass actually runs. Backend selection:

    LATQ_BACKEND=numpy   force the pure-numpy path
    LATQ_BACKEND=numba   require numba (raises if unavailable)
    unset                numba when importable, numpy otherwise

Both paths do exact int32 accumulation, so results are bit-identical.
`benchmarks/bench_kernels.py` times one against the other.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

from .errors import ConfigError

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not args or not callable(args[0]) else args[0]


_ENV_FLAG = "LATQ_BACKEND"


def active_backend() -> str:
    """Resolve the kernel backend from the environment flag."""
    choice = os.environ.get(_ENV_FLAG, "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not _HAS_NUMBA:
            raise ConfigError(f"{_ENV_FLAG}=numba but numba is not importable")
        return "numba"
    if choice not in ("", "auto"):
        raise ConfigError(f"unknown {_ENV_FLAG} value {choice!r}")
    return "numba" if _HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# int8 linear layer accumulation
# ---------------------------------------------------------------------------


def int8_acc_matmul_numpy(xq: np.ndarray, zero_point: int, wq: np.ndarray) -> np.ndarray:
    """acc[i,j] = sum_k (xq[i,k]-Z) * wq[k,j], exact int32. xq (m,k) uint8, wq (k,n) int8."""
    return (xq.astype(np.int32) - np.int32(zero_point)) @ wq.astype(np.int32)


@njit(cache=True)
def _int8_acc_matmul_jit(xq, zero_point, wq):  # pragma: no cover - compiled
    m, k = xq.shape
    n = wq.shape[1]
    out = np.zeros((m, n), dtype=np.int32)
    for i in range(m):
        for p in range(k):
            xv = np.int32(xq[i, p]) - zero_point
            if xv == 0:
                continue
            for j in range(n):
                out[i, j] += xv * np.int32(wq[p, j])
    return out


def int8_acc_matmul_numba(xq: np.ndarray, zero_point: int, wq: np.ndarray) -> np.ndarray:
    """Same contract as the numpy path, jit-compiled."""
    if not _HAS_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    return _int8_acc_matmul_jit(xq, np.int32(zero_point), wq)


def int8_acc_matmul(xq: np.ndarray, zero_point: int, wq: np.ndarray) -> np.ndarray:
    if active_backend() == "numba":
        return int8_acc_matmul_numba(xq, zero_point, wq)
    return int8_acc_matmul_numpy(xq, zero_point, wq)


# ---------------------------------------------------------------------------
# shared float math (single source of truth for tape ops and the quantized
# forward pass, which bypasses the tape)
# ---------------------------------------------------------------------------


def np_softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    """Per-row zero-mean unit-variance normalization, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def np_gelu(x: np.ndarray) -> np.ndarray:
    """Exact-erf gelu: x * Phi(x)."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def np_gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of x * Phi(x) = Phi(x) + x * phi(x)."""
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return (cdf + x * phi).astype(x.dtype, copy=False)
