"""Dense tensors with reverse-mode differentiation.

Minimal tape engine in the micrograd style: each op returns a new Tensor
holding a backward closure over its parents; `backward()` topologically
sorts the implicit graph and accumulates gradients into every
requires_grad leaf. float32 is the working precision; pass float64 arrays
for finite-difference checking.

Every matmul-class op reports its multiply-accumulate count to a global
counter (`mac_count` / `reset_macs`) so forward passes can be audited
against the closed-form cost model.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .kernels import np_gelu, np_gelu_grad, np_layer_norm, np_softmax_lastdim

_grad_enabled = True
_mac_counter = 0


def add_macs(count: int) -> None:
    global _mac_counter
    _mac_counter += int(count)


def mac_count() -> int:
    return _mac_counter


def reset_macs() -> None:
    global _mac_counter
    _mac_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus optional autodiff bookkeeping.

    Treat the data as immutable once the tensor has been consumed by an op;
    parameter updates happen between steps, on leaves only.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; records the closure only while grads are enabled."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._prev = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out_data = a.data * c

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * c)

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; registers m*k*n MACs."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    add_macs(m * k * n)
    out_data = a.data @ b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    return _make(out_data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis; registers B*m*k*n MACs."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    bsz, m, k = a.shape
    n = b.shape[2]
    add_macs(bsz * m * k * n)
    out_data = a.data @ b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ out.grad)

    return _make(out_data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(out.grad, inverse))

    return _make(out_data, (a,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 (embedding lookup, active-token selection)."""
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a.accumulate_grad(g)

    return _make(out_data, (a,), backward)


def scatter_rows(n_rows: int, blocks: Iterable[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Assemble an (n_rows, d) tensor from (positions, block) pieces.

    The position arrays must partition range(n_rows) exactly once; used to
    restore dropped token vectors at their original positions.
    """
    blocks = [(np.asarray(pos), t) for pos, t in blocks]
    covered = np.concatenate([pos for pos, _ in blocks]) if blocks else np.array([], dtype=int)
    if len(covered) != n_rows or len(np.unique(covered)) != n_rows:
        raise ContractError(f"scatter_rows blocks must cover {n_rows} rows exactly once")
    d = blocks[0][1].shape[1]
    out_data = np.empty((n_rows, d), dtype=blocks[0][1].dtype)
    for pos, t in blocks:
        out_data[pos] = t.data

    def backward(out):
        for pos, t in blocks:
            if t.requires_grad:
                t.accumulate_grad(out.grad[pos])

    return _make(out_data, tuple(t for _, t in blocks), backward)


def take_column(a: Tensor, col: int) -> Tensor:
    out_data = a.data[:, col].copy()

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, col] = out.grad
            a.accumulate_grad(g)

    return _make(out_data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out_data = a.data.sum()

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad))

    return _make(out_data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Rows sum to 1; stabilized by max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    y = np_softmax_lastdim(a.data)

    def backward(out):
        if a.requires_grad:
            dot = (out.grad * y).sum(axis=-1, keepdims=True)
            a.accumulate_grad(y * (out.grad - dot))

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{bias.shape} does not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(out):
        if gain.requires_grad:
            gain.accumulate_grad((out.grad * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(out.grad.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = out.grad * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv_std)

    return _make(out_data, (x, gain, bias), backward)


def gelu(a: Tensor) -> Tensor:
    out_data = np_gelu(a.data)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * np_gelu_grad(a.data))

    return _make(out_data, (a,), backward)


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects a vector, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    m = logits.data.max()
    shifted = logits.data - m
    lse = m + np.log(np.exp(shifted).sum())
    out_data = np.asarray(lse - logits.data[target], dtype=logits.dtype)

    def backward(out):
        if logits.requires_grad:
            g = np_softmax_lastdim(logits.data)
            g = g.copy()
            g[target] -= 1.0
            logits.accumulate_grad(g * out.grad)

    return _make(out_data, (logits,), backward)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """sum over rows of KL(p_row || q_row), with 0*log0 = 0.

    Rows are the last axis; both operands must be row-normalized and q must
    be positive wherever p is.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise NumericError(f"kl_divergence: {name} rows do not sum to 1")
    mask = p.data > 0
    if np.any(mask & (q.data <= 0)):
        raise NumericError("kl_divergence: q must be positive on the support of p")
    ratio = np.ones_like(p.data)
    np.divide(p.data, q.data, out=ratio, where=mask)
    log_ratio = np.where(mask, np.log(ratio), 0.0)
    out_data = np.asarray((p.data * log_ratio).sum(), dtype=p.dtype)

    def backward(out):
        if p.requires_grad:
            p.accumulate_grad(np.where(mask, log_ratio + 1.0, 0.0) * out.grad)
        if q.requires_grad:
            q.accumulate_grad(np.where(mask, -ratio, 0.0) * out.grad)

    return _make(out_data, (p, q), backward)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss.

    Repeated calls without zero_grad accumulate, matching the additive
    gradient contract.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node._backward(node)
    # drop intermediate grads; leaves keep their accumulated values and the
    # graph stays intact so repeated calls keep accumulating
    for node in topo:
        if node._backward is not None and node is not loss:
            node.grad = None
