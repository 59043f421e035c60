"""Shared test oracles: finite differences and naive reference implementations."""

import numpy as np

from latq import autodiff as ad


def finite_diff_grad(loss_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function w.r.t. an array mutated in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = loss_fn()
        x[idx] = orig - h
        f_minus = loss_fn()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def assert_grads_match(build_loss, tensors, h: float = 1e-5, tol: float = 1e-4):
    """Check every tensor's analytic gradient against central differences.

    build_loss must rebuild the graph from the given float64 tensors on each
    call; gradients are read after one backward pass.
    """
    for t in tensors:
        assert t.data.dtype == np.float64, "finite differences need 64-bit data"
        t.zero_grad()
    loss = build_loss()
    ad.backward(loss)

    def scalar():
        with ad.no_grad():
            return float(build_loss().data)

    for i, t in enumerate(tensors):
        assert t.grad is not None, f"tensor {i} received no gradient"
        numeric = finite_diff_grad(scalar, t.data, h)
        rel = np.abs(t.grad - numeric) / np.maximum(1.0, np.abs(t.grad))
        assert rel.max() < tol, f"tensor {i}: max rel error {rel.max():.3e}"


def tiny_run_config(out_dir, seed=0):
    """A miniature RunConfig whose full pipeline finishes in ~10 s."""
    from latq.data import GenSettings
    from latq.model import ModelConfig
    from latq.pipeline import RunConfig
    from latq.search import SearchConfig
    from latq.training import DistillConfig, TrainConfig

    return RunConfig(
        out_dir=str(out_dir), seed=seed, max_span_len=4,
        data=GenSettings(vocab_size=32, seq_len=16, n_train=128, n_dev=32, n_test=32,
                         answer_vocab=8, max_answer_len=2),
        teacher_model=ModelConfig(2, 32, 2, 64, 32, 16),
        student_model=ModelConfig(2, 16, 2, 32, 32, 16),
        teacher_train=TrainConfig(epochs=20, batch_size=8, learning_rate=1e-3, max_span_len=4,
                                  eval_every=32, stop_at_exact_match=0.95),
        distill=DistillConfig(steps=100),
        distill_train=TrainConfig(batch_size=8, learning_rate=1e-3),
        student_train=TrainConfig(epochs=25, batch_size=8, learning_rate=1e-3, max_span_len=4,
                                  eval_every=32, stop_at_exact_match=0.95, max_steps=1500),
        lat_train=TrainConfig(epochs=2, batch_size=8, learning_rate=3e-4, max_span_len=4,
                              p_max=0.3),
        search=SearchConfig(population_size=8, iterations=5, mutation_prob=0.4,
                            mutations_per_iter=6, crossovers_per_iter=6, max_span_len=4),
        calibration_records=32,
    )


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out
