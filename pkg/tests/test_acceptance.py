"""Acceptance gate: one test per shipped claim, at the stated tolerance.

Criteria 1-7 and 9 are fast checks against published values, closed forms,
or exhaustive oracles. Criterion 8 runs the full toy pipeline for seeds
{1, 2, 3} (shared module fixture) and criterion 10 reruns one of them to
prove byte-level determinism. Each test ends with a single summary line.
"""

import hashlib
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from latq import autodiff as ad
from latq.autodiff import Tensor
from latq.costmodel import (
    arch_shapes,
    default_quant_plan,
    flops_count,
    preset,
    size_estimate,
)
from latq.data import DatasetRecord, gen_dataset
from latq.model import (
    LengthConfig,
    ModelConfig,
    forward_adaptive,
    forward_full,
    init_params,
)
from latq.pipeline import RunConfig, run_pipeline
from latq.quant import (
    collect_stats,
    compute_qparams,
    dequantize,
    forward_quantized_adaptive,
    quantize_model,
    quantize_tensor,
    quantize_weight,
    quantized_linear,
)
from latq.rng import make_rng
from latq.search import (
    Candidate,
    SearchConfig,
    brute_force_front,
    evolutionary_search,
    grid_configs,
    pareto_insert,
)
from latq.training import TrainConfig, finetune_supervised

from helpers import assert_grads_match, tiny_run_config


def ok(n: int, label: str) -> None:
    print(f"criterion {n:02d} PASS  {label}")


def rel_err(got, want) -> float:
    return abs(got - want) / abs(want)


# ---------------------------------------------------------------------------
# criteria 1-3: published cost-model numbers
# ---------------------------------------------------------------------------


def test_criterion_01_flops_reproduction():
    bert, _ = preset("bert-base")
    tiny, _ = preset("tinybert")
    mini, _ = preset("minilm")
    checks = [
        (flops_count(bert, 384), 3.53e10),
        (flops_count(tiny, 384), 1.77e10),
        (flops_count(mini, 384), 4.76e9),
        (flops_count(mini, 384, LengthConfig((269, 253, 252, 202, 104, 34))), 2.49e9),
        (flops_count(mini, 384, LengthConfig((315, 251, 242, 159, 142, 33))), 2.547e9),
    ]
    for got, want in checks:
        assert rel_err(got, want) < 0.005, (got, want)
    ok(1, "flops_count matches all five published FLOPs values within 0.5%")


def test_criterion_02_size_reproduction():
    for name, want in (("bert-base", 415.4723), ("tinybert", 253.2077), ("minilm", 115.0473)):
        cfg, type_rows = preset(name)
        got = size_estimate(arch_shapes(cfg, type_rows)) / 1024**2
        assert rel_err(got, want) < 0.01, (name, got, want)
    cfg, type_rows = preset("minilm")
    got = size_estimate(arch_shapes(cfg, type_rows), default_quant_plan(cfg)) / 1024**2
    assert rel_err(got, 84.8596) < 0.01, got
    ok(2, "size_estimate matches all four published sizes within 1%")


def test_criterion_03_flops_ratio():
    bert, _ = preset("bert-base")
    mini, _ = preset("minilm")
    adaptive = flops_count(mini, 384, LengthConfig((269, 253, 252, 202, 104, 34)))
    ratio = flops_count(bert, 384) / adaptive
    assert ratio >= 14.0, ratio
    ok(3, f"full-size/adaptive MAC ratio {ratio:.2f} >= 14.0")


# ---------------------------------------------------------------------------
# criterion 4: MAC counter coherence
# ---------------------------------------------------------------------------


def test_criterion_04_cost_coherence():
    rng = make_rng(404)
    cases = 0
    while cases < 110:
        heads = int(rng.integers(1, 4))
        d = heads * int(rng.integers(2, 7)) * 2
        cfg = ModelConfig(num_layers=int(rng.integers(1, 5)), hidden_size=d,
                          num_heads=heads, ffn_size=int(rng.integers(4, 33)),
                          vocab_size=24, max_positions=24)
        n = int(rng.integers(2, 21))
        params = init_params(cfg, int(rng.integers(1 << 30)))
        retain = tuple(np.minimum.accumulate(
            rng.integers(1, 25, size=cfg.num_layers)).tolist())  # may exceed n: clamp path
        lc = LengthConfig(retain)
        tokens = rng.integers(0, 24, size=n)
        tokens[0] = 1
        with ad.no_grad():
            trace, _, _ = forward_adaptive(params, tokens, lc, max_span_len=4)
        assert trace.mac_count == flops_count(cfg, n, lc), (retain, n, cfg)
        cases += 1
    ok(4, f"instrumented MACs equal flops_count exactly on {cases} random cases")


# ---------------------------------------------------------------------------
# criterion 5: gradient suite
# ---------------------------------------------------------------------------


def _fd_tensor(rng, *shape):
    return Tensor(rng.normal(0, 1, size=shape), requires_grad=True)


def test_criterion_05_gradient_suite():
    rng = make_rng(505)
    r = lambda *s: _fd_tensor(rng, *s)

    a, b = r(3, 4), r(3, 4)
    m1, m2 = r(3, 4), r(4, 2)
    b1, b2 = r(2, 3, 4), r(2, 4, 3)
    g = r(5, 4)
    col = r(6, 3)
    ln_x, ln_g, ln_b = r(3, 8), r(8), r(8)
    sm = r(4, 5)
    ge = r(3, 7)
    ce = r(4, 6)
    p, q = r(2, 5), r(2, 5)
    sc1, sc2 = r(2, 4), r(3, 4)

    primitives = {
        "add": ([a, b], lambda: ad.sum_all(ad.mul(ad.add(a, b), ad.add(a, b)))),
        "sub": ([a, b], lambda: ad.sum_all(ad.mul(ad.sub(a, b), ad.sub(a, b)))),
        "mul": ([a, b], lambda: ad.sum_all(ad.mul(a, b))),
        "scale": ([a], lambda: ad.sum_all(ad.scale(a, 1.7))),
        "matmul": ([m1, m2], lambda: ad.sum_all(ad.mul(ad.matmul(m1, m2), ad.matmul(m1, m2)))),
        "bmm": ([b1, b2], lambda: ad.sum_all(ad.mul(ad.bmm(b1, b2), ad.bmm(b1, b2)))),
        "reshape+transpose": ([b1], lambda: ad.sum_all(
            ad.mul(ad.transpose(ad.reshape(b1, (2, 4, 3)), (1, 0, 2)),
                   ad.transpose(ad.reshape(b1, (2, 4, 3)), (1, 0, 2))))),
        "gather_rows": ([g], lambda: ad.sum_all(
            ad.mul(ad.gather_rows(g, np.array([0, 2, 2, 4])),
                   ad.gather_rows(g, np.array([0, 2, 2, 4]))))),
        "scatter_rows": ([sc1, sc2], lambda: ad.sum_all(ad.mul(
            ad.scatter_rows(5, [(np.array([0, 2]), sc1), (np.array([1, 3, 4]), sc2)]),
            ad.scatter_rows(5, [(np.array([0, 2]), sc1), (np.array([1, 3, 4]), sc2)])))),
        "take_column": ([col], lambda: ad.sum_all(
            ad.mul(ad.take_column(col, 1), ad.take_column(col, 1)))),
        "mean_all": ([a], lambda: ad.mul(ad.mean_all(a), ad.mean_all(a))),
        "softmax": ([sm], lambda: ad.sum_all(ad.mul(ad.softmax_lastdim(sm), sm))),
        "layer_norm": ([ln_x, ln_g, ln_b], lambda: ad.sum_all(
            ad.mul(ad.layer_norm(ln_x, ln_g, ln_b, 1e-5), ad.layer_norm(ln_x, ln_g, ln_b, 1e-5)))),
        "gelu": ([ge], lambda: ad.sum_all(ad.mul(ad.gelu(ge), ad.gelu(ge)))),
        "cross_entropy": ([ce], lambda: ad.cross_entropy_logits(ad.take_column(ce, 2), 3)),
        "kl_divergence": ([p, q], lambda: ad.kl_divergence(
            ad.softmax_lastdim(p), ad.softmax_lastdim(q))),
    }
    for name, (tensors, build) in primitives.items():
        assert_grads_match(build, tensors, tol=1e-4)

    cfg = ModelConfig(num_layers=1, hidden_size=8, num_heads=2, ffn_size=16,
                      vocab_size=12, max_positions=8)
    params = init_params(cfg, 55).astype(np.float64)
    tokens = np.array([1, 5, 7, 3, 9, 2])

    def model_loss():
        _, _, (start, end) = forward_full(params, tokens, max_span_len=3)
        return ad.add(ad.cross_entropy_logits(start, 2), ad.cross_entropy_logits(end, 4))

    assert_grads_match(model_loss, list(params.tensors.values()), tol=1e-4)
    ok(5, f"{len(primitives)} primitives and the 1-layer model pass FD checks at 1e-4")


# ---------------------------------------------------------------------------
# criterion 6: drop-and-restore properties
# ---------------------------------------------------------------------------


def test_criterion_06_drop_and_restore_suite():
    rng = make_rng(606)
    equiv = restore = nest = cls = 0
    for _ in range(110):
        heads = int(rng.integers(1, 4))
        d = heads * int(rng.integers(2, 7)) * 2
        cfg = ModelConfig(num_layers=int(rng.integers(1, 4)), hidden_size=d,
                          num_heads=heads, ffn_size=int(rng.integers(4, 25)),
                          vocab_size=20, max_positions=20)
        n = int(rng.integers(2, 17))
        params = init_params(cfg, int(rng.integers(1 << 30)))
        tokens = rng.integers(0, 20, size=n)
        tokens[0] = 1
        with ad.no_grad():
            full_hidden, full_pred, _ = forward_full(params, tokens, max_span_len=4)
            trace_f, pred_f, _ = forward_adaptive(
                params, tokens, LengthConfig.full(cfg.num_layers, n), max_span_len=4)
            retain = tuple(np.minimum.accumulate(rng.integers(1, n + 1, size=cfg.num_layers)).tolist())
            trace, _, _ = forward_adaptive(params, tokens, LengthConfig(retain), max_span_len=4)
        # full-length lc is bit-for-bit the standard forward (tolerance 1e-6)
        assert np.abs(trace_f.restored_hidden - full_hidden.data).max() <= 1e-6
        assert pred_f.span == full_pred.span
        equiv += 1
        # every position restored: vectors present and finite for all n rows
        assert trace.restored_hidden.shape == (n, cfg.hidden_size)
        assert np.isfinite(trace.restored_hidden).all()
        covered = set(trace.active_sets[-1].tolist())
        for prev, cur in zip(trace.active_sets, trace.active_sets[1:]):
            covered |= set(prev.tolist()) - set(cur.tolist())
        assert covered == set(range(n))
        restore += 1
        for prev, cur in zip(trace.active_sets, trace.active_sets[1:]):
            assert set(cur.tolist()) <= set(prev.tolist())
        nest += 1
        assert all(0 in s for s in trace.active_sets)
        cls += 1
    assert min(equiv, restore, nest, cls) >= 100
    ok(6, f"equivalence/restore/nesting/CLS hold on {equiv} random cases")


# ---------------------------------------------------------------------------
# criterion 7: search oracles
# ---------------------------------------------------------------------------


def _search_model():
    cfg = ModelConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32,
                      vocab_size=16, max_positions=16)
    rng = make_rng(707)
    data = []
    for _ in range(24):
        tokens = rng.integers(4, 16, size=8)
        tokens[0] = 1
        s = int(rng.integers(1, 7))
        data.append(DatasetRecord(tuple(int(t) for t in tokens), s, s))
    params, _ = finetune_supervised(
        init_params(cfg, 7), data,
        TrainConfig(epochs=8, batch_size=8, learning_rate=3e-3, seed=7, max_span_len=4))
    return params, data


def test_criterion_07_search_oracle():
    params, data = _search_model()
    oracle = brute_force_front(params, data, grid_configs((2, 4, 6, 8), 2), max_span_len=4)
    for seed in (11, 22, 33):
        sc = SearchConfig(population_size=8, iterations=6, mutation_prob=0.5,
                          mutations_per_iter=6, crossovers_per_iter=6, seed=seed,
                          allowed_values=(2, 4, 6, 8), max_span_len=4)
        front, _ = evolutionary_search(params, data, sc)
        assert [(c.lc, c.macs, c.accuracy) for c in front] == \
               [(c.lc, c.macs, c.accuracy) for c in oracle], seed

    rng = make_rng(770)
    stream = [Candidate(LengthConfig((i + 1,)), int(rng.integers(1, 60)),
                        float(rng.integers(0, 20)) / 20) for i in range(500)]
    front = []
    for cand in stream:
        front = pareto_insert(front, cand)
    expect = []
    for i, ci in enumerate(stream):
        if any(cj.macs <= ci.macs and cj.accuracy >= ci.accuracy for cj in stream[:i]):
            continue
        if any(cj.macs <= ci.macs and cj.accuracy >= ci.accuracy
               and (cj.macs < ci.macs or cj.accuracy > ci.accuracy) for cj in stream):
            continue
        expect.append(ci)
    assert front == sorted(expect, key=lambda c: c.macs)
    ok(7, "grid search equals brute force for 3 seeds; pareto_insert matches the "
          "dominance oracle on a 500-candidate stream")


# ---------------------------------------------------------------------------
# criteria 8-10: toy pipeline quality, quantization suite, byte determinism
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    runs = {}
    t0 = time.perf_counter()
    for seed in (1, 2, 3):
        rc = RunConfig(out_dir=str(root / f"seed{seed}"), seed=seed)
        runs[seed] = (rc, run_pipeline(rc))
    return runs, time.perf_counter() - t0


def test_criterion_08_toy_pipeline_quality(toy_runs):
    runs, elapsed = toy_runs
    for seed, (rc, result) in runs.items():
        m = {(row["stage"], row["split"]): row for row in result["metrics"]}
        # (a) fine-tuned student
        assert m[("finetuned", "dev")]["exact_match"] > 0.95, seed
        # (b) full-length f1 preserved through LAT training (1 point)
        pre = m[("finetuned", "dev")]["token_f1"]
        post = m[("lat", "dev")]["token_f1"]
        assert post >= pre - 0.01, (seed, pre, post)
        # (c) a frontier config cuts >= 30% of MACs within 2 points of f1
        ref = flops_count(rc.student_model, rc.data.seq_len)
        cheap = [c for c in result["front"]
                 if c.macs <= 0.7 * ref and c.accuracy >= post - 0.02]
        assert cheap, (seed, [(str(c.lc), c.macs, c.accuracy) for c in result["front"]])
        # (d) quantization costs at most 2 points at full length
        lat_test = m[("lat", "test")]["token_f1"]
        q_test = m[("quantized", "test")]["token_f1"]
        assert q_test >= lat_test - 0.02, (seed, lat_test, q_test)
    assert elapsed < 1800, f"3-seed pipeline took {elapsed:.0f}s"
    ok(8, f"seeds 1-3 meet (a)-(d); 3 runs took {elapsed:.0f}s < 30 min")


def test_criterion_09_quantization_suite():
    rng = make_rng(909)
    # round-trip error bound over random in-range tensors
    for _ in range(50):
        lo = float(rng.uniform(-20, 5))
        hi = lo + float(rng.uniform(1e-3, 30))
        qp = compute_qparams(lo, hi)
        xs = rng.uniform(lo, hi, size=257)
        err = np.abs(dequantize(quantize_tensor(xs, qp), qp) - xs)
        assert err.max() <= qp.scale / 2 + 1e-6, (lo, hi)
        assert quantize_tensor(np.zeros(1), qp)[0] == qp.zero_point
        assert dequantize(np.uint8(qp.zero_point), qp) == 0.0

    # quantized_linear against the dequantize-then-multiply oracle
    for _ in range(20):
        x = rng.normal(0, 1, size=(6, 16)).astype(np.float32)
        w = rng.normal(0, 0.4, size=(16, 10)).astype(np.float32)
        bias = rng.normal(0, 0.1, size=10).astype(np.float32)
        qp = compute_qparams(float(x.min()), float(x.max()))
        qt = quantize_weight(w)
        got = quantized_linear(x, qp, qt, bias)
        want = dequantize(quantize_tensor(x, qp), qp).astype(np.float64) @ \
            qt.dequantize().astype(np.float64) + bias
        assert np.abs(got - want).max() <= 1e-5

    # MAC parity between fp32 and int8 adaptive forwards, asserted exactly
    cfg = ModelConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32,
                      vocab_size=16, max_positions=16)
    params = init_params(cfg, 9)
    params.stage = "length_adaptive"
    records = [DatasetRecord(tuple(int(t) for t in np.r_[1, rng.integers(4, 16, size=7)]), 1, 2)
               for _ in range(6)]
    qm = quantize_model(params, collect_stats(params, records, max_span_len=4))
    for retain in [(8, 8), (6, 3), (4, 1), (12, 2)]:
        lc = LengthConfig(retain)
        with ad.no_grad():
            ftrace, _, _ = forward_adaptive(params, records[0].tokens, lc, 4)
        qtrace, _, _ = forward_quantized_adaptive(qm, records[0].tokens, lc, 4)
        assert qtrace.mac_count == ftrace.mac_count, retain
    ok(9, "round-trip <= S/2, linear oracle <= 1e-5, zero at Z, MACs unchanged")


def test_criterion_10_pipeline_determinism(toy_runs):
    runs, _ = toy_runs
    rc, _result = runs[1]

    def snapshot():
        return {p.relative_to(rc.out_dir).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(Path(rc.out_dir).rglob("*")) if p.is_file()}

    first = snapshot()
    shutil.rmtree(rc.out_dir)
    run_pipeline(rc)
    second = snapshot()
    assert second == first
    assert any(k.endswith(".qlml") for k in first) and any(k.endswith(".csv") for k in first)
    ok(10, f"rerun reproduced all {len(first)} artifacts byte-for-byte")
