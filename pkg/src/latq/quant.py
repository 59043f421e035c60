"""Post-training int8 quantization and the integer inference path.

The dequantization contract everywhere is r = S * (q - Z).

Weights in the quantization plan (all attention projections and both FFN
matrices) are quantized symmetrically per output channel: int8 in
[-127, 127], scale_c = max|w[:, c]| / 127, zero point 0. Everything else
(embeddings, biases, norm affines, span head) stays float32.

Activations are quantized asymmetrically per tensor: uint8 in [0, 255],
S = (max - min) / 255, Z = clamp(round(-min / S), 0, 255), where min/max
come from a calibration sweep over float32 forward passes. The observed
range is always widened to include 0 so that real zero is representable,
and q(0) == Z holds exactly.

`quantized_linear` accumulates in int32 (via the kernels backend) and
rescales once at the end, so the whole matmul runs without float produc.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .costmodel import default_quant_plan
from .errors import ConfigError, ContractError, StageOrderError
from .kernels import int8_acc_matmul, np_gelu, np_layer_norm, np_softmax_lastdim
from .model import (
    LAYER_NORM_EPS,
    ForwardTrace,
    LengthConfig,
    ModelConfig,
    ModelParams,
    SpanPrediction,
    forward_full,
    predict_span,
    select_retained,
    significance_scores,
)
from .training import span_f1

# int32 accumulator headroom: |(xq - Z) * wq| <= 255 * 127 < 2^15, so any
# inner dimension up to 2^15 cannot overflow 2^31.
MAX_ACC_K = 1 << 15

ACT_POINTS = ("attn_in", "attn_proj_in", "ffn_in", "ffn_mid")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, halves away from zero (np.round would go to even)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor activation quantization: uint8, r = scale * (q - zero_point)."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ConfigError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise ConfigError(f"zero_point must be in [0, 255], got {self.zero_point}")


def compute_qparams(lo: float, hi: float) -> QuantParams:
    """Asymmetric uint8 parameters covering [lo, hi] (widened to include 0)."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ConfigError(f"calibration range must be finite, got [{lo}, {hi}]")
    if lo > hi:
        raise ConfigError(f"calibration range inverted: [{lo}, {hi}]")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo == 0.0:
        lo, hi = lo - 1e-8, hi + 1e-8
    scale = (hi - lo) / 255.0
    zero_point = int(np.clip(_round_half_away(np.asarray(-lo / scale)), 0, 255))
    return QuantParams(scale, zero_point)


def quantize_tensor(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """float -> uint8 with saturation."""
    q = _round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return ((np.asarray(q, dtype=np.float32) - np.float32(qp.zero_point))
            * np.float32(qp.scale))


@dataclass(frozen=True)
class QuantizedTensor:
    """Per-output-channel symmetric int8 weight: r[:, c] = scales[c] * q[:, c]."""

    q: np.ndarray  # int8, same shape as the source weight
    scales: np.ndarray  # float32, one per output channel (last axis)

    def __post_init__(self):
        if self.q.dtype != np.int8:
            raise ContractError(f"quantized weight must be int8, got {self.q.dtype}")
        if self.scales.shape != (self.q.shape[-1],):
            raise ContractError(
                f"need one scale per output channel: {self.scales.shape} vs {self.q.shape}"
            )

    def dequantize(self) -> np.ndarray:
        return self.q.astype(np.float32) * self.scales.astype(np.float32)


def quantize_weight(w: np.ndarray) -> QuantizedTensor:
    """Symmetric per-channel int8 in [-127, 127]; all-zero columns get scale 1."""
    if w.ndim != 2:
        raise ContractError(f"weight quantization expects a matrix, got shape {w.shape}")
    absmax = np.abs(w).max(axis=0)
    scales = np.where(absmax > 0, absmax / 127.0, 1.0).astype(np.float32)
    q = np.clip(_round_half_away(w / scales), -127, 127).astype(np.int8)
    return QuantizedTensor(q, scales)


class CalibrationStats:
    """Running per-point activation ranges; feed `observer` to a forward pass."""

    def __init__(self):
        self.ranges: dict[str, tuple[float, float]] = {}
        self.updates = 0

    def observer(self, name: str, arr: np.ndarray) -> None:
        lo, hi = float(arr.min()), float(arr.max())
        if name in self.ranges:
            old_lo, old_hi = self.ranges[name]
            lo, hi = min(lo, old_lo), max(hi, old_hi)
        self.ranges[name] = (lo, hi)
        self.updates += 1

    def qparams(self, name: str) -> QuantParams:
        if name not in self.ranges:
            raise ConfigError(f"no calibration range recorded for {name!r}")
        return compute_qparams(*self.ranges[name])


def collect_stats(params: ModelParams, dataset, max_span_len: int = 16,
                  max_records: int | None = None) -> CalibrationStats:
    """Observe activation ranges over full-length float32 passes."""
    stats = CalibrationStats()
    records = dataset if max_records is None else dataset[:max_records]
    if len(records) == 0:
        raise ConfigError("calibration needs at least one record")
    with ad.no_grad():
        for record in records:
            forward_full(params, record.tokens, max_span_len, observer=stats.observer)
    return stats


class QuantizedModel:
    """Frozen inference model: int8 plan weights + float32 everything else."""

    def __init__(self, config: ModelConfig, fp32: dict[str, np.ndarray],
                 weights: dict[str, QuantizedTensor],
                 act_qparams: dict[str, QuantParams], stage: str = "quantized"):
        self.config = config
        self.fp32 = fp32
        self.weights = weights
        self.act_qparams = act_qparams
        self.stage = stage

    def num_bytes(self) -> int:
        total = sum(4 * a.size for a in self.fp32.values())
        for qt in self.weights.values():
            total += qt.q.size + 4 * qt.scales.size
        return total


def quantize_model(params: ModelParams, stats: CalibrationStats) -> QuantizedModel:
    """Apply the plan to a trained model. Requires the length-adaptive stage."""
    if params.stage != "length_adaptive":
        raise StageOrderError(
            f"quantization expects a length-adaptive model, got stage {params.stage!r}"
        )
    plan = default_quant_plan(params.config)
    fp32: dict[str, np.ndarray] = {}
    weights: dict[str, QuantizedTensor] = {}
    for name, t in params.tensors.items():
        if name in plan:
            weights[name] = quantize_weight(t.data.astype(np.float32))
        else:
            fp32[name] = t.data.astype(np.float32).copy()
    act_qparams: dict[str, QuantParams] = {}
    for i in range(params.config.num_layers):
        for point in ACT_POINTS:
            key = f"layers.{i}.{point}"
            act_qparams[key] = stats.qparams(key)
    return QuantizedModel(params.config, fp32, weights, act_qparams)


def quantized_linear(x: np.ndarray, qp: QuantParams, qt: QuantizedTensor,
                     bias: np.ndarray) -> np.ndarray:
    """x @ dequant(qt) + bias computed with int32 accumulation."""
    m, k = x.shape
    if k > MAX_ACC_K:
        raise ContractError(f"inner dim {k} exceeds int32 accumulator bound {MAX_ACC_K}")
    if k != qt.q.shape[0]:
        raise ContractError(f"shape mismatch: x {x.shape} vs weight {qt.q.shape}")
    xq = quantize_tensor(x, qp)
    acc = int8_acc_matmul(xq, qp.zero_point, qt.q)
    ad.add_macs(m * k * qt.q.shape[1])
    out = np.float32(qp.scale) * qt.scales * acc.astype(np.float32)
    return out + bias.astype(np.float32)


# ---------------------------------------------------------------------------
# integer inference path (mirrors the float32 adaptive forward)
# ---------------------------------------------------------------------------


def _q_embed(qm: QuantizedModel, tokens: np.ndarray) -> np.ndarray:
    cfg = qm.config
    n = len(tokens)
    if n < 1:
        raise ConfigError("empty token sequence")
    if n > cfg.max_positions:
        raise ConfigError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    x = qm.fp32["embed.token"][tokens] + qm.fp32["embed.pos"][:n]
    return np_layer_norm(x, qm.fp32["embed.norm.gain"], qm.fp32["embed.norm.bias"],
                         LAYER_NORM_EPS)


def _q_attention(qm: QuantizedModel, layer: int, x: np.ndarray):
    cfg = qm.config
    p = f"layers.{layer}"
    m = x.shape[0]
    qp_in = qm.act_qparams[f"{p}.attn_in"]
    q = quantized_linear(x, qp_in, qm.weights[f"{p}.attn.wq"], qm.fp32[f"{p}.attn.bq"])
    k = quantized_linear(x, qp_in, qm.weights[f"{p}.attn.wk"], qm.fp32[f"{p}.attn.bk"])
    v = quantized_linear(x, qp_in, qm.weights[f"{p}.attn.wv"], qm.fp32[f"{p}.attn.bv"])
    qh = q.reshape(m, cfg.num_heads, cfg.head_dim).transpose(1, 0, 2)
    kh = k.reshape(m, cfg.num_heads, cfg.head_dim).transpose(1, 0, 2)
    vh = v.reshape(m, cfg.num_heads, cfg.head_dim).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.float32(np.sqrt(cfg.head_dim))
    ad.add_macs(m * m * cfg.hidden_size)
    probs = np_softmax_lastdim(scores)
    context = probs @ vh
    ad.add_macs(m * m * cfg.hidden_size)
    merged = context.transpose(1, 0, 2).reshape(m, cfg.hidden_size)
    out = quantized_linear(merged, qm.act_qparams[f"{p}.attn_proj_in"],
                           qm.weights[f"{p}.attn.wo"], qm.fp32[f"{p}.attn.bo"])
    hidden = np_layer_norm(x + out, qm.fp32[f"{p}.attn.norm.gain"],
                           qm.fp32[f"{p}.attn.norm.bias"], LAYER_NORM_EPS)
    return hidden, probs


def _q_ffn(qm: QuantizedModel, layer: int, x: np.ndarray) -> np.ndarray:
    p = f"layers.{layer}"
    mid = np_gelu(quantized_linear(x, qm.act_qparams[f"{p}.ffn_in"],
                                   qm.weights[f"{p}.ffn.w1"], qm.fp32[f"{p}.ffn.b1"]))
    out = quantized_linear(mid, qm.act_qparams[f"{p}.ffn_mid"],
                           qm.weights[f"{p}.ffn.w2"], qm.fp32[f"{p}.ffn.b2"])
    return np_layer_norm(x + out, qm.fp32[f"{p}.ffn.norm.gain"],
                         qm.fp32[f"{p}.ffn.norm.bias"], LAYER_NORM_EPS)


def forward_quantized_adaptive(
    qm: QuantizedModel,
    tokens,
    lc: LengthConfig,
    max_span_len: int = 16,
    n_valid: int | None = None,
) -> tuple[ForwardTrace, SpanPrediction, tuple[np.ndarray, np.ndarray]]:
    """Drop-and-restore inference on the int8 model.

    Same control flow and MAC accounting as the float32 adaptive pass:
    significance ranking with position 0 forced, frozen vectors restored
    before the span head.
    """
    cfg = qm.config
    if len(lc) != cfg.num_layers:
        raise ConfigError(f"length config covers {len(lc)} layers, model has {cfg.num_layers}")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    x = _q_embed(qm, tokens)
    active = np.arange(n)
    frozen: list[tuple[np.ndarray, np.ndarray]] = []
    active_sets = [active.copy()]
    significance: list[np.ndarray | None] = []
    mac_start = ad.mac_count()
    for i, l_target in enumerate(lc.retain):
        m = len(active)
        hidden, probs = _q_attention(qm, i, x)
        scores = significance_scores(probs)
        if n_valid is not None:
            scores = np.where(active < n_valid, scores, -np.inf)
        l_eff = max(1, min(l_target, m))
        if l_eff < m:
            kept, dropped = select_retained(scores, l_eff)
            frozen.append((active[dropped], hidden[dropped]))
            x = hidden[kept]
            active = active[kept]
        else:
            x = hidden
        x = _q_ffn(qm, i, x)
        significance.append(scores)
        active_sets.append(active.copy())
    encoder_macs = ad.mac_count() - mac_start
    restored = np.empty((n, cfg.hidden_size), dtype=np.float32)
    for positions, block in frozen + [(active, x)]:
        restored[positions] = block
    logits = restored @ qm.fp32["head.w"] + qm.fp32["head.b"]
    ad.add_macs(n * cfg.hidden_size * 2)
    start, end = logits[:, 0], logits[:, 1]
    trace = ForwardTrace(active_sets, significance, restored.copy(), encoder_macs)
    pred = SpanPrediction(start.copy(), end.copy(), predict_span(start, end, max_span_len))
    return trace, pred, (start, end)


def evaluate_quantized(qm: QuantizedModel, dataset, lc: LengthConfig | None = None,
                       max_span_len: int = 16) -> dict[str, float]:
    """{exact_match, token_f1} for the int8 model, full-length or adaptive."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if lc is None:
        lc = LengthConfig.full(qm.config.num_layers, len(dataset[0].tokens))
    em = 0.0
    f1 = 0.0
    for record in dataset:
        _, pred, _ = forward_quantized_adaptive(qm, record.tokens, lc, max_span_len)
        gold = (record.answer_start, record.answer_end)
        em += float(pred.span == gold)
        f1 += span_f1(pred.span, gold)
    n = len(dataset)
    return {"exact_match": em / n, "token_f1": f1 / n}
