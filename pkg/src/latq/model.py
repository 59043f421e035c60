"""Encoder-only transformer with a span head and a drop-and-restore forward.

The adaptive forward runs each attention block on the tokens still active,
ranks them by how much attention they received, keeps the top `l_i`, and
freezes the vectors of dropped tokens. Before the span head every frozen
vector is restored at its original position, so per-token heads always see
the full sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .rng import make_rng

Observer = Callable[[str, np.ndarray], None]

INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    ffn_size: int
    vocab_size: int
    max_positions: int

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "num_heads", "ffn_size", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass(frozen=True)
class LengthConfig:
    """Per-layer retained token counts (l_1, ..., l_L), monotone non-increasing."""

    retain: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "retain", tuple(int(v) for v in self.retain))
        if len(self.retain) == 0:
            raise ConfigError("length config must cover at least one layer")
        if any(v < 1 for v in self.retain):
            raise ConfigError(f"length config values must be >= 1, got {self.retain}")
        if any(a < b for a, b in zip(self.retain, self.retain[1:])):
            raise ConfigError(f"length config must be monotone non-increasing, got {self.retain}")

    @classmethod
    def full(cls, num_layers: int, n: int) -> "LengthConfig":
        return cls((n,) * num_layers)

    def schedule(self, n: int) -> list[tuple[int, int]]:
        """(incoming m_i, effective l_i) per layer, clamping l_i when n is short."""
        out = []
        m = n
        for l in self.retain:
            l_eff = max(1, min(l, m))
            out.append((m, l_eff))
            m = l_eff
        return out

    def __len__(self) -> int:
        return len(self.retain)

    def __str__(self) -> str:
        return "-".join(str(v) for v in self.retain)


@dataclass
class SpanPrediction:
    start_logits: np.ndarray
    end_logits: np.ndarray
    span: tuple[int, int]


@dataclass
class ForwardTrace:
    """Bookkeeping from one adaptive forward pass."""

    active_sets: list[np.ndarray]  # incoming positions per layer + final set
    significance: list[np.ndarray | None]  # per layer, None when skipped
    restored_hidden: np.ndarray  # (n, d)
    mac_count: int = 0


class ModelParams:
    """Named weight tensors plus the training-stage marker."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], stage: str = "init"):
        self.config = config
        self.tensors = tensors
        self.stage = stage

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        cloned = {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.tensors.items()}
        return ModelParams(self.config, cloned, self.stage)

    def copy(self) -> "ModelParams":
        return self.astype(next(iter(self.tensors.values())).dtype)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The exact name -> shape map determined by a config."""
    d, dff = config.hidden_size, config.ffn_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, d),
        "embed.pos": (config.max_positions, d),
        "embed.norm.gain": (d,),
        "embed.norm.bias": (d,),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.bq"] = (d,)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.bk"] = (d,)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.bv"] = (d,)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.attn.bo"] = (d,)
        shapes[f"{p}.attn.norm.gain"] = (d,)
        shapes[f"{p}.attn.norm.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, dff)
        shapes[f"{p}.ffn.b1"] = (dff,)
        shapes[f"{p}.ffn.w2"] = (dff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ffn.norm.gain"] = (d,)
        shapes[f"{p}.ffn.norm.bias"] = (d,)
    shapes["head.w"] = (d, 2)
    shapes["head.b"] = (2,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator | int, dtype=np.float32) -> ModelParams:
    """Weights ~ Normal(0, 0.02^2), biases 0, norm gains 1."""
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", "head.b")):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors, stage="init")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _split_heads(t: Tensor, num_heads: int, head_dim: int) -> Tensor:
    m = t.shape[0]
    return ad.transpose(ad.reshape(t, (m, num_heads, head_dim)), (1, 0, 2))


def attention_qkv(params: ModelParams, layer: int, x: Tensor, observer: Observer | None = None):
    """Projected q, k, v ([m, d] each) for one layer."""
    p = f"layers.{layer}"
    if observer is not None:
        observer(f"{p}.attn_in", x.data)
    q = _linear(x, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
    k = _linear(x, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
    v = _linear(x, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
    return q, k, v


def attention_block(params: ModelParams, layer: int, x: Tensor, observer: Observer | None = None):
    """Self-attention + residual + norm. Returns (hidden [m,d], probs [h,m,m])."""
    cfg = params.config
    p = f"layers.{layer}"
    m = x.shape[0]
    q, k, v = attention_qkv(params, layer, x, observer)
    qh = _split_heads(q, cfg.num_heads, cfg.head_dim)
    kh = _split_heads(k, cfg.num_heads, cfg.head_dim)
    vh = _split_heads(v, cfg.num_heads, cfg.head_dim)
    scores = ad.scale(ad.bmm(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(cfg.head_dim))
    probs = ad.softmax_lastdim(scores)
    context = ad.bmm(probs, vh)  # [h, m, hd]
    merged = ad.reshape(ad.transpose(context, (1, 0, 2)), (m, cfg.hidden_size))
    if observer is not None:
        observer(f"{p}.attn_proj_in", merged.data)
    out = _linear(merged, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
    hidden = ad.layer_norm(
        ad.add(x, out), params[f"{p}.attn.norm.gain"], params[f"{p}.attn.norm.bias"], LAYER_NORM_EPS
    )
    return hidden, probs


def ffn_block(params: ModelParams, layer: int, x: Tensor, observer: Observer | None = None) -> Tensor:
    p = f"layers.{layer}"
    if observer is not None:
        observer(f"{p}.ffn_in", x.data)
    mid = ad.gelu(_linear(x, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]))
    if observer is not None:
        observer(f"{p}.ffn_mid", mid.data)
    out = _linear(mid, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"])
    return ad.layer_norm(
        ad.add(x, out), params[f"{p}.ffn.norm.gain"], params[f"{p}.ffn.norm.bias"], LAYER_NORM_EPS
    )


def embed(params: ModelParams, tokens: np.ndarray) -> Tensor:
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n < 1:
        raise ConfigError("empty token sequence")
    if n > cfg.max_positions:
        raise ConfigError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    x = ad.add(
        ad.gather_rows(params["embed.token"], tokens),
        ad.gather_rows(params["embed.pos"], np.arange(n)),
    )
    return ad.layer_norm(x, params["embed.norm.gain"], params["embed.norm.bias"], LAYER_NORM_EPS)


def qkv_at_layer(params: ModelParams, tokens, layer: int) -> tuple[Tensor, Tensor, Tensor]:
    """Run the stack up to `layer` and return that layer's projected q, k, v."""
    cfg = params.config
    if not 0 <= layer < cfg.num_layers:
        raise ConfigError(f"layer {layer} out of range for {cfg.num_layers}-layer model")
    x = embed(params, tokens)
    for i in range(layer):
        x, _ = attention_block(params, i, x)
        x = ffn_block(params, i, x)
    return attention_qkv(params, layer, x)


def span_head(params: ModelParams, hidden: Tensor) -> tuple[Tensor, Tensor]:
    logits = _linear(hidden, params["head.w"], params["head.b"])
    return ad.take_column(logits, 0), ad.take_column(logits, 1)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def forward_full(
    params: ModelParams,
    tokens,
    max_span_len: int = 16,
    observer: Observer | None = None,
) -> tuple[Tensor, SpanPrediction, tuple[Tensor, Tensor]]:
    """Standard full-length pass. Returns (hidden [n,d], prediction, (start, end) logit tensors)."""
    x = embed(params, tokens)
    for i in range(params.config.num_layers):
        x, _ = attention_block(params, i, x, observer)
        x = ffn_block(params, i, x, observer)
    start, end = span_head(params, x)
    pred = SpanPrediction(start.data.copy(), end.data.copy(), predict_span(start.data, end.data, max_span_len))
    return x, pred, (start, end)


def significance_scores(attention_probs: np.ndarray) -> np.ndarray:
    """Mean attention received per token: s_j = mean over heads and queries of A[h, q, j]."""
    probs = np.asarray(attention_probs)
    return probs.mean(axis=(0, 1))


def select_retained(scores: np.ndarray, keep: int) -> tuple[np.ndarray, np.ndarray]:
    """Local indices (ascending) of kept and dropped rows; row 0 is always kept.

    Ranking is by score descending, position ascending on ties.
    """
    m = len(scores)
    order = np.argsort(-scores, kind="stable")
    ranked = [0] + [int(j) for j in order if j != 0]
    kept = np.array(sorted(ranked[:keep]), dtype=np.int64)
    dropped = np.array(sorted(ranked[keep:]), dtype=np.int64)
    return kept, dropped


def forward_adaptive(
    params: ModelParams,
    tokens,
    lc: LengthConfig,
    max_span_len: int = 16,
    drop_policy: str = "significance",
    rng: np.random.Generator | None = None,
    layer_skip: list[bool] | None = None,
    n_valid: int | None = None,
    observer: Observer | None = None,
) -> tuple[ForwardTrace, SpanPrediction, tuple[Tensor, Tensor]]:
    """Drop-and-restore pass under a length configuration.

    Each layer attends over its incoming active tokens, keeps the top l_i by
    significance (position 0 forced, padding beyond n_valid dropped first),
    and freezes the post-attention vectors of the rest. After the last layer
    all frozen vectors are restored at their original positions and the span
    head sees the full sequence. `layer_skip` marks layers to bypass entirely
    (training-time LayerDrop); skipped layers keep their active set.
    """
    cfg = params.config
    if len(lc) != cfg.num_layers:
        raise ConfigError(f"length config covers {len(lc)} layers, model has {cfg.num_layers}")
    if drop_policy not in ("significance", "random"):
        raise ConfigError(f"unknown drop_policy {drop_policy!r}")
    if drop_policy == "random" and rng is None:
        raise ConfigError("drop_policy='random' needs an rng")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    x = embed(params, tokens)
    active = np.arange(n)
    frozen: list[tuple[np.ndarray, Tensor]] = []
    active_sets = [active.copy()]
    significance: list[np.ndarray | None] = []
    mac_start = ad.mac_count()
    for i, l_target in enumerate(lc.retain):
        if layer_skip is not None and layer_skip[i]:
            significance.append(None)
            active_sets.append(active.copy())
            continue
        m = len(active)
        hidden, probs = attention_block(params, i, x, observer)
        if drop_policy == "random":
            scores = rng.random(m)
        else:
            scores = significance_scores(probs.data)
        if n_valid is not None:
            scores = np.where(active < n_valid, scores, -np.inf)
        l_eff = max(1, min(l_target, m))
        if l_eff < m:
            kept, dropped = select_retained(scores, l_eff)
            frozen.append((active[dropped], ad.gather_rows(hidden, dropped)))
            x = ad.gather_rows(hidden, kept)
            active = active[kept]
        else:
            x = hidden
        x = ffn_block(params, i, x, observer)
        significance.append(scores)
        active_sets.append(active.copy())
    encoder_macs = ad.mac_count() - mac_start
    restored = ad.scatter_rows(n, frozen + [(active, x)])
    start, end = span_head(params, restored)
    trace = ForwardTrace(active_sets, significance, restored.data.copy(), encoder_macs)
    pred = SpanPrediction(start.data.copy(), end.data.copy(), predict_span(start.data, end.data, max_span_len))
    return trace, pred, (start, end)


def predict_span(start_logits: np.ndarray, end_logits: np.ndarray, max_span_len: int) -> tuple[int, int]:
    """Best (start, end) with start <= end <= start + max_span_len.

    Ties break toward the smallest start, then the smallest end.
    """
    start_logits = np.asarray(start_logits)
    end_logits = np.asarray(end_logits)
    if start_logits.shape != end_logits.shape:
        raise ConfigError(f"logit lengths differ: {start_logits.shape} vs {end_logits.shape}")
    n = len(start_logits)
    best = (-np.inf, 0, 0)
    for s in range(n):
        hi = min(n - 1, s + max_span_len)
        for e in range(s, hi + 1):
            total = start_logits[s] + end_logits[e]
            if total > best[0]:
                best = (total, s, e)
    return best[1], best[2]
