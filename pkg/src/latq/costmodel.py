"""Closed-form MAC, parameter-count, and serialized-size models.

"FLOPs" here are multiply-accumulate counts (no factor 2); the published
encoder cost figures this module reproduces only match under that unit, and
only when attention blocks are charged for incoming tokens while FFN blocks
are charged for retained tokens. "Mb" figures are mebibytes (1024^2 bytes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError
from .model import LengthConfig, ModelConfig, parameter_shapes

BYTES_PER_F32 = 4
BYTES_PER_I8 = 1


@dataclass(frozen=True)
class CostReport:
    macs: int
    params: int
    bytes_fp32: int
    bytes_quantized: int

    @property
    def mib_fp32(self) -> float:
        return self.bytes_fp32 / 1024**2

    @property
    def mib_quantized(self) -> float:
        return self.bytes_quantized / 1024**2


def flops_count(config: ModelConfig, n: int, lc: LengthConfig | None = None) -> int:
    """MACs of one forward pass under a length configuration.

    Per layer with m_i incoming and l_i retained tokens:
    4*m_i*d^2 (QKV + output projections) + 2*m_i^2*d (score and context
    products) + 2*l_i*d*d_ff (FFN pair). Embeddings, norms, softmax, biases,
    and the span head are excluded.
    """
    if n < 1:
        raise ConfigError("input length must be >= 1")
    if lc is None:
        lc = LengthConfig.full(config.num_layers, n)
    if len(lc) != config.num_layers:
        raise ConfigError(f"length config covers {len(lc)} layers, model has {config.num_layers}")
    d, dff = config.hidden_size, config.ffn_size
    total = 0
    for m, l in lc.schedule(n):
        total += 4 * m * d * d + 2 * m * m * d + 2 * l * d * dff
    return total


def flops_ratio(reference_macs: int, macs: int) -> float:
    return reference_macs / macs


def arch_shapes(config: ModelConfig, type_vocab: int = 0) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, optionally with a token-type embedding table.

    The runtime model carries no type embeddings; the published size figures
    assume one, so the cost model can add `type_vocab` rows here.
    """
    shapes = dict(parameter_shapes(config))
    if type_vocab > 0:
        shapes["embed.type"] = (type_vocab, config.hidden_size)
    return shapes


def param_count(config: ModelConfig, type_vocab: int = 0) -> int:
    return sum(math.prod(s) for s in arch_shapes(config, type_vocab).values())


def default_quant_plan(config: ModelConfig) -> frozenset[str]:
    """Names of the weight matrices quantized to int8: all per-layer attention
    projections and FFN matrices. Embeddings, biases, norms, head stay fp32."""
    names = []
    for i in range(config.num_layers):
        for suffix in ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"):
            names.append(f"layers.{i}.{suffix}")
    return frozenset(names)


def size_estimate(shapes: dict[str, tuple[int, ...]], int8_names: frozenset[str] = frozenset()) -> int:
    """Serialized bytes: fp32 at 4 B/element; int8 tensors at 1 B/element
    plus one fp32 scale per output channel (last dimension)."""
    unknown = int8_names - shapes.keys()
    if unknown:
        raise ConfigError(f"quantization plan names unknown tensors: {sorted(unknown)}")
    total = 0
    for name, shape in shapes.items():
        elements = math.prod(shape)
        if name in int8_names:
            total += elements * BYTES_PER_I8 + shape[-1] * BYTES_PER_F32
        else:
            total += elements * BYTES_PER_F32
    return total


def cost_report(
    config: ModelConfig,
    n: int,
    lc: LengthConfig | None = None,
    type_vocab: int = 0,
    quant_plan: frozenset[str] | None = None,
) -> CostReport:
    shapes = arch_shapes(config, type_vocab)
    if quant_plan is None:
        quant_plan = default_quant_plan(config)
    return CostReport(
        macs=flops_count(config, n, lc),
        params=sum(math.prod(s) for s in shapes.values()),
        bytes_fp32=size_estimate(shapes),
        bytes_quantized=size_estimate(shapes, quant_plan),
    )


# Published-architecture presets used by the size/FLOPs reproductions:
# (config, token-type rows). The 6x384 model keeps a 1-row type table
# because it is distilled from a RoBERTa-family teacher.
PRESETS: dict[str, tuple[ModelConfig, int]] = {
    "bert-base": (
        ModelConfig(num_layers=12, hidden_size=768, num_heads=12, ffn_size=3072,
                    vocab_size=30522, max_positions=512),
        2,
    ),
    "tinybert": (
        ModelConfig(num_layers=6, hidden_size=768, num_heads=12, ffn_size=3072,
                    vocab_size=30522, max_positions=512),
        2,
    ),
    "minilm": (
        ModelConfig(num_layers=6, hidden_size=384, num_heads=12, ffn_size=1536,
                    vocab_size=50265, max_positions=514),
        1,
    ),
}


def preset(name: str) -> tuple[ModelConfig, int]:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
