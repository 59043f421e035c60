import math

import numpy as np
import pytest

from latq.costmodel import (
    arch_shapes,
    cost_report,
    default_quant_plan,
    flops_count,
    flops_ratio,
    param_count,
    preset,
    size_estimate,
)
from latq.errors import ConfigError
from latq.model import LengthConfig, ModelConfig
from latq.rng import make_rng


def rel_err(got, want):
    return abs(got - want) / want


def toy_config(L=1, d=2, dff=4):
    return ModelConfig(num_layers=L, hidden_size=d, num_heads=1, ffn_size=dff,
                       vocab_size=16, max_positions=64)


class TestFlopsCount:
    def test_hand_arithmetic_single_layer(self):
        # 4*3*4 + 2*9*2 + 2*3*2*4 = 48 + 36 + 48
        assert flops_count(toy_config(), 3, LengthConfig((3,))) == 132

    def test_published_full_length_12x768(self):
        cfg, _ = preset("bert-base")
        assert rel_err(flops_count(cfg, 384), 3.53e10) < 0.005

    def test_published_full_length_6x768(self):
        cfg, _ = preset("tinybert")
        assert rel_err(flops_count(cfg, 384), 1.77e10) < 0.005

    def test_published_full_length_6x384(self):
        cfg, _ = preset("minilm")
        assert rel_err(flops_count(cfg, 384), 4.76e9) < 0.005

    def test_published_adaptive_configs(self):
        cfg, _ = preset("minilm")
        lc_a = LengthConfig((269, 253, 252, 202, 104, 34))
        lc_b = LengthConfig((315, 251, 242, 159, 142, 33))
        assert rel_err(flops_count(cfg, 384, lc_a), 2.49e9) < 0.005
        assert rel_err(flops_count(cfg, 384, lc_b), 2.547e9) < 0.005

    def test_ratio_reaches_fourteen(self):
        bert, _ = preset("bert-base")
        mini, _ = preset("minilm")
        lc = LengthConfig((269, 253, 252, 202, 104, 34))
        assert flops_ratio(flops_count(bert, 384), flops_count(mini, 384, lc)) >= 14.0

    def test_full_length_matches_textbook_form(self):
        cfg = toy_config(L=3, d=8, dff=16)
        n = 10
        per_layer = 4 * n * 8 * 8 + 2 * n * n * 8 + 2 * n * 8 * 16
        assert flops_count(cfg, n) == 3 * per_layer

    def test_monotone_in_lc(self):
        cfg = toy_config(L=4, d=8, dff=16)
        rng = make_rng(3)
        for _ in range(200):
            raw = np.sort(rng.integers(1, 13, size=4))[::-1]
            lc_b = LengthConfig(tuple(int(v) for v in raw))
            shrink = np.maximum(1, raw - rng.integers(0, 3, size=4))
            lc_a = LengthConfig(tuple(int(v) for v in np.minimum.accumulate(shrink)))
            assert flops_count(cfg, 12, lc_a) <= flops_count(cfg, 12, lc_b)

    def test_clamps_when_input_shorter_than_lc(self):
        cfg = toy_config(L=2, d=2, dff=4)
        # n=3 < l=5: behaves as full length
        assert flops_count(cfg, 3, LengthConfig((5, 5))) == flops_count(cfg, 3)

    def test_layer_count_mismatch(self):
        with pytest.raises(ConfigError):
            flops_count(toy_config(L=2), 4, LengthConfig((4,)))

    def test_invalid_lc_rejected(self):
        with pytest.raises(ConfigError):
            LengthConfig((2, 4))
        with pytest.raises(ConfigError):
            LengthConfig((4, 0))


class TestParamCount:
    def test_bert_base_like(self):
        cfg, type_rows = preset("bert-base")
        assert rel_err(param_count(cfg, type_rows), 108.9e6) < 0.005

    def test_minilm_like(self):
        cfg, type_rows = preset("minilm")
        assert rel_err(param_count(cfg, type_rows), 30.16e6) < 0.005

    def test_one_layer_hand_sum(self):
        cfg = toy_config(L=1, d=2, dff=4)
        # embeddings (16+64)*2 + norm 4; layer: 4*(4+2) + norm 4 + (2*4+4) + (4*2+2) + norm 4
        expect = (16 + 64) * 2 + 4 + (4 * (4 + 2) + 4 + 12 + 10 + 4) + (2 * 2 + 2)
        assert param_count(cfg) == expect


class TestSizeEstimate:
    def test_published_fp32_sizes(self):
        for name, want in (("bert-base", 415.4723), ("tinybert", 253.2077), ("minilm", 115.0473)):
            cfg, type_rows = preset(name)
            mib = size_estimate(arch_shapes(cfg, type_rows)) / 1024**2
            assert rel_err(mib, want) < 0.01, name

    def test_published_quantized_size(self):
        cfg, type_rows = preset("minilm")
        shapes = arch_shapes(cfg, type_rows)
        mib = size_estimate(shapes, default_quant_plan(cfg)) / 1024**2
        assert rel_err(mib, 84.8596) < 0.01

    def test_quantized_strictly_smaller(self):
        cfg, type_rows = preset("minilm")
        report = cost_report(cfg, 384, type_vocab=type_rows)
        assert report.bytes_quantized < report.bytes_fp32

    def test_plan_with_unknown_name_rejected(self):
        cfg = toy_config()
        with pytest.raises(ConfigError):
            size_estimate(arch_shapes(cfg), frozenset({"layers.9.attn.wq"}))

    def test_byte_arithmetic_exact(self):
        shapes = {"a": (3, 5), "b": (4,)}
        assert size_estimate(shapes) == 4 * (15 + 4)
        assert size_estimate(shapes, frozenset({"a"})) == 15 + 5 * 4 + 4 * 4


class TestQuantPlan:
    def test_plan_covers_projections_and_ffn_only(self):
        cfg = toy_config(L=2)
        plan = default_quant_plan(cfg)
        assert len(plan) == 12
        assert "layers.0.attn.wq" in plan and "layers.1.ffn.w2" in plan
        assert not any("embed" in n or "norm" in n or "head" in n or n.endswith(("bq", "b1")) for n in plan)

    def test_report_fields_consistent(self):
        cfg = toy_config(L=2, d=4, dff=8)
        report = cost_report(cfg, 6)
        assert report.macs == flops_count(cfg, 6)
        assert report.params == param_count(cfg)
        assert math.isclose(report.mib_fp32, report.bytes_fp32 / 1024**2)
