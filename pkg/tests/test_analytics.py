import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvit.analytics import (CostReport, CostRow, apf, compare_modules, compare_to_backbone,
                            cost_report, count_flops, count_params, emit_report, parse_csv)
from cvit.ccffn import CCFFN, FFN
from cvit.cli import reference_rows
from cvit.errors import ConfigError, DomainError
from cvit.model import backbone_of, build, preset, tiny_config
from cvit.nn import BatchNorm, Conv2d, Linear, Module


class _Wrap(Module):
    def __init__(self, layer):
        super().__init__()
        self.layer = layer

    def forward(self, x):
        return self.layer(x)


class TestCounters:
    def test_pointwise_conv_params(self):
        assert count_params(Conv2d(4, 8, 1)).total_params == 32

    def test_bn_params_and_buffers(self):
        rep = count_params(BatchNorm(8))
        assert rep.total_params == 16 and rep.buffers == 16

    def test_conv_flops(self):
        rep = count_flops(Conv2d(4, 8, 3, 1, 1), 10, in_channels=4)
        assert rep.total_flops == 28_800

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]), st.integers(1, 2),
           st.integers(3, 9), st.booleans())
    def test_conv_closed_form(self, cin, cout, k, stride, size, depthwise):
        if depthwise:
            cout, groups = cin, cin
        else:
            groups = 1
        conv = Conv2d(cin, cout, k, stride, k // 2, groups=groups)
        ho = (size + 2 * (k // 2) - k) // stride + 1
        assert count_flops(conv, size, in_channels=cin).total_flops == ho * ho * cout * (cin // groups) * k * k
        assert count_params(conv).total_params == cout * (cin // groups) * k * k

    def test_linear_flops(self):
        from cvit import tensor as T
        from cvit.analytics import _MacTracer
        from cvit.nn.module import set_tracer
        lin = Linear(16, 10)
        tr = _MacTracer()
        prev = set_tracer(tr)
        try:
            lin(T.zeros((1, 16)))
        finally:
            set_tracer(prev)
        assert sum(tr.macs.values()) == 160

    def test_totals_equal_row_sums(self):
        rep = cost_report(build(tiny_config()), 64)
        assert rep.total_flops == sum(r.flops for r in rep.rows)
        assert rep.total_params == sum(r.params for r in rep.rows)
        assert all(r.flops > 0 for r in rep.rows if r.kind in ("conv", "linear"))

    def test_unique_vs_structural(self):
        rep = cost_report(build(preset("S", weight_sharing=True)), 64)
        assert rep.total_unique_params < rep.total_params

    def test_xl_flops(self):
        assert abs(cost_report(build(preset("XL")), 224).mflops / 435 - 1) <= 0.12

    def test_m_params(self):
        assert abs(count_params(build(preset("M"))).mparams / 3.5 - 1) <= 0.12

    def test_2mac_doubles(self):
        m = build(tiny_config())
        assert count_flops(m, 64, "2mac").total_flops == 2 * count_flops(m, 64).total_flops


class TestAPF:
    def test_examples(self):
        assert apf(69.9, 173).rounded == 31.2
        assert apf(91.0, 4540).rounded == 24.9
        assert apf(50.0, 10).apf == 50.0

    def test_reference_table(self):
        rows = reference_rows()
        assert len(rows) == 16
        for r in rows:
            assert abs(apf(r["top1"], r["mflops"]).apf - r["printed"]) <= 0.05, r["model"]

    @pytest.mark.parametrize("mflops", [1, 0.5, 0, -3])
    def test_domain(self, mflops):
        with pytest.raises(DomainError):
            apf(70, mflops)

    @pytest.mark.parametrize("top1", [0, -1, 100.5])
    def test_accuracy_domain(self, top1):
        with pytest.raises(DomainError):
            apf(top1, 100)

    @settings(max_examples=50)
    @given(st.floats(1, 100), st.floats(1.01, 1e5), st.floats(1.01, 1e5))
    def test_decreasing_in_flops(self, acc, f1, f2):
        lo, hi = sorted((f1, f2))
        if hi > lo * (1 + 1e-9):
            assert apf(acc, lo).apf > apf(acc, hi).apf

    @settings(max_examples=50)
    @given(st.floats(1, 100), st.floats(1, 100), st.floats(1.01, 1e5))
    def test_increasing_in_accuracy(self, a1, a2, f):
        lo, hi = sorted((a1, a2))
        if hi > lo:
            assert apf(lo, f).apf < apf(hi, f).apf


class TestBackbone:
    def test_l_pair(self):
        r = compare_to_backbone(preset("L"), backbone_of(preset("L")), 224)
        assert 15 <= r.param_reduction <= 25
        assert 10 <= r.flop_reduction <= 20

    def test_identical_models(self):
        cfg = preset("M", chunks=1, expansion=2)
        r = compare_to_backbone(cfg, backbone_of(cfg), 64)
        assert r.param_reduction == 0 and r.flop_reduction == 0

    def test_mismatched_dims(self):
        with pytest.raises(ConfigError):
            compare_to_backbone(preset("L"), backbone_of(preset("M")))

    def test_micro_ffn(self):
        assert compare_modules(CCFFN(16, 2, 2), FFN(16, 2), 3).flop_reduction == 50.0


class TestReports:
    def test_empty_model_header_only(self):
        text = emit_report(CostReport(), "csv")
        assert text == "layer,kind,params,flops\n"

    def test_one_row(self):
        rep = count_params(_Wrap(Conv2d(4, 8, 1)))
        lines = emit_report(rep, "csv").strip().splitlines()
        assert lines == ["layer,kind,params,flops", "layer,conv,32,0"]

    def test_csv_round_trip(self):
        rep = cost_report(build(tiny_config()), 64)
        assert parse_csv(emit_report(rep, "csv")) == rep.rows

    def test_formats_agree(self):
        rep = cost_report(build(tiny_config()), 64)
        doc = json.loads(emit_report(rep, "json"))
        assert [CostRow(**r) for r in doc["rows"]] == rep.rows
        assert doc["totals"]["flops"] == rep.total_flops
        table = emit_report(rep, "table")
        assert f"{rep.total_flops:,}" in table and f"{rep.total_params:,}" in table
