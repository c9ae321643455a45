"""Parameter and FLOP accounting, the accuracy-per-FLOP metric, and report output.

FLOPs follow the multiply-accumulate convention: a conv costs
``H_out * W_out * C_out * (C_in / groups) * k^2``, a linear layer ``in * out``,
attention matmuls their MAC count, and batch norm, activations, elementwise
ops, pooling and softmax cost nothing. ``convention="2mac"`` doubles every
count for a strict multiply+add tally.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .nn.module import set_tracer

CONVENTIONS = {"mac": 1, "2mac": 2}


@dataclass
class CostRow:
    layer: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    input_size: int | None = None
    unique_params: int | None = None
    buffers: int = 0
    convention: str = "mac"

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_unique_params(self):
        return self.total_params if self.unique_params is None else self.unique_params

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def mflops(self):
        return self.total_flops / 1e6

    @property
    def mparams(self):
        return self.total_unique_params / 1e6

    def totals(self):
        return {
            "params": self.total_params,
            "unique_params": self.total_unique_params,
            "buffers": self.buffers,
            "flops": self.total_flops,
            "mflops": self.mflops,
        }

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "convention": self.convention,
            "rows": [asdict(r) for r in self.rows],
            "totals": self.totals(),
        }


def _kind(module):
    return getattr(module, "kind", type(module).__name__.lower())


def _direct_params(module):
    return sum(p.size for p in module._parameters.values() if p is not None)


class _MacTracer:
    def __init__(self):
        self.macs = {}

    def record(self, path, module, inputs, output):
        m = module.macs(inputs, output)
        if m:
            self.macs[path] = self.macs.get(path, 0) + m


def trace_macs(model, input_size, in_channels=None):
    """Run one eval-mode, batch-of-1 forward and collect MACs per module path."""
    if in_channels is None:
        in_channels = getattr(getattr(model, "config", None), "in_channels", 3)
    was_training = model.training
    model.eval()
    tracer = _MacTracer()
    prev = set_tracer(tracer)
    try:
        with T.no_grad():
            x = T.tensor(np.zeros((1, in_channels, input_size, input_size)))
            model(x)
    finally:
        set_tracer(prev)
        model.train(was_training)
    return tracer.macs


def _rows(model, macs, convention):
    scale = CONVENTIONS[convention]
    rows = []
    for path, m in model.named_modules(remove_duplicate=False):
        p = _direct_params(m)
        f = macs.get(path, 0)
        if p or f:
            rows.append(CostRow(path, _kind(m), int(p), int(f) * scale))
    return rows


def _buffers(model):
    return int(sum(m._buffers[name].size for _, m, name in model.named_buffers()))


def count_params(model):
    """Rows of learnable parameters per layer (structural: shared tensors counted per use).

    The report's ``unique_params`` counts each shared tensor once; running
    statistics are totalled separately in ``buffers``.
    """
    return CostReport(rows=_rows(model, {}, "mac"), unique_params=model.num_parameters(unique=True),
                      buffers=_buffers(model))


def count_flops(model, input_size, convention="mac", in_channels=None):
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {sorted(CONVENTIONS)}")
    macs = trace_macs(model, input_size, in_channels)
    return CostReport(rows=[r for r in _rows(model, macs, convention) if r.flops],
                      input_size=input_size, convention=convention)


def cost_report(model, input_size, convention="mac", in_channels=None):
    """Combined per-layer params and FLOPs."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {sorted(CONVENTIONS)}")
    macs = trace_macs(model, input_size, in_channels)
    return CostReport(rows=_rows(model, macs, convention), input_size=input_size,
                      unique_params=model.num_parameters(unique=True), buffers=_buffers(model),
                      convention=convention)


# -- accuracy per FLOP -----------------------------------------------------------

@dataclass(frozen=True)
class APFRecord:
    top1: float
    mflops: float
    apf: float

    @property
    def rounded(self):
        return round(self.apf, 1)

    def __str__(self):
        return f"top1={self.top1:.1f}% mflops={self.mflops:g} apf={self.apf:.1f}"


def apf(top1_percent, mflops):
    """Top-1 accuracy (percent) divided by log10 of MFLOPs."""
    top1_percent, mflops = float(top1_percent), float(mflops)
    if not mflops > 1:
        raise DomainError(f"APF needs MFLOPs > 1 (log10 must be positive), got {mflops}")
    if not 0 < top1_percent <= 100:
        raise DomainError(f"top-1 accuracy must be in (0, 100], got {top1_percent}")
    return APFRecord(top1_percent, mflops, top1_percent / math.log10(mflops))


# -- backbone comparison ---------------------------------------------------------

@dataclass(frozen=True)
class Reduction:
    params: int
    backbone_params: int
    flops: int
    backbone_flops: int

    @property
    def param_reduction(self):
        return 100.0 * (1 - self.params / self.backbone_params)

    @property
    def flop_reduction(self):
        return 100.0 * (1 - self.flops / self.backbone_flops)


def compare_to_backbone(cvit_config, backbone_config, input_size=224):
    """Percent parameter and FLOP savings of a CCFFN model over its plain-FFN twin."""
    from .model import build

    for attr in ("depths", "dims", "heads", "num_classes", "in_channels"):
        if getattr(cvit_config, attr) != getattr(backbone_config, attr):
            raise ConfigError(
                f"configs differ in {attr}: {getattr(cvit_config, attr)} vs {getattr(backbone_config, attr)}")
    a = cost_report(build(cvit_config), input_size)
    b = cost_report(build(backbone_config), input_size)
    return Reduction(a.total_unique_params, b.total_unique_params, a.total_flops, b.total_flops)


def compare_modules(module, reference, input_size):
    """Same reduction figures for two standalone modules taking ``C x H x W`` input."""
    def cost(m):
        channels = getattr(m, "channels", None) or getattr(m, "dim")
        was = m.training
        m.eval()
        tracer = _MacTracer()
        prev = set_tracer(tracer)
        try:
            with T.no_grad():
                m(T.tensor(np.zeros((1, channels, input_size, input_size))))
        finally:
            set_tracer(prev)
            m.train(was)
        return m.num_parameters(), sum(tracer.macs.values())

    p, f = cost(module)
    bp, bf = cost(reference)
    return Reduction(p, bp, f, bf)


# -- report output ---------------------------------------------------------------

CSV_COLUMNS = ("layer", "kind", "params", "flops")


def emit_report(report, fmt="table"):
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow((r.layer, r.kind, r.params, r.flops))
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    if fmt == "table":
        return _table(report)
    raise ValueError(f"unknown report format {fmt!r}")


def parse_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"expected CSV columns {CSV_COLUMNS}, got {reader.fieldnames}")
    return [CostRow(d["layer"], d["kind"], int(d["params"]), int(d["flops"])) for d in reader]


def _table(report):
    header = ("layer", "kind", "params", "flops")
    body = [(r.layer, r.kind, f"{r.params:,}", f"{r.flops:,}") for r in report.rows]
    t = report.totals()
    footer = [("total", "", f"{t['params']:,}", f"{t['flops']:,}")]
    widths = [max(len(row[i]) for row in [header] + body + footer) for i in range(4)]

    def fmt(row):
        return "  ".join([row[0].ljust(widths[0]), row[1].ljust(widths[1]),
                          row[2].rjust(widths[2]), row[3].rjust(widths[3])]).rstrip()

    rule = "-" * len(fmt(tuple("-" * w for w in widths)))
    lines = [fmt(header), rule] + [fmt(r) for r in body] + [rule, fmt(footer[0])]
    lines.append(f"unique params: {t['unique_params']:,} ({t['unique_params'] / 1e6:.2f} M)   "
                 f"buffers: {t['buffers']:,}")
    if report.input_size:
        lines.append(f"FLOPs ({report.convention}) at {report.input_size}x{report.input_size}: "
                     f"{t['flops']:,} ({t['mflops']:.1f} M)")
    return "\n".join(lines)
