"""Per-layer complexity accounting: multiply-accumulates and parameter counts.

One MAC = one multiply + one accumulate (a 1x1 conv over T positions from C
to K channels costs T*C*K). Norms, activations, softmax, pooling, position
adds, and bias adds cost zero MACs; their parameters are still counted.
Counts are per sample (batch 1).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import blocks as B
from .models import ModelConfig, layer_plan


@dataclass
class ComplexityReport:
    name: str
    resolution: int
    rows: list  # (path, macs, params)

    @property
    def total_macs(self) -> int:
        return sum(r[1] for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r[2] for r in self.rows)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def row_map(self) -> dict:
        return {r[0]: (r[1], r[2]) for r in self.rows}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "resolution": self.resolution,
            "rows": [{"path": p, "macs": m, "params": n} for p, m, n in self.rows],
            "total_macs": self.total_macs,
            "total_params": self.total_params,
        }

    def table(self) -> str:
        width = max([len(p) for p, _, _ in self.rows] + [len("layer")])
        lines = [f"{self.name} @ {self.resolution}x{self.resolution}",
                 f"{'layer'.ljust(width)}  {'MACs':>14}  {'params':>12}",
                 "-" * (width + 32)]
        for p, m, n in self.rows:
            lines.append(f"{p.ljust(width)}  {m:>14,}  {n:>12,}")
        lines.append("-" * (width + 32))
        lines.append(f"{'total'.ljust(width)}  {self.total_macs:>14,}  {self.total_params:>12,}")
        lines.append(f"total MACs ≈ {self.gmacs:.2f}G")
        lines.append(f"total params ≈ {self.total_params / 1e6:.1f}M")
        return "\n".join(lines)


def complexity_report(config: ModelConfig, resolution: int | None = None) -> ComplexityReport:
    res = resolution if resolution is not None else config.input_resolution
    rows = []
    for e in layer_plan(config, resolution=res):
        out_hw = e.out_shape[1] * e.out_shape[2] if len(e.out_shape) == 3 else 0
        if e.kind == "stem":
            rows += B.stem_rows(e.spec, e.in_shape[0], out_hw, e.prefix)
        elif e.kind == "pool":
            rows.append((e.prefix, 0, 0))
        elif e.kind == "embed":
            rows += B.patch_embed_rows(e.spec, e.in_shape[0], out_hw, e.prefix)
        elif e.kind == "cls":
            rows.append((e.prefix, 0, e.in_shape[0]))
        elif e.kind == "pos":
            rows.append((e.prefix, 0, out_hw * e.out_shape[0]))
        elif e.kind == "attention":
            rows += B.attention_block_rows(e.spec, e.window[0] * e.window[1], e.prefix,
                                           rel_pos=config.pos_mode == "relative",
                                           window=e.window)
        elif e.kind == "mlp":
            rows += B.mlp_rows(e.spec, out_hw, e.prefix)
        elif e.kind == "bottleneck":
            rows += B.bottleneck_rows(e.spec, e.in_shape[1] * e.in_shape[2], e.prefix,
                                      config.conv_block_style)
        elif e.kind == "final_norm":
            rows += [("final_norm", 0, 2 * e.in_shape[0])]
        elif e.kind == "head":
            rows += B.head_rows(e.in_shape[0], e.out_shape[0], "head")
    return ComplexityReport(config.name, res, rows)


def count_params(config: ModelConfig) -> int:
    return complexity_report(config).total_params


def count_macs(config: ModelConfig, resolution: int | None = None) -> int:
    return complexity_report(config, resolution).total_macs


def attention_score_macs(report: ComplexityReport) -> int:
    """MACs spent on logit and weighted-sum matmuls (the O(T^2) core)."""
    return sum(m for p, m, _ in report.rows
               if p.endswith(".attn.scores") or p.endswith(".attn.apply"))


def shape_table(config: ModelConfig, resolution: int | None = None) -> list:
    """(path, in_shape, out_shape) per layer, per sample."""
    return [(e.prefix, e.in_shape, e.out_shape)
            for e in layer_plan(config, resolution=resolution)]
