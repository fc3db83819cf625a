"""Attention extraction for case-study style inspection.

Four views come out of a forward trace: the patient-pooling weights (pr),
final-layer head-averaged token attention split into the SEQ/code block (sr)
and the chapter-token rows (da), and the graph-attention coefficients per
layer/block/relation (dp). Self-loops are removed and only weights above the
display threshold are retained; filtering is pure post-processing and never
feeds back into the model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .assembly import TokenKind
from .errors import ValidationError
from .network import ForwardTrace

DISPLAY_THRESHOLD = 0.001


def _token_name(trace: ForwardTrace, position: int) -> str:
    slot = trace.assembled.slots[position]
    if slot.kind is TokenKind.SEQ:
        return "seq"
    if slot.kind is TokenKind.CHAPTER:
        return f"chapter{slot.chapter}"
    return f"v{slot.visit_index}:{slot.code.identifier}@{position}"


def _candidate_name(descriptor: tuple[str, int]) -> str:
    kind, index = descriptor
    return f"chapter{index}" if kind == "chapter" else f"visit{index}"


@dataclass
class AttentionReport:
    patient_id: str
    threshold_applied: float
    pr_weights: dict[str, float]
    pr_top: str
    sr_edges: list[dict] = field(default_factory=list)
    da_edges: list[dict] = field(default_factory=list)
    dp_edges: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "AttentionReport":
        return cls(**obj)

    def edge_count(self) -> int:
        return len(self.sr_edges) + len(self.da_edges) + len(self.dp_edges)


def extract_attention(trace: ForwardTrace, patient_id: str,
                      threshold: float = DISPLAY_THRESHOLD) -> AttentionReport:
    """Collect the four attention views, dropping self-loops and weights <= threshold."""
    if not trace.sr_attn:
        raise ValidationError("trace carries no attention captures")
    final_layer = len(trace.sr_attn) - 1
    mean_attn = trace.sr_attn[-1].mean(axis=0)
    allowed = trace.assembled.mask.allowed
    n_block = trace.assembled.n_code_tokens + 1  # SEQ + code rows

    sr_edges: list[dict] = []
    da_edges: list[dict] = []
    for row in range(mean_attn.shape[0]):
        bucket = sr_edges if row < n_block else da_edges
        for col in range(mean_attn.shape[1]):
            if row == col or not allowed[row, col]:
                continue
            weight = float(mean_attn[row, col])
            if weight <= threshold:
                continue
            bucket.append({
                "src": _token_name(trace, row),
                "dst": _token_name(trace, col),
                "layer": final_layer,
                "head": "mean",
                "weight": weight,
            })

    dp_edges: list[dict] = []
    for layer, blocks in enumerate(trace.gat_attn):
        for block, capture in enumerate(blocks):
            for t, (slots, weights) in capture["diag"].items():
                for position, weight in zip(slots, weights):
                    if weight <= threshold:
                        continue
                    dp_edges.append({
                        "src": _token_name(trace, position),
                        "dst": f"visit{t}",
                        "layer": layer,
                        "block": block,
                        "relation": "diag_to_visit",
                        "weight": float(weight),
                    })
            for t, (sources, weights) in capture["temporal"].items():
                for src_t, weight in zip(sources, weights):
                    if src_t == t:  # self-loop removed from the display
                        continue
                    if weight <= threshold:
                        continue
                    dp_edges.append({
                        "src": f"visit{src_t}",
                        "dst": f"visit{t}",
                        "layer": layer,
                        "block": block,
                        "relation": "temporal_forward",
                        "weight": float(weight),
                    })

    names = [_candidate_name(d) for d in trace.pool_candidates]
    pr_top = names[int(trace.pool_weights.argmax())]
    pr_weights = {
        name: float(w) for name, w in zip(names, trace.pool_weights) if w > threshold
    }
    return AttentionReport(
        patient_id=patient_id, threshold_applied=float(threshold),
        pr_weights=pr_weights, pr_top=pr_top,
        sr_edges=sr_edges, da_edges=da_edges, dp_edges=dp_edges,
    )


def render_report(report: AttentionReport, path, fmt: str = "json") -> None:
    """Write the report as JSON or as a one-edge-per-line graph description."""
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    elif fmt == "dot":
        with open(path, "w", encoding="utf-8") as fh:
            for edges in (report.sr_edges, report.da_edges, report.dp_edges):
                for edge in edges:
                    fh.write(f"{edge['src']} -> {edge['dst']} [{edge['weight']:.6f}]\n")
    else:
        raise ValidationError(f"format must be json or dot, got {fmt!r}")


def load_report(path) -> AttentionReport:
    with open(path, "r", encoding="utf-8") as fh:
        return AttentionReport.from_dict(json.load(fh))
