"""Heterogeneous disease-progression graph over visits and their diagnoses.

One virtual visit node per hospital visit, one diagnosis node per
diagnosis-code occurrence. Diagnosis nodes feed their visit node, visit nodes
chain forward in time, and visit nodes from the second onward carry a
self-loop so the temporal message can preserve their own state. Diagnosis
self-loops are stored for fidelity with the declared edge set but carry no
messages (diagnosis nodes are read-only views of encoder hidden states).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .assembly import AssembledSequence, TokenKind
from .cohort import PatientTrajectory
from .errors import ValidationError
from .ontology import CodeType


class Relation(str, Enum):
    DIAG_TO_VISIT = "diag_to_visit"
    TEMPORAL_FORWARD = "temporal_forward"
    VISIT_SELF_LOOP = "visit_self_loop"
    DIAG_SELF_LOOP = "diag_self_loop"


@dataclass(frozen=True)
class VisitNode:
    visit_index: int  # 1-based


@dataclass(frozen=True)
class DiagnosisNode:
    visit_index: int
    slot_position: int  # position of the diagnosis token in the assembled sequence


@dataclass(frozen=True)
class ProgressionEdge:
    src: VisitNode | DiagnosisNode
    dst: VisitNode | DiagnosisNode
    relation: Relation


@dataclass
class ProgressionGraph:
    visit_nodes: list[VisitNode]
    diagnosis_nodes: list[DiagnosisNode]
    edges: list[ProgressionEdge]
    n_visits: int
    diagnoses_per_visit: list[int]

    def __post_init__(self):
        if len(self.visit_nodes) != self.n_visits:
            raise ValidationError("exactly one visit node per visit")

    def diag_slots(self, visit_index: int) -> list[int]:
        """Slot positions of the diagnosis nodes attached to one visit."""
        return [d.slot_position for d in self.diagnosis_nodes if d.visit_index == visit_index]

    def edges_of(self, relation: Relation) -> list[ProgressionEdge]:
        return [e for e in self.edges if e.relation is relation]

    def export(self) -> dict:
        """JSON-friendly debug/interpretability dump."""
        nodes = [{"id": f"v{n.visit_index}", "kind": "visit", "visit": n.visit_index} for n in self.visit_nodes]
        nodes += [
            {"id": f"d{n.visit_index}.{n.slot_position}", "kind": "diagnosis", "visit": n.visit_index}
            for n in self.diagnosis_nodes
        ]
        def _name(n):
            return f"v{n.visit_index}" if isinstance(n, VisitNode) else f"d{n.visit_index}.{n.slot_position}"
        edges = [{"src": _name(e.src), "dst": _name(e.dst), "relation": e.relation.value} for e in self.edges]
        return {"nodes": nodes, "edges": edges}


def build_progression_graph(traj: PatientTrajectory, assembled: AssembledSequence) -> ProgressionGraph:
    """Construct the per-patient graph, binding diagnosis nodes to token slots."""
    n_visits = traj.n_visits
    visit_nodes = [VisitNode(t) for t in range(1, n_visits + 1)]
    diagnosis_nodes = [
        DiagnosisNode(visit_index=s.visit_index, slot_position=s.position)
        for s in assembled.slots
        if s.kind is TokenKind.CODE and s.code.code_type is CodeType.DIAGNOSIS
    ]

    edges: list[ProgressionEdge] = []
    for d in diagnosis_nodes:
        v = visit_nodes[d.visit_index - 1]
        edges.append(ProgressionEdge(src=d, dst=v, relation=Relation.DIAG_TO_VISIT))
        edges.append(ProgressionEdge(src=d, dst=d, relation=Relation.DIAG_SELF_LOOP))
    for t in range(1, n_visits):
        edges.append(ProgressionEdge(src=visit_nodes[t - 1], dst=visit_nodes[t], relation=Relation.TEMPORAL_FORWARD))
    for t in range(2, n_visits + 1):
        edges.append(ProgressionEdge(src=visit_nodes[t - 1], dst=visit_nodes[t - 1], relation=Relation.VISIT_SELF_LOOP))

    per_visit = [0] * n_visits
    for d in diagnosis_nodes:
        per_visit[d.visit_index - 1] += 1
    return ProgressionGraph(
        visit_nodes=visit_nodes,
        diagnosis_nodes=diagnosis_nodes,
        edges=edges,
        n_visits=n_visits,
        diagnoses_per_visit=per_visit,
    )
