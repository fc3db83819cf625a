import json

import numpy as np
import pytest

from conftest import random_trajectory, random_vocab
from trajehr.graph import Relation
from trajehr.interpret import AttentionReport, extract_attention, load_report, render_report
from trajehr.network import Model, ModelHyper


@pytest.fixture(scope="module")
def traced():
    rng = np.random.default_rng(99)
    vocab = random_vocab(rng)
    model = Model(vocab, ModelHyper(hidden_dim=16, n_heads=2, k=1, max_visits=6, task_width=1), seed=1)
    traj = random_trajectory(rng, vocab, max_visits=4, patient_id="P0042")
    trace = model.forward(traj)
    return vocab, model, traj, trace


class TestExtract:
    def test_threshold_honored(self, traced):
        _, _, _, trace = traced
        report = extract_attention(trace, "P0042", threshold=0.001)
        for edge in report.sr_edges + report.da_edges + report.dp_edges:
            assert edge["weight"] > 0.001
        for weight in report.pr_weights.values():
            assert weight > 0.001

    def test_threshold_one_empties_everything(self, traced):
        _, _, _, trace = traced
        report = extract_attention(trace, "P0042", threshold=1.0)
        assert report.edge_count() == 0
        assert report.pr_weights == {}
        assert report.pr_top  # top candidate still identified pre-filter

    def test_no_self_loops(self, traced):
        _, _, _, trace = traced
        report = extract_attention(trace, "P0042", threshold=0.0)
        for edge in report.sr_edges + report.da_edges + report.dp_edges:
            assert edge["src"] != edge["dst"]

    def test_da_rows_point_only_at_own_chapter_diagnoses(self, traced):
        vocab, _, _, trace = traced
        report = extract_attention(trace, "P0042", threshold=0.0)
        for edge in report.da_edges:
            chapter = int(edge["src"].removeprefix("chapter"))
            ident = edge["dst"].split(":")[1].split("@")[0]
            assert vocab.chapter_map[ident] == chapter

    def test_single_visit_dp_edges_are_exactly_diag_coefficients(self, rng):
        vocab = random_vocab(rng)
        model = Model(vocab, ModelHyper(hidden_dim=16, n_heads=2, k=1, max_visits=4), seed=2)
        traj = random_trajectory(rng, vocab, max_visits=1, patient_id="solo")
        trace = model.forward(traj)
        report = extract_attention(trace, "solo", threshold=0.0)
        graph = trace.graph
        n_diag_edges = len(graph.edges_of(Relation.DIAG_TO_VISIT))
        blocks = model.hyper.n_layers * model.hyper.n_gat_blocks
        assert all(e["relation"] == "diag_to_visit" for e in report.dp_edges)
        assert len(report.dp_edges) == n_diag_edges * blocks

    def test_filtering_does_not_touch_model_outputs(self, traced):
        _, model, traj, trace = traced
        before = trace.patient_vector.data.copy()
        extract_attention(trace, "P0042", threshold=0.5)
        np.testing.assert_array_equal(trace.patient_vector.data, before)
        np.testing.assert_array_equal(model.forward(traj).patient_vector.data, before)

    def test_prefilter_distributions_normalized(self, traced):
        _, _, _, trace = traced
        np.testing.assert_allclose(trace.pool_weights.sum(), 1.0, atol=1e-6)
        for attn in trace.sr_attn:
            np.testing.assert_allclose(attn.sum(axis=2), 1.0, atol=1e-6)


class TestRender:
    def test_json_roundtrip(self, traced, tmp_path):
        _, _, _, trace = traced
        report = extract_attention(trace, "P0042")
        path = tmp_path / "report.json"
        render_report(report, path, fmt="json")
        assert load_report(path) == report

    def test_empty_report_valid_file(self, tmp_path):
        report = AttentionReport(patient_id="x", threshold_applied=1.0,
                                 pr_weights={}, pr_top="visit1")
        path = tmp_path / "empty.json"
        render_report(report, path, fmt="json")
        obj = json.loads(path.read_text())
        assert obj["sr_edges"] == [] and obj["da_edges"] == [] and obj["dp_edges"] == []

    def test_dot_line_count_equals_edges(self, traced, tmp_path):
        _, _, _, trace = traced
        report = extract_attention(trace, "P0042", threshold=0.001)
        path = tmp_path / "report.dot"
        render_report(report, path, fmt="dot")
        lines = [line for line in path.read_text().splitlines() if line.strip()]
        assert len(lines) == report.edge_count()
        for line in lines:
            assert " -> " in line and line.endswith("]")
