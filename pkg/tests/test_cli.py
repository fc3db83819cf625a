import json

import pytest

from trajehr.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-cohort once; downstream commands share the directory."""
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "n_patients": 60,
        "diagnosis_codes_per_chapter": 5,
        "n_medication": 5,
        "n_lab": 5,
        "n_procedure": 3,
    }
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    data = root / "data"
    code = main(["gen-cohort", "--spec", str(spec_path), "--seed", "7", "--out", str(data)])
    assert code == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        "hidden_dim = 8\nn_heads = 2\nn_layers = 1\nn_gat_blocks = 1\n"
        "max_epochs = 2\nbatch_size = 16\nlearning_rate = 0.01\nk = 2\nseed = 1\n"
    )
    return root, data, cfg


class TestGenCohort:
    def test_outputs_exist(self, workspace):
        _, data, _ = workspace
        assert (data / "cohort.jsonl").exists()
        assert (data / "vocab.json").exists()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["command"] == "gen-cohort"
        assert manifest["version"].startswith("trajehr-")

    def test_idempotent_given_seed(self, workspace, tmp_path):
        root, data, _ = workspace
        again = tmp_path / "again"
        code = main(["gen-cohort", "--spec", str(root / "spec.json"), "--seed", "7", "--out", str(again)])
        assert code == 0
        assert (again / "cohort.jsonl").read_bytes() == (data / "cohort.jsonl").read_bytes()

    def test_workers_flag(self, workspace, tmp_path):
        root, data, _ = workspace
        par = tmp_path / "par"
        code = main(["gen-cohort", "--spec", str(root / "spec.json"), "--seed", "7",
                     "--workers", "2", "--out", str(par)])
        assert code == 0
        assert (par / "cohort.jsonl").read_bytes() == (data / "cohort.jsonl").read_bytes()


class TestPipeline:
    def test_pretrain_finetune_evaluate_explain(self, workspace):
        root, data, cfg = workspace
        pre_dir = root / "pre"
        code = main(["pretrain", "--cohort", str(data / "cohort.jsonl"), "--vocab", str(data / "vocab.json"),
                     "--config", str(cfg), "--out", str(pre_dir)])
        assert code == 0
        assert (pre_dir / "best.ckpt").exists()
        assert (pre_dir / "loss_log.jsonl").exists()

        fine_dir = root / "fine"
        code = main(["finetune", "--cohort", str(data / "cohort.jsonl"), "--vocab", str(data / "vocab.json"),
                     "--config", str(cfg), "--task", "plos", "--init", str(pre_dir / "best.ckpt"),
                     "--out", str(fine_dir)])
        assert code == 0
        metrics = json.loads((fine_dir / "metrics.json").read_text())
        assert set(metrics) == {"per_seed", "aggregate", "n_seeds"}
        for key in ("f1", "auroc", "auprc"):
            assert 0.0 <= metrics["aggregate"][key]["mean"] <= 100.0
        ckpt = fine_dir / "seed1" / "best.ckpt"
        assert ckpt.exists()

        eval_dir = root / "eval"
        code = main(["evaluate", "--ckpt", str(ckpt), "--cohort", str(data / "cohort.jsonl"),
                     "--vocab", str(data / "vocab.json"), "--task", "plos", "--out", str(eval_dir)])
        assert code == 0
        assert (eval_dir / "metrics.json").exists()

        explain_dir = root / "explain"
        cohort_line = json.loads((data / "cohort.jsonl").read_text().splitlines()[0])
        code = main(["explain", "--ckpt", str(ckpt), "--cohort", str(data / "cohort.jsonl"),
                     "--vocab", str(data / "vocab.json"), "--patient", cohort_line["patient_id"],
                     "--threshold", "0.001", "--out", str(explain_dir)])
        assert code == 0
        report = json.loads((explain_dir / "attention.json").read_text())
        assert report["threshold_applied"] == 0.001
        for edge in report["sr_edges"] + report["da_edges"] + report["dp_edges"]:
            assert edge["weight"] > 0.001

    def test_finetune_multi_seed_aggregation(self, workspace):
        root, data, cfg = workspace
        out = root / "multiseed"
        code = main(["finetune", "--cohort", str(data / "cohort.jsonl"), "--vocab", str(data / "vocab.json"),
                     "--config", str(cfg), "--task", "plos", "--seeds", "2", "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["n_seeds"] == 2
        assert len(metrics["per_seed"]) == 2
        assert (out / "seed1").is_dir() and (out / "seed2").is_dir()


class TestExitCodes:
    def test_unknown_flag_exits_one(self, capsys):
        assert main(["gen-cohort", "--bogus", "x", "--out", "y"]) == 1

    def test_unknown_subcommand_exits_one(self):
        assert main(["frobnicate"]) == 1

    def test_missing_input_file_exits_one(self, tmp_path):
        code = main(["pretrain", "--cohort", str(tmp_path / "none.jsonl"),
                     "--vocab", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_bad_config_value_exits_one(self, workspace, tmp_path):
        _, data, _ = workspace
        bad = tmp_path / "bad.cfg"
        bad.write_text("patience = 0\n")
        code = main(["pretrain", "--cohort", str(data / "cohort.jsonl"),
                     "--vocab", str(data / "vocab.json"), "--config", str(bad),
                     "--out", str(tmp_path / "o")])
        assert code == 1

    def test_unknown_patient_exits_one(self, workspace, tmp_path):
        root, data, _ = workspace
        fine_ckpt = root / "fine" / "seed1" / "best.ckpt"
        if not fine_ckpt.exists():
            pytest.skip("pipeline test must run first")
        code = main(["explain", "--ckpt", str(fine_ckpt), "--cohort", str(data / "cohort.jsonl"),
                     "--vocab", str(data / "vocab.json"), "--patient", "NOPE",
                     "--out", str(tmp_path / "x")])
        assert code == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_subcommand_help_lists_flags(self, capsys):
        assert main(["finetune", "--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--cohort", "--vocab", "--config", "--out", "--seed", "--seeds",
                     "--task", "--alpha", "--k", "--lambda-anc", "--lambda-cov", "--workers", "--init"):
            assert flag in out
