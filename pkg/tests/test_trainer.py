import numpy as np
import pytest

from trajehr.checkpoint import (
    load_into_model,
    load_manifest,
    manifest_from_model,
    model_from_manifest,
    save_checkpoint,
)
from trajehr.cohort import GeneratorSpec, build_vocabulary, generate_cohort
from trajehr.config import TrainConfig, load_config, save_config
from trajehr.errors import CheckpointMismatch, ConfigError
from trajehr.network import Model, ModelHyper
from trajehr.trainer import (
    EarlyStopper,
    evaluate_model,
    finetune,
    pretrain,
    split_cohort,
    train_bag_baseline,
)


def tiny_config(**kw):
    defaults = dict(hidden_dim=8, n_heads=2, n_layers=1, n_gat_blocks=1, max_epochs=3,
                    batch_size=8, learning_rate=0.01, max_visits=6, max_seq_len=96,
                    k=2, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def world():
    spec = GeneratorSpec(n_patients=48, diagnosis_codes_per_chapter=5, n_medication=5,
                         n_lab=5, n_procedure=3)
    vocab = build_vocabulary(spec)
    cohort = generate_cohort(spec, seed=77)
    return spec, vocab, cohort


class TestEarlyStopper:
    def test_monotone_increase_stops_at_epoch_six(self):
        # best stays at epoch 1; five strikes stop the run after epoch 6
        stopper = EarlyStopper(patience=5, mode="min")
        losses = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7]
        stopped = None
        for epoch, loss in enumerate(losses, start=1):
            stopper.update(loss, epoch)
            if stopper.should_stop(epoch):
                stopped = epoch
                break
        assert stopped == 6
        assert stopper.best_epoch == 1

    def test_improvement_resets_counter(self):
        stopper = EarlyStopper(patience=2, mode="min")
        for epoch, loss in enumerate([3.0, 2.0, 2.5, 1.9], start=1):
            stopper.update(loss, epoch)
            assert not stopper.should_stop(epoch)

    def test_max_mode(self):
        stopper = EarlyStopper(patience=1, mode="max")
        assert stopper.update(0.7, 1)
        assert not stopper.update(0.6, 2)
        assert stopper.should_stop(2)

    def test_tie_is_not_improvement(self):
        stopper = EarlyStopper(patience=3, mode="min")
        stopper.update(1.0, 1)
        assert not stopper.update(1.0, 2)
        assert stopper.best_epoch == 1


class TestSplit:
    def test_fractions_and_disjointness(self, world):
        _, _, cohort = world
        config = tiny_config(train_frac=0.5, val_frac=0.25)
        train, val, test = split_cohort(cohort, config)
        assert len(train) == 24 and len(val) == 12 and len(test) == 12
        ids = [t.patient_id for t in train + val + test]
        assert len(set(ids)) == len(cohort)

    def test_seeded_determinism(self, world):
        _, _, cohort = world
        a = split_cohort(cohort, tiny_config(seed=5))
        b = split_cohort(cohort, tiny_config(seed=5))
        assert [t.patient_id for t in a[0]] == [t.patient_id for t in b[0]]


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        config = tiny_config(task="phenotyping", alpha=0.6)
        path = tmp_path / "run.cfg"
        save_config(config, path)
        assert load_config(path) == config

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 0.01\nbogus_key = 3\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            load_config(path)

    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("# comment\n\nseed = 9  # trailing\n")
        assert load_config(path).seed == 9

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            tiny_config(patience=0)
        with pytest.raises(ConfigError):
            tiny_config(task="nope")
        with pytest.raises(ConfigError):
            tiny_config(train_frac=0.9, val_frac=0.2)


class TestCheckpoints:
    def test_roundtrip_exact_f32(self, world, tmp_path):
        _, vocab, _ = world
        model = Model(vocab, ModelHyper(hidden_dim=8, n_heads=2, task_width=1), seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = model_from_manifest(load_manifest(path), vocab)
        for name, tensor in model.params.items():
            np.testing.assert_array_equal(
                loaded.params[name].data, tensor.data.astype(np.float32).astype(np.float64)
            )

    def test_byte_determinism(self, world, tmp_path):
        _, vocab, _ = world
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(Model(vocab, ModelHyper(hidden_dim=8, n_heads=2), seed=4), a)
        save_checkpoint(Model(vocab, ModelHyper(hidden_dim=8, n_heads=2), seed=4), b)
        assert a.read_bytes() == b.read_bytes()

    def test_arch_mismatch_rejected(self, world, tmp_path):
        _, vocab, _ = world
        path = tmp_path / "m.ckpt"
        save_checkpoint(Model(vocab, ModelHyper(hidden_dim=8, n_heads=2), seed=4), path)
        other = Model(vocab, ModelHyper(hidden_dim=16, n_heads=2), seed=4)
        with pytest.raises(CheckpointMismatch, match="hidden_dim"):
            load_into_model(other, load_manifest(path))

    def test_pretrain_checkpoint_leaves_task_head_fresh(self, world, tmp_path):
        _, vocab, _ = world
        pre = Model(vocab, ModelHyper(hidden_dim=8, n_heads=2, task_width=0), seed=4)
        path = tmp_path / "pre.ckpt"
        save_checkpoint(pre, path)
        fine = Model(vocab, ModelHyper(hidden_dim=8, n_heads=2, task_width=3), seed=9)
        head_before = fine.params["head.task"].data.copy()
        load_into_model(fine, load_manifest(path))
        np.testing.assert_array_equal(fine.params["head.task"].data, head_before)
        np.testing.assert_allclose(
            fine.params["embed.code"].data,
            pre.params["embed.code"].data.astype(np.float32).astype(np.float64),
        )

    def test_label_width_mismatch_rejected(self, world, tmp_path):
        _, vocab, _ = world
        binary = Model(vocab, ModelHyper(hidden_dim=8, n_heads=2, task_width=1), seed=4)
        path = tmp_path / "bin.ckpt"
        save_checkpoint(binary, path)
        multi = Model(vocab, ModelHyper(hidden_dim=8, n_heads=2, task_width=19), seed=4)
        with pytest.raises(CheckpointMismatch, match="head.task"):
            load_into_model(multi, load_manifest(path))

    def test_unknown_tensor_rejected(self, world, tmp_path):
        _, vocab, _ = world
        model = Model(vocab, ModelHyper(hidden_dim=8, n_heads=2), seed=4)
        manifest = manifest_from_model(model)
        manifest["tensors"][0]["name"] = "nonsense.tensor"
        with pytest.raises(CheckpointMismatch, match="nonsense"):
            load_into_model(model, manifest)


class TestPretrain:
    def test_determinism_identical_checkpoint_bytes(self, world, tmp_path):
        _, vocab, cohort = world
        paths = []
        for tag in ("a", "b"):
            result = pretrain(cohort, vocab, tiny_config(max_epochs=2), log_path=None)
            path = tmp_path / f"{tag}.ckpt"
            save_checkpoint(result.model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_best_epoch_is_argmin_of_history(self, world):
        _, vocab, cohort = world
        result = pretrain(cohort, vocab, tiny_config(max_epochs=4))
        losses = [h["val_loss"] for h in result.history]
        assert result.best_epoch == int(np.argmin(losses)) + 1

    def test_loss_log_schema(self, world, tmp_path):
        import json

        _, vocab, cohort = world
        log = tmp_path / "steps.jsonl"
        pretrain(cohort, vocab, tiny_config(max_epochs=1), log_path=log)
        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert lines
        for entry in lines:
            assert set(entry) == {"step", "mask", "anc_sr", "anc_dp", "cov", "task", "total"}
            assert entry["task"] is None

    def test_median_train_loss_decreases_first_epochs(self, world):
        _, vocab, cohort = world
        curves = []
        for seed in range(5):
            result = pretrain(cohort[:32], vocab, tiny_config(max_epochs=5, seed=seed,
                                                              learning_rate=0.02, batch_size=8))
            curves.append([h["train_loss"] for h in result.history])
        median = np.median(np.array(curves), axis=0)
        assert all(b < a for a, b in zip(median, median[1:])), median


class TestFinetune:
    def test_runs_and_reports(self, world):
        _, vocab, cohort = world
        result = finetune(cohort, vocab, tiny_config(task="plos", max_epochs=2))
        assert result.report.task == "plos"
        assert 0.0 <= result.report.auprc <= 100.0
        assert len(result.history) == result.stopped_epoch

    def test_phenotyping_width(self, world):
        _, vocab, cohort = world
        result = finetune(cohort, vocab, tiny_config(task="phenotyping", max_epochs=1))
        assert result.model.hyper.task_width == 19
        assert result.report.macro_auprc is not None

    def test_init_from_pretrain_checkpoint(self, world, tmp_path):
        _, vocab, cohort = world
        config = tiny_config(max_epochs=1)
        pre = pretrain(cohort, vocab, config)
        path = tmp_path / "pre.ckpt"
        save_checkpoint(pre.model, path)
        result = finetune(cohort, vocab, config.replace(task="plos"),
                          init_manifest=load_manifest(path))
        assert result.report.n_samples > 0

    def test_deterministic_given_seed(self, world):
        _, vocab, cohort = world
        config = tiny_config(task="plos", max_epochs=2, seed=3)
        a = finetune(cohort, vocab, config)
        b = finetune(cohort, vocab, config)
        assert a.report.to_dict() == b.report.to_dict()
        for name in a.model.params:
            np.testing.assert_array_equal(a.model.params[name].data, b.model.params[name].data)


class TestBaselineAndEvaluate:
    def test_bag_baseline_runs(self, world):
        _, vocab, cohort = world
        report = train_bag_baseline(cohort, vocab, tiny_config(task="phenotyping"))
        assert report.macro_auprc is not None

    def test_evaluate_model_uses_all_labeled(self, world):
        _, vocab, cohort = world
        result = finetune(cohort, vocab, tiny_config(task="plos", max_epochs=1))
        report = evaluate_model(result.model, cohort, "plos")
        assert report.n_samples == len(cohort)
