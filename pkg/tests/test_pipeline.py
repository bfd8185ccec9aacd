import logging
import math

import numpy as np
import pytest

from selftrain import pipeline as pl
from selftrain import tensor as T
from selftrain.artifacts import ArtifactStore, read_pseudo_records
from selftrain.config import resolve_config, stage_seed
from selftrain.data import ClsExample, LabeledSet


def tiny_config(**overrides):
    base = {
        "seed": 11,
        "data": {"labeled_size": 48, "test_size": 64, "pool_size": 160},
        "pretrain": {"steps": 12},
        "finetune": {"epochs": 2},
        "tsp": {"epochs": 1},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in base:
            base[key].update(value)
        else:
            base[key] = value
    return resolve_config(base)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "store")


class TestStep1:
    def test_zero_steps_equals_fresh_init(self, store):
        config = tiny_config(pretrain={"steps": 0})
        data = pl.TaskData.build(config)
        artifact = pl.step1_domain_pretrain(config, data, store)
        fresh = pl.fresh_model(config, data)
        from selftrain.checkpoint import load_checkpoint

        saved = load_checkpoint(artifact.checkpoint_path)
        for name, tensor in fresh.params.items():
            assert saved[name].tobytes() == tensor.data.tobytes()

    def test_same_seed_identical_checkpoint_bytes(self, tmp_path):
        config = tiny_config()
        a = pl.step1_domain_pretrain(config, pl.TaskData.build(config), ArtifactStore(tmp_path / "s1"))
        b = pl.step1_domain_pretrain(config, pl.TaskData.build(config), ArtifactStore(tmp_path / "s2"))
        assert a.checkpoint_bytes() == b.checkpoint_bytes()

    def test_mlm_loss_trend_down(self, store):
        config = tiny_config(pretrain={"steps": 80}, data={"pool_size": 400})
        data = pl.TaskData.build(config)
        artifact = pl.step1_domain_pretrain(config, data, store)
        losses = artifact.extras["train"]["losses"]
        k = max(1, len(losses) // 10)
        assert np.mean(losses[-k:]) < np.mean(losses[:k])

    def test_empty_pool_rejected(self, store):
        config = tiny_config()
        data = pl.TaskData.build(config)
        data.pool.examples = []
        with pytest.raises(ValueError, match="pool"):
            pl.step1_domain_pretrain(config, data, store)

    def test_cache_hit_is_noop(self, store):
        config = tiny_config()
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        b = pl.step1_domain_pretrain(config, data, store)
        assert a.key == b.key
        assert b.checkpoint_bytes() == a.checkpoint_bytes()


class TestStep2:
    def test_zero_epochs_is_identity(self, store):
        config = tiny_config(finetune={"epochs": 0})
        data = pl.TaskData.build(config)
        base = pl.step1_domain_pretrain(config, data, store)
        tuned = pl.step2_finetune(config, data, base, store)
        assert tuned.checkpoint_bytes() == base.checkpoint_bytes()

    def test_single_example_memorized(self, store):
        config = tiny_config(
            data={"labeled_size": 1, "pool_size": 60, "test_size": 8},
            pretrain={"steps": 0},
            finetune={"epochs": 60, "lr": 3e-3, "batch_size": 1},
        )
        data = pl.TaskData.build(config)
        base = pl.step1_domain_pretrain(config, data, store)
        tuned = pl.step2_finetune(config, data, base, store)
        model = tuned.load_model(data.encoder_config())
        packed = pl.pack_examples(
            config.task, data.labeled.examples, data.vocab, data.tag_vocab,
            config["encoder"]["max_seq_len"],
        )
        preds = pl.predict_classification(model, packed)
        assert preds[0] == data.labeled.examples[0].label

    def test_finetune_improves_over_base(self, store):
        config = tiny_config(
            data={"labeled_size": 200, "pool_size": 300, "test_size": 200},
            pretrain={"steps": 30},
            finetune={"epochs": 4, "lr": 1e-3},
        )
        data = pl.TaskData.build(config)
        test_packed = pl.pack_examples(
            config.task, data.test.examples, data.vocab, data.tag_vocab,
            config["encoder"]["max_seq_len"],
        )
        base = pl.step1_domain_pretrain(config, data, store)
        base_model = base.load_model(data.encoder_config())
        _, base_acc = pl.evaluate_model(base_model, data, test_packed)
        tuned = pl.step2_finetune(config, data, base, store, test_packed)
        assert tuned.metrics[0].value > base_acc

    def test_task_mismatch_rejected(self, store):
        config = tiny_config()
        data = pl.TaskData.build(config)
        base = pl.step1_domain_pretrain(config, data, store)
        wrong = LabeledSet("ner", [])
        with pytest.raises(ValueError, match="task"):
            pl._finetune(config, data, "B", base, wrong, store, None)


class TestStep3:
    def make_records(self, store, **overrides):
        config = tiny_config(**overrides)
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        b = pl.step2_finetune(config, data, a, store)
        artifact, records = pl.step3_pseudo_label(config, data, b, store)
        return config, data, artifact, records

    def test_one_record_per_pool_example(self, store):
        config, data, _, records = self.make_records(store)
        assert len(records) == len(data.pool)
        assert [r.example.uid for r in records] == [ex.uid for ex in data.pool.examples]

    def test_label_is_argmax_of_logits(self, store):
        _, _, _, records = self.make_records(store)
        for rec in records:
            assert rec.label == int(np.argmax(rec.logits))

    def test_confidence_matches_recompute_oracle(self, store):
        _, _, _, records = self.make_records(store)
        for rec in records[:50]:
            logits = np.asarray(rec.logits, dtype=np.float64)
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            assert abs(rec.confidence - probs.max()) < 1e-5

    def test_records_persisted_and_reloadable(self, store):
        _, _, artifact, records = self.make_records(store)
        reloaded = read_pseudo_records(artifact.records_path)
        assert len(reloaded) == len(records)
        assert reloaded[0].example.uid == records[0].example.uid
        np.testing.assert_allclose(reloaded[0].logits, records[0].logits, rtol=1e-6)

    def test_teacher_eval_mode_deterministic(self, tmp_path):
        _, _, _, r1 = self.make_records(ArtifactStore(tmp_path / "a"))
        _, _, _, r2 = self.make_records(ArtifactStore(tmp_path / "b"))
        for x, y in zip(r1, r2):
            assert x.label == y.label and x.confidence == y.confidence

    def test_unfinetuned_teacher_rejected(self, store):
        config = tiny_config()
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        with pytest.raises(ValueError, match="fine-tuned"):
            pl.step3_pseudo_label(config, data, a, store)


class TestStep4:
    def run_stage(self, store, loss_variant, input_variant, tsp=None, **overrides):
        config = tiny_config(
            loss_variant=loss_variant, input_variant=input_variant,
            tsp=tsp or {"epochs": 1}, **overrides,
        )
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        b = pl.step2_finetune(config, data, a, store)
        pseudo, records = pl.step3_pseudo_label(config, data, b, store)
        c = pl.step4_task_specific_pretrain(config, data, records, pseudo, store)
        return config, data, c

    def test_zero_steps_equals_fresh_init(self, store):
        config, data, c = self.run_stage(store, "logits_kl_only", "nomask", tsp={"epochs": 0, "steps": None})
        fresh = pl.fresh_model(config, data)
        from selftrain.checkpoint import load_checkpoint

        saved = load_checkpoint(c.checkpoint_path)
        for name, tensor in fresh.params.items():
            assert saved[name].tobytes() == tensor.data.tobytes()

    def test_illegal_pairing_rejected(self, store):
        with pytest.raises(ValueError, match="nomask|unmasked"):
            self.run_stage(store, "logits_kl_plus_mlm", "nomask")

    def test_masked_variant_sees_mask_tokens(self, store):
        _, _, c = self.run_stage(store, "logits_kl_plus_mlm", "masked")
        assert c.extras["mask_tokens_seen"] > 0

    def test_nomask_variant_sees_no_mask_tokens(self, store):
        _, _, c = self.run_stage(store, "logits_kl_only", "nomask")
        assert c.extras["mask_tokens_seen"] == 0

    def test_loss_trend_down_logits_kl(self, store):
        _, _, c = self.run_stage(
            store, "logits_kl_only", "nomask",
            tsp={"epochs": 2, "lr": 1e-3},
            data={"labeled_size": 100, "pool_size": 400, "test_size": 32},
            finetune={"epochs": 3},
        )
        losses = c.extras["train"]["losses"]
        k = max(1, len(losses) // 10)
        assert np.mean(losses[-k:]) < np.mean(losses[:k])

    def test_label_variant_uses_pseudo_labels(self, store):
        _, _, c = self.run_stage(store, "label_ce_only", "nomask")
        assert c.extras["loss_variant"] == "label_ce_only"

    def test_empty_records_rejected(self, store):
        config = tiny_config()
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        b = pl.step2_finetune(config, data, a, store)
        pseudo, _ = pl.step3_pseudo_label(config, data, b, store)
        with pytest.raises(ValueError, match="records"):
            pl.step4_task_specific_pretrain(config, data, [], pseudo, store)


class TestStep5:
    def build_through_c(self, store, **overrides):
        config = tiny_config(**overrides)
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        b = pl.step2_finetune(config, data, a, store)
        pseudo, records = pl.step3_pseudo_label(config, data, b, store)
        c = pl.step4_task_specific_pretrain(config, data, records, pseudo, store)
        return config, data, a, c, records

    def test_pseudo_examples_rejected(self, store):
        config, data, _, c, records = self.build_through_c(store)
        tainted = LabeledSet(
            config.task, list(data.labeled.examples) + [records[0].training_example()]
        )
        with pytest.raises(ValueError, match="pseudo"):
            pl.step5_final_finetune(config, data, c, tainted, store)

    def test_non_stage_c_base_rejected(self, store):
        config, data, a, _, _ = self.build_through_c(store)
        with pytest.raises(ValueError, match="stage-C"):
            pl.step5_final_finetune(config, data, a, data.labeled, store)

    def test_zero_epochs_identity(self, store):
        config, data, _, c, _ = self.build_through_c(store, finetune={"epochs": 0})
        d = pl.step5_final_finetune(config, data, c, data.labeled, store)
        assert d.checkpoint_bytes() == c.checkpoint_bytes()

    def test_training_batches_all_gold(self, store):
        config, data, _, c, _ = self.build_through_c(store)
        d = pl.step5_final_finetune(config, data, c, data.labeled, store)
        assert d.extras["train"]["provenance_seen"] == ["gold"]


class TestClassicSelfTraining:
    def test_empty_subset_matches_plain_finetune(self, store, caplog):
        config = tiny_config()
        data = pl.TaskData.build(config)
        test_packed = pl.pack_examples(
            config.task, data.test.examples, data.vocab, data.tag_vocab,
            config["encoder"]["max_seq_len"],
        )
        plain = pl._finetune(config, data, pl.STAGE_BASELINE, None, data.labeled, store, test_packed)
        with caplog.at_level(logging.WARNING):
            st = pl.classic_self_training(
                config, data, None, store, test_packed, threshold=1.0
            )
        assert any("labeled set alone" in r.message for r in caplog.records)
        assert st.metrics[-1].value == plain.metrics[-1].value

    def test_per_class_cap_respected(self, store):
        config = tiny_config(data={"pool_size": 300})
        data = pl.TaskData.build(config)
        st = pl.classic_self_training(
            config, data, None, store, None, threshold=0.1, per_class_cap=7
        )
        hist = st.extras["selected_per_class"]
        assert hist and all(v <= 7 for v in hist.values())

    def test_selection_matches_independent_oracle(self, store):
        config = tiny_config()
        data = pl.TaskData.build(config)
        a = pl.step1_domain_pretrain(config, data, store)
        b = pl.step2_finetune(config, data, a, store)
        _, records = pl.step3_pseudo_label(config, data, b, store)
        tau, cap, seed = 0.3, 5, stage_seed(config.seed, "st-sample-0")
        selected = pl.select_confident(records, tau, cap, seed, task=config.task)
        # independent filter-and-sample with the same generator
        rng = np.random.default_rng(seed)
        qualifying = [r for r in records if r.confidence >= tau]
        groups = {}
        for r in qualifying:
            groups.setdefault(int(r.label), []).append(r)
        expected_hist = {}
        for cls in sorted(groups):
            group = groups[cls]
            if len(group) > cap:
                rng.choice(len(group), size=cap, replace=False)
                expected_hist[cls] = cap
            else:
                expected_hist[cls] = len(group)
        got_hist = {}
        for r in selected:
            got_hist[int(r.label)] = got_hist.get(int(r.label), 0) + 1
        assert got_hist == expected_hist

    def test_invalid_threshold(self, store):
        with pytest.raises(ValueError, match="threshold"):
            pl.select_confident([], 0.0, 5, seed=0)


class TestFullPipeline:
    def test_lineage_dag(self, store):
        config = tiny_config()
        result = pl.run_full_pipeline(config, store)
        arts = result.artifacts
        assert arts["B"].parent_key == arts["A"].key
        assert arts["pseudo"].parent_key == arts["B"].key
        assert arts["C"].parent_key == arts["pseudo"].key
        assert arts["D"].parent_key == arts["C"].key

    def test_rerun_identical_metrics(self, store):
        config = tiny_config()
        r1 = pl.run_full_pipeline(config, store, ablation_rows=["baseline"])
        r2 = pl.run_full_pipeline(config, store, ablation_rows=["baseline"])
        assert [m.to_json() for m in r1.metrics] == [m.to_json() for m in r2.metrics]

    def test_step1_and_step4_inits_bitwise_identical(self, store):
        config = tiny_config(pretrain={"steps": 0}, tsp={"epochs": 0, "steps": None})
        result = pl.run_full_pipeline(config, store)
        assert result.artifacts["A"].checkpoint_bytes() == result.artifacts["C"].checkpoint_bytes()

    def test_record_invariants(self, store):
        config = tiny_config()
        result = pl.run_full_pipeline(config, store)
        for rec in result.pseudo_records:
            assert rec.label == int(np.argmax(rec.logits))
            assert 0.0 <= rec.confidence <= 1.0

    def test_unknown_ablation_row_rejected(self, store):
        config = tiny_config()
        with pytest.raises(ValueError, match="row"):
            pl.run_full_pipeline(config, store, ablation_rows=["bogus"])

    def test_table_shaped_output_rows(self, store):
        config = tiny_config()
        result = pl.run_full_pipeline(
            config, store, ablation_rows=["baseline", "classic-ST-base", "classic-ST-A", "classic-ST-C"]
        )
        stages = {m.stage for m in result.metrics}
        assert {"B", "C", "D", "baseline", "classic-ST-base", "classic-ST-A", "classic-ST-C"} <= stages


class TestGrid:
    def test_two_by_two_gives_three_cells_and_one_skip(self, store):
        config = tiny_config()
        result = pl.run_ablation_grid(
            config,
            {
                "loss_variant": ["logits_kl_plus_mlm", "logits_kl_only"],
                "input_variant": ["masked", "nomask"],
            },
            store,
        )
        assert len(result.cells_run) == 3
        assert len(result.skips) == 1
        cell, reason = result.skips[0]
        assert cell["loss_variant"] == "logits_kl_plus_mlm" and cell["input_variant"] == "nomask"
        assert "masked-LM" in reason

    def test_cells_share_stage1_artifact(self, store):
        config = tiny_config()
        pl.run_ablation_grid(
            config,
            {"loss_variant": ["logits_kl_only", "label_ce_only"], "input_variant": ["nomask"]},
            store,
        )
        stage_a_dirs = [
            d for d in store.root.iterdir()
            if (d / "config.json").exists()
            and '"stage": "A"' in (d / "config.json").read_text()
        ]
        assert len(stage_a_dirs) == 1

    def test_unknown_axis_rejected(self, store):
        with pytest.raises(ValueError, match="axis"):
            pl.run_ablation_grid(tiny_config(), {"bogus": [1]}, store)

    def test_labeled_size_axis(self, store):
        config = tiny_config()
        result = pl.run_ablation_grid(
            config,
            {"labeled_size": [24, 48]},
            store,
        )
        regimes = {m.regime for m in result.records}
        assert regimes == {"labeled=24", "labeled=48"}
