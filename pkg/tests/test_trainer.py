import math
from dataclasses import replace

import numpy as np
import pytest

from hkd import trainer
from hkd.corpus import Dialogue, LabelSet, SyntheticSpec, Utterance, Vocabulary, generate_synthetic
from hkd.losses import LossWeights
from hkd.model import HierarchicalLabeler, ModelConfig, forward
from hkd.corpus import collate


def tiny_cfg(vocab, labels, **kw):
    base = dict(L=1, M=1, d_model=8, heads=2, ff_units=8, vocab_size=len(vocab), label_count=len(labels))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def data():
    spec = SyntheticSpec(dialogues=24, min_len=5, max_len=8, vocab_size=30, seed=3)
    dialogues, labels = generate_synthetic(spec)
    train, test = dialogues[:20], dialogues[20:]
    return train, test, Vocabulary.build(train), labels


def quick(**kw):
    base = dict(epochs=3, seeds=(0, 1), precision="f64", patience=2)
    base.update(kw)
    return trainer.TrainConfig(**base)


def _const_model(vocab, labels, label_index):
    m = HierarchicalLabeler(tiny_cfg(vocab, labels), seed=0)
    m.head.weight.data[:] = 0.0
    m.head.bias.data[:] = 0.0
    m.head.bias.data[label_index] = 1.0
    return m


class TestConfig:
    @pytest.mark.parametrize("kw", [{"patience": 0}, {"seeds": ()}, {"precision": "f16"}, {"batch_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            trainer.TrainConfig(**kw)

    def test_defaults(self):
        c = trainer.TrainConfig()
        assert (c.batch_size, c.patience, c.valid_fraction, len(c.seeds), c.epochs) == (5, 5, 0.1, 5, 100)
        assert (c.weights.tau, c.weights.lam, c.weights.alpha, c.weights.beta) == (5.0, 0.1, 0.05, 0.05)


class TestVariants:
    def test_weight_mapping(self):
        w = LossWeights()
        got = {v: trainer.variant_weights(v, w) for v in trainer.VARIANTS}
        assert (got["baseline"].lam, got["baseline"].alpha, got["baseline"].beta) == (0, 0, 0)
        assert (got["kd_st_only"].lam, got["kd_st_only"].alpha, got["kd_st_only"].beta) == (0.1, 0, 0)
        assert (got["kd_no_uc"].alpha, got["kd_no_uc"].beta) == (0, 0.05)
        assert (got["kd_no_dc"].alpha, got["kd_no_dc"].beta) == (0.05, 0)
        assert got["kd_full"] == w
        assert all(g.tau == 5.0 for g in got.values())

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            trainer.variant_weights("kd_magic", LossWeights())

    def test_experiment_spec_needs_teacher(self):
        cfg = ModelConfig(L=1, M=1, d_model=8, heads=2, ff_units=8, vocab_size=5, label_count=2)
        trainer.ExperimentSpec("baseline", cfg)
        with pytest.raises(ValueError, match="teacher checkpoint required"):
            trainer.ExperimentSpec("kd_full", cfg)

    def test_cli_names_cover_variants(self):
        assert sorted(trainer.CLI_VARIANTS.values()) == sorted(trainer.VARIANTS)


class TestEvaluate:
    def test_micro_not_macro(self):
        labels = LabelSet(["a", "b"])
        d1 = Dialogue("d1", [Utterance(["x"], "a")])
        d2 = Dialogue("d2", [Utterance(["x"], "b") for _ in range(3)])
        vocab = Vocabulary(["x"])
        m = _const_model(vocab, labels, 0)
        assert trainer.evaluate_accuracy(m, [d1, d2], vocab, labels) == 25.0

    def test_all_correct(self):
        labels = LabelSet(["a", "b"])
        vocab = Vocabulary(["x", "y"])
        ds = [Dialogue(f"d{i}", [Utterance(["x", "y"], "b")] * (i + 1)) for i in range(3)]
        assert trainer.evaluate_accuracy(_const_model(vocab, labels, 1), ds, vocab, labels) == 100.0

    def test_batch_size_irrelevant(self, data):
        _, test, vocab, labels = data
        m = HierarchicalLabeler(tiny_cfg(vocab, labels), seed=4)
        accs = {trainer.evaluate_accuracy(m, test, vocab, labels, batch_size=b) for b in (1, 2, 16)}
        assert len(accs) == 1

    def test_empty_rejected(self, data):
        _, _, vocab, labels = data
        with pytest.raises(ValueError, match="empty"):
            trainer.evaluate_accuracy(HierarchicalLabeler(tiny_cfg(vocab, labels)), [], vocab, labels)

    def test_chance_level_untrained(self):
        dialogues, labels = generate_synthetic(SyntheticSpec(dialogues=40, seed=11))
        vocab = Vocabulary.build(dialogues)
        cfg = ModelConfig(L=1, M=1, d_model=16, heads=2, ff_units=16, vocab_size=len(vocab), label_count=len(labels))
        accs = [trainer.evaluate_accuracy(HierarchicalLabeler(cfg, seed=s), dialogues, vocab, labels) for s in range(5)]
        assert 15.0 <= float(np.mean(accs)) <= 25.0


class TestMetricsReport:
    def test_mean_and_population_std(self):
        r = trainer.MetricsReport("x", [{"test_accuracy": a} for a in (90.0, 92.0, 94.0)])
        assert r.mean == 92.0
        assert r.std == pytest.approx(math.sqrt(8 / 3))

    def test_json_stable(self):
        r = trainer.MetricsReport("x", [{"test_accuracy": 50.0, "seed": 0}])
        assert r.to_json() == r.to_json() and r.to_json().endswith("\n")


class TestTraining:
    def test_single_dialogue_loss_decreases(self, data):
        train, _, vocab, labels = data
        seen = []
        trainer.train_model(train[:1], train[:1], vocab, labels, tiny_cfg(vocab, labels), quick(epochs=5, patience=5), 0,
                            on_step=lambda e, s, parts: seen.append(parts.combined))
        assert len(seen) == 5 and seen[-1] < seen[0]

    def test_constant_label_corpus_reaches_100(self):
        rng = np.random.default_rng(0)
        labels = LabelSet(["only", "other"])
        ds = [Dialogue(f"d{i}", [Utterance([f"w{int(k)}" for k in rng.integers(0, 9, 3)], "only") for _ in range(4)])
              for i in range(240)]
        vocab = Vocabulary.build(ds)
        cfg = quick(epochs=5, patience=5, seeds=(0, 1, 2, 3, 4))
        model_cfg = tiny_cfg(vocab, labels, d_model=16, ff_units=16)
        for seed in cfg.seeds:
            res, _ = trainer.train_teacher(ds, ds[:10], vocab, labels, model_cfg, cfg, seed=seed)
            assert res.test_accuracy == 100.0

    def test_same_seed_identical_report(self, data):
        train, test, vocab, labels = data
        a = trainer.train_teacher(train, test, vocab, labels, tiny_cfg(vocab, labels), quick())[1].to_json()
        b = trainer.train_teacher(train, test, vocab, labels, tiny_cfg(vocab, labels), quick())[1].to_json()
        assert a == b

    def test_early_stopping_keeps_best(self, data):
        train, test, vocab, labels = data
        cfg = quick(epochs=12, patience=2)
        for seed in (0, 1, 2):
            res = trainer.train_model(train[:15], train[15:], vocab, labels, tiny_cfg(vocab, labels), cfg, seed)
            curve = res.valid_curve
            assert curve[res.best_epoch - 1] == res.valid_accuracy
            assert all(res.valid_accuracy >= later for later in curve[res.best_epoch :])
            assert res.valid_accuracy > max(curve[: res.best_epoch - 1], default=-1)
            if len(curve) < cfg.epochs:
                assert len(curve) - res.best_epoch == cfg.patience
            assert trainer.evaluate_accuracy(res.model, train[15:], vocab, labels) == res.valid_accuracy

    def test_divergence_aborts_with_location(self, data):
        train, _, vocab, labels = data
        cfg = tiny_cfg(vocab, labels)
        state = HierarchicalLabeler(cfg, seed=0, dtype=np.float64).state_dict()
        state["head.bias"][:] = np.inf
        with pytest.raises(trainer.TrainingDiverged, match="epoch 1, step 0"):
            trainer.train_model(train, train, vocab, labels, cfg, quick(), 0, init_state=state)


@pytest.fixture(scope="module")
def teacher(data):
    train, test, vocab, labels = data
    cfg = tiny_cfg(vocab, labels, M=2, ff_units=16)
    res, _ = trainer.train_teacher(train, test, vocab, labels, cfg, quick(epochs=2))
    return res.model.freeze()


class TestDistill:
    def test_baseline_equals_teacher_training(self, data):
        train, test, vocab, labels = data
        cfg, c = tiny_cfg(vocab, labels), quick()
        base = trainer.distill_student(train, test, vocab, labels, c, "baseline", cfg, None, 0)
        ref, _ = trainer.train_teacher(train, test, vocab, labels, cfg, c, seed=0)
        assert base.summary() == ref.summary()
        assert all(base.model.params[k].data.tobytes() == ref.model.params[k].data.tobytes() for k in ref.model.params)

    def test_no_uc_equals_full_with_alpha_zero(self, data, teacher):
        train, test, vocab, labels = data
        cfg = tiny_cfg(vocab, labels)
        a = trainer.distill_student(train, test, vocab, labels, quick(), "kd_no_uc", cfg, teacher, 1)
        c0 = quick(weights=replace(LossWeights(), alpha=0.0))
        b = trainer.distill_student(train, test, vocab, labels, c0, "kd_full", cfg, teacher, 1)
        assert a.summary() == b.summary()

    def test_teacher_parameters_unchanged(self, data, teacher):
        train, test, vocab, labels = data
        before = {k: v.tobytes() for k, v in teacher.state_dict().items()}
        for variant in ("kd_st_only", "kd_full"):
            trainer.distill_student(train, test, vocab, labels, quick(epochs=1), variant, tiny_cfg(vocab, labels), teacher, 0)
        assert {k: v.tobytes() for k, v in teacher.state_dict().items()} == before
        assert all(not t.requires_grad for t in teacher.parameters())

    def test_missing_teacher_rejected(self, data):
        train, test, vocab, labels = data
        with pytest.raises(ValueError, match="teacher checkpoint required"):
            trainer.distill_student(train, test, vocab, labels, quick(), "kd_st_only", tiny_cfg(vocab, labels), None, 0)

    @pytest.mark.parametrize("kw,variant,msg", [
        ({"d_model": 4}, "kd_full", "utterance vector widths"),
        ({"d_model": 4, "hidden": 8}, "kd_no_uc", None),
        ({"hidden": 6}, "kd_no_uc", "dialogue state widths"),
        ({"M": 3}, "kd_full", "depth"),
    ])
    def test_compatibility(self, data, teacher, kw, variant, msg):
        train, test, vocab, labels = data
        cfg = tiny_cfg(vocab, labels, **kw)
        calls = []

        def run():
            return trainer.train_model(train, test, vocab, labels, cfg, quick(epochs=1), 0,
                                       weights=trainer.variant_weights(variant, LossWeights()), teacher=teacher,
                                       on_step=lambda *a: calls.append(a))

        if msg is None:
            run()
        else:
            with pytest.raises(ValueError, match=msg):
                run()
            assert calls == []  # rejected before any step

    def test_cached_teacher_matches_recomputed(self, data, teacher):
        train, _, vocab, labels = data
        cache = trainer.TeacherCache(teacher, train, vocab, labels, batch_size=16)
        b = collate(train[3:8], vocab, labels)
        direct = forward(teacher, b.tokens, b.token_mask, b.utt_mask)
        cached = cache.trace(b)
        for key in ("s", "u", "v", "o"):
            got, ref = getattr(cached, key).data, getattr(direct, key).data
            np.testing.assert_allclose(got[b.utt_mask], ref[b.utt_mask], atol=1e-12)


class TestAblation:
    def test_bookkeeping(self, data, teacher):
        train, test, vocab, labels = data
        students = {"S": tiny_cfg(vocab, labels)}
        table = trainer.run_ablation(train, test, vocab, labels, quick(epochs=1), teacher, students,
                                     variants=["baseline", "kd_full"], teacher_accuracy=55.0)
        assert set(table.cells) == {("baseline", "S"), ("kd_full", "S")}
        for cell in table.cells.values():
            assert len(cell.runs) == 2
            assert cell.mean == pytest.approx(np.mean([r["test_accuracy"] for r in cell.runs]))
        single = trainer.distill_student(train, test, vocab, labels, quick(epochs=1), "kd_full", students["S"], teacher, 1)
        assert table.cells[("kd_full", "S")].runs[1] == single.summary()

    def test_failed_cell_and_teacher_row(self, data, teacher):
        train, test, vocab, labels = data
        students = {"ok": tiny_cfg(vocab, labels), "bad": tiny_cfg(vocab, labels, d_model=4)}
        table = trainer.run_ablation(train, test, vocab, labels, quick(epochs=1, seeds=(0,)), teacher, students,
                                     variants=["baseline", "kd_full"], teacher_accuracy=61.25)
        assert isinstance(table.cells[("kd_full", "bad")], str)
        assert isinstance(table.cells[("baseline", "bad")], trainer.MetricsReport)
        text = table.format()
        teacher_row = next(line for line in text.splitlines() if line.startswith("Teacher"))
        assert teacher_row.split()[-2:] == ["61.25", "61.25"]
        assert "failed" in text and "Proposed KD" in text
        assert '"failed"' in table.to_json()
