import numpy as np
import pytest

from mergcn.data import SyntheticConfig, generate_synthetic
from mergcn.evaluation import (
    KFOLD,
    LOSO,
    Metrics,
    SplitError,
    TrainConfig,
    TrainingAborted,
    confusion_matrix,
    cross_validate,
    evaluate,
    fold_seed,
    kfold_splits,
    loso_splits,
    train,
)
from mergcn.graph import build_adjacency, build_vocabulary
from mergcn.model import CNN_ONLY, load_checkpoint

from oracles import plan_violations, random_manifest

FAST = dict(width_scale=0.03125, in_channels=1, epochs=1, lr=1e-2)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    cfg = SyntheticConfig(n_subjects=3, n_classes=2, sequences_per_class_per_subject=1, seed=2)
    return generate_synthetic(cfg, tmp_path_factory.mktemp("small"))


# --- splitters ----------------------------------------------------------------


def test_splitters_on_random_manifests():
    rng = np.random.default_rng(0)
    for _ in range(30):
        m = random_manifest(rng)
        assert plan_violations(m, loso_splits(m)) == []
        k = int(rng.integers(2, min(6, len(m)) + 1))
        assert plan_violations(m, kfold_splits(m, k, int(rng.integers(100)))) == []


def test_kfold_24_records_into_four_folds(tmp_path):
    m = generate_synthetic(SyntheticConfig(), tmp_path)
    plan = kfold_splits(m, 4, 0)
    assert plan.strategy == KFOLD and len(plan) == 4
    assert [len(f.test) for f in plan.folds] == [6, 6, 6, 6]
    for f in plan.folds:
        labels = [m.label(r) for r in m.subset(f.test).records]
        assert np.bincount(labels, minlength=3).tolist() == [2, 2, 2]


def test_kfold_is_seeded():
    m = random_manifest(np.random.default_rng(1))
    assert kfold_splits(m, 3, 7).folds == kfold_splits(m, 3, 7).folds
    assert kfold_splits(m, 3, 7).folds != kfold_splits(m, 3, 8).folds


def test_loso_holds_out_one_subject(small):
    plan = loso_splits(small)
    assert plan.strategy == LOSO and len(plan) == 3
    assert [{small.by_id()[i].subject for i in f.test} for f in plan.folds] == [{"sub01"}, {"sub02"}, {"sub03"}]


def test_splitter_errors(small):
    with pytest.raises(SplitError):
        kfold_splits(small, 1)
    with pytest.raises(SplitError):
        kfold_splits(small, len(small) + 1)
    with pytest.raises(SplitError, match="at least 2 subjects"):
        loso_splits(small.subset([small.records[0].id]))


def test_fold_seed_is_stable_and_distinct():
    assert fold_seed(0, 1) == fold_seed(0, 1)
    assert len({fold_seed(s, f) for s in range(3) for f in range(5)}) == 15


# --- metrics ------------------------------------------------------------------


def test_confusion_and_metrics():
    cm = confusion_matrix([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 1, 1], 3)
    np.testing.assert_array_equal(cm, [[2, 1, 0], [0, 3, 0], [0, 0, 0]])
    m = Metrics.from_confusion(cm)
    assert m.accuracy == 5 / 6 and m.n_eval == 6
    assert m.per_class_recall == [2 / 3, 1.0, 0.0]
    assert m.to_dict()["confusion"] == cm.tolist()


# --- training -----------------------------------------------------------------


def test_one_epoch_takes_one_step_per_record(small):
    subset = small.subset([r.id for r in small.records[:5]])
    result = train(subset, TrainConfig(**FAST))
    assert result.steps == 5 and len(result.loss_history) == 1


def test_training_is_deterministic(small):
    a = train(small, TrainConfig(**dict(FAST, epochs=2)))
    b = train(small, TrainConfig(**dict(FAST, epochs=2)))
    assert a.loss_history == b.loss_history
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert np.array_equal(p.value.data, q.value.data)


def test_gradient_norm_is_clipped(small):
    result = train(small, TrainConfig(**dict(FAST, clip_norm=1e-3)))
    assert 0.0 < result.max_clipped_norm <= 1e-3 * (1 + 1e-12)


def test_early_stop_at_target_accuracy(small):
    result = train(small, TrainConfig(**dict(FAST, epochs=3, target_train_accuracy=0.0)))
    assert len(result.loss_history) == 1 and result.train_accuracy == [result.train_accuracy[0]]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_context(small):
    with pytest.raises(TrainingAborted, match="epoch"):
        train(small, TrainConfig(**dict(FAST, epochs=5, lr=1e150, clip_norm=None)))


def test_graph_is_built_from_training_records_only(small):
    train_ids = [r.id for r in small.records if r.subject != "sub01"]
    result = train(small.subset(train_ids), TrainConfig(**FAST))
    annotations = [small.by_id()[i].aus for i in train_ids]
    oracle = build_adjacency(annotations, build_vocabulary(annotations))
    np.testing.assert_array_equal(result.model.adjacency.a, oracle.a)
    np.testing.assert_array_equal(result.model.adjacency.counts, oracle.counts)


def test_cross_validation_has_no_leakage_and_saves_checkpoints(small, tmp_path):
    plan = loso_splits(small)
    result = cross_validate(small, plan, TrainConfig(**FAST), checkpoint_dir=tmp_path)
    assert result.pooled.n_eval == len(small)
    for fold, fr in zip(plan.folds, result.folds):
        annotations = [small.by_id()[i].aus for i in fold.train]
        expected = build_adjacency(annotations, build_vocabulary(annotations)).counts
        assert fr.adjacency_counts == expected.tolist()
        model = load_checkpoint(fr.checkpoint)
        held = small.subset(fold.test)
        assert evaluate(model, held).accuracy == fr.metrics.accuracy


def test_cross_validation_parallel_matches_serial(small):
    plan = kfold_splits(small, 2, 0)
    cfg = TrainConfig(**dict(FAST, model_variant=CNN_ONLY))
    serial = cross_validate(small, plan, cfg)
    parallel = cross_validate(small, plan, cfg, jobs=2)
    assert [f.loss_history for f in serial.folds] == [f.loss_history for f in parallel.folds]
    np.testing.assert_array_equal(serial.pooled.confusion, parallel.pooled.confusion)
