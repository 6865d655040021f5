"""Cross-validation splitters, the single-sequence training loop and metrics."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .backbone import BackboneConfig
from .data import DatasetManifest, load_sequence
from .graph import DEFAULT_GCN_DIMS, AuVocabulary, build_adjacency, build_vocabulary
from .model import (
    MER_GCN,
    MerGcnModel,
    ModelConfig,
    build_model,
    model_logits,
    model_loss,
    save_checkpoint,
)
from .tensor import NonFiniteError, Tape, Tensor, backward, clip_grad_norm, global_grad_norm, sgd_step

log = logging.getLogger(__name__)

LOSO = "loso"
KFOLD = "kfold"


class SplitError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, record_id: str, reason: str, fold: Optional[int] = None):
        where = "" if fold is None else f"fold {fold}, "
        super().__init__(f"training aborted at {where}epoch {epoch}, record {record_id!r}: {reason}")
        self.epoch = epoch
        self.record_id = record_id
        self.reason = reason
        self.fold = fold

    def __reduce__(self):
        return (TrainingAborted, (self.epoch, self.record_id, self.reason, self.fold))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    test: tuple[str, ...]


@dataclass
class SplitPlan:
    folds: list[Fold]
    strategy: str
    k: Optional[int] = None
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.folds)


def loso_splits(manifest: DatasetManifest) -> SplitPlan:
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise SplitError(f"leave-one-subject-out needs at least 2 subjects, found {len(subjects)}")
    folds = []
    for subject in subjects:
        test = tuple(r.id for r in manifest.records if r.subject == subject)
        train = tuple(r.id for r in manifest.records if r.subject != subject)
        folds.append(Fold(train, test))
    return SplitPlan(folds, LOSO)


def kfold_splits(manifest: DatasetManifest, k: int, seed: int = 0) -> SplitPlan:
    """Seeded, class-stratified k-fold partition.

    Records of each class are shuffled and dealt round-robin, continuing the
    dealing position across classes so overall fold sizes stay within one.
    """
    n = len(manifest)
    if not 2 <= k <= n:
        raise SplitError(f"k must satisfy 2 <= k <= {n} (record count), got {k}")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    labels = np.array(manifest.labels())
    slot = 0
    for c in range(len(manifest.class_names)):
        members = np.flatnonzero(labels == c)
        for idx in rng.permutation(members):
            buckets[slot].append(int(idx))
            slot = (slot + 1) % k
    ids = [r.id for r in manifest.records]
    folds = []
    for b in buckets:
        held = set(b)
        folds.append(Fold(tuple(ids[i] for i in range(n) if i not in held), tuple(ids[i] for i in sorted(b))))
    return SplitPlan(folds, KFOLD, k, seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: Optional[float] = 5.0
    width_scale: float = 1.0
    gcn_dims: tuple[int, ...] = DEFAULT_GCN_DIMS
    seed: int = 0
    model_variant: str = MER_GCN
    in_channels: int = 3
    head_init_std: float = 0.01
    activation_slope: float = 0.0
    zero_init_residual: bool = False
    class_weights: bool = False
    vocabulary: Optional[tuple[int, ...]] = None
    target_train_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        self.gcn_dims = tuple(int(d) for d in self.gcn_dims)
        if self.vocabulary is not None:
            self.vocabulary = tuple(int(a) for a in self.vocabulary)

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            n_classes=n_classes,
            variant=self.model_variant,
            backbone=BackboneConfig(
                in_channels=self.in_channels,
                width_scale=self.width_scale,
                activation_slope=self.activation_slope,
                zero_init_residual=self.zero_init_residual,
            ),
            gcn_dims=self.gcn_dims,
            head_init_std=self.head_init_std,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_dims"] = list(self.gcn_dims)
        if self.vocabulary is not None:
            d["vocabulary"] = list(self.vocabulary)
        return d


@dataclass
class TrainResult:
    model: MerGcnModel
    loss_history: list[float]
    steps: int
    train_accuracy: list[float] = field(default_factory=list)
    max_clipped_norm: float = 0.0


def load_sequences(manifest: DatasetManifest) -> dict[str, Tensor]:
    return {r.id: load_sequence(r, manifest.base_dir) for r in manifest.records}


def _class_weights(manifest: DatasetManifest) -> np.ndarray:
    counts = np.bincount(manifest.labels(), minlength=len(manifest.class_names)).astype(float)
    w = np.zeros_like(counts)
    present = counts > 0
    w[present] = counts[present].sum() / (present.sum() * counts[present])
    return w


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    sequences: Optional[dict[str, Tensor]] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Single-sequence SGD over ``manifest``; the graph is built from it alone."""
    if len(manifest) == 0:
        raise ValueError("cannot train on an empty record set")
    if sequences is None:
        sequences = load_sequences(manifest)
    annotations = [r.aus for r in manifest.records]
    adjacency = None
    if config.model_variant == MER_GCN:
        vocab = AuVocabulary(config.vocabulary) if config.vocabulary else build_vocabulary(annotations)
        adjacency = build_adjacency(annotations, vocab)
    model = build_model(config.model_config(len(manifest.class_names)), adjacency, config.seed, manifest.class_names)
    params = model.parameters()
    weights = _class_weights(manifest) if config.class_weights else None
    rng = np.random.default_rng([config.seed, 1])

    history: list[float] = []
    accuracy: list[float] = []
    steps = 0
    max_norm = 0.0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in rng.permutation(len(manifest)):
            rec = manifest.records[int(idx)]
            label = manifest.label(rec)
            w = 1.0 if weights is None else float(weights[label])
            try:
                with Tape() as tape:
                    loss = model_loss(model, sequences[rec.id], label, w)
                backward(loss, tape, params)
                if config.clip_norm is not None:
                    clip_grad_norm(params, config.clip_norm)
                    max_norm = max(max_norm, global_grad_norm(params))
                sgd_step(params, config.lr, config.momentum)
            except NonFiniteError as exc:
                raise TrainingAborted(epoch, rec.id, str(exc)) from exc
            total += loss.item()
            steps += 1
        history.append(total / len(manifest))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        if config.target_train_accuracy is not None:
            accuracy.append(evaluate(model, manifest, sequences).accuracy)
            if accuracy[-1] >= config.target_train_accuracy:
                break
    return TrainResult(model, history, steps, accuracy, max_norm)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray
    per_class_recall: list[float]
    n_eval: int

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "Metrics":
        confusion = np.asarray(confusion, dtype=np.int64)
        n = int(confusion.sum())
        rows = confusion.sum(axis=1)
        recall = [float(confusion[c, c] / rows[c]) if rows[c] else 0.0 for c in range(len(rows))]
        acc = float(np.trace(confusion) / n) if n else 0.0
        return cls(acc, confusion, recall, n)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class_recall": self.per_class_recall,
            "n_eval": self.n_eval,
        }


def confusion_matrix(truth: Sequence[int], predicted: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truth, predicted):
        cm[t, p] += 1
    return cm


def evaluate(
    model: MerGcnModel, manifest: DatasetManifest, sequences: Optional[dict[str, Tensor]] = None
) -> Metrics:
    """Rows of the confusion matrix are true classes, columns predictions."""
    if len(manifest) == 0:
        raise ValueError("cannot evaluate on an empty record set")
    if sequences is None:
        sequences = load_sequences(manifest)
    truth, preds = [], []
    for rec in manifest.records:
        truth.append(manifest.label(rec))
        preds.append(int(np.argmax(model_logits(model, sequences[rec.id]).data)))
    return Metrics.from_confusion(confusion_matrix(truth, preds, len(manifest.class_names)))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    index: int
    metrics: Metrics
    loss_history: list[float]
    seed: int
    seconds: float
    n_train: int
    adjacency_counts: Optional[list[int]] = None
    checkpoint: Optional[str] = None


@dataclass
class CrossValidationResult:
    pooled: Metrics
    folds: list[FoldResult]

    def to_dict(self) -> dict:
        return {
            "pooled": self.pooled.to_dict(),
            "folds": [
                {
                    "index": f.index,
                    "metrics": f.metrics.to_dict(),
                    "loss_history": f.loss_history,
                    "seed": f.seed,
                    "seconds": f.seconds,
                    "n_train": f.n_train,
                    "adjacency_counts": f.adjacency_counts,
                    "checkpoint": f.checkpoint,
                }
                for f in self.folds
            ],
        }


def fold_seed(seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([seed, fold_index]).generate_state(1)[0])


def _run_fold(args) -> FoldResult:
    manifest, fold, index, config, checkpoint_dir = args
    start = time.perf_counter()
    seed = fold_seed(config.seed, index)
    cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
    train_set = manifest.subset(fold.train)
    test_set = manifest.subset(fold.test)
    try:
        result = train(train_set, cfg)
    except TrainingAborted as exc:
        raise TrainingAborted(exc.epoch, exc.record_id, exc.reason, index) from exc
    metrics = evaluate(result.model, test_set)
    ckpt = None
    if checkpoint_dir is not None:
        ckpt = str(checkpoint_dir / f"fold{index}.mert")
        save_checkpoint(ckpt, result.model, {"fold": index, "train_ids": list(fold.train), "test_ids": list(fold.test)})
    adj = result.model.adjacency
    log.info("fold %d: accuracy %.4f on %d", index, metrics.accuracy, metrics.n_eval)
    return FoldResult(
        index,
        metrics,
        result.loss_history,
        seed,
        time.perf_counter() - start,
        len(train_set),
        None if adj is None else [int(c) for c in adj.counts],
        ckpt,
    )


def cross_validate(
    manifest: DatasetManifest,
    plan: SplitPlan,
    config: TrainConfig,
    jobs: int = 1,
    checkpoint_dir=None,
) -> CrossValidationResult:
    """Fresh model and graph per fold; metrics pooled over the summed confusion."""
    ckpt_dir = None if checkpoint_dir is None else Path(checkpoint_dir)
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(manifest, fold, i, config, ckpt_dir) for i, fold in enumerate(plan.folds)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, tasks))
    else:
        folds = [_run_fold(t) for t in tasks]
    pooled = Metrics.from_confusion(sum(f.metrics.confusion for f in folds))
    return CrossValidationResult(pooled, folds)
