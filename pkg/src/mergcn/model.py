"""MER-GCN classifier: backbone features fused with GCN-embedded AU nodes.

For an input sequence the backbone yields a feature vector ``f``; the GCN
yields one embedding per AU, ``H`` (``n x f``). Their product ``H @ f`` gives
one score per AU, and a linear head maps the ``n`` scores to class logits.
The ``cnn-only`` variant skips the graph and feeds ``f`` to the head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .backbone import BackboneConfig, BackboneModel, backbone_forward, build_backbone
from .graph import (
    DEFAULT_GCN_DIMS,
    DEFAULT_SLOPE,
    AdjacencyMatrix,
    AuVocabulary,
    GcnStack,
    build_gcn_stack,
    gcn_stack_forward,
)
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    linear,
    matmul,
    reshape,
    softmax,
    softmax_cross_entropy,
)

MER_GCN = "mer-gcn"
CNN_ONLY = "cnn-only"
VARIANTS = (MER_GCN, CNN_ONLY)

DEFAULT_CLASS_NAMES = ("happiness", "disgust", "surprise", "repression", "others", "sadness", "fear")
INIT_SCHEME = {
    "conv": "normal(0, sqrt(2/fan_in))",
    "gcn": "uniform(+-sqrt(6/(d_in+d_out)))",
    "head": "normal(0, head_init_std)",
    "bias": "zeros",
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 5
    variant: str = MER_GCN
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gcn_dims: tuple[int, ...] = DEFAULT_GCN_DIMS
    gcn_slope: float = DEFAULT_SLOPE
    head_init_std: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_classes < 2:
            raise ModelError(f"need at least 2 classes, got {self.n_classes}")
        object.__setattr__(self, "gcn_dims", tuple(int(d) for d in self.gcn_dims))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["input_hw"] = list(self.backbone.input_hw)
        d["gcn_dims"] = list(self.gcn_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = dict(d.pop("backbone"))
        bb["input_hw"] = tuple(bb["input_hw"])
        return cls(backbone=BackboneConfig(**bb), **d)


@dataclass
class MerGcnModel:
    config: ModelConfig
    backbone: BackboneModel
    head_weight: Parameter
    head_bias: Parameter
    gcn: Optional[GcnStack] = None
    adjacency: Optional[AdjacencyMatrix] = None
    class_names: tuple[str, ...] = ()
    seed: int = 0

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def vocab(self) -> Optional[AuVocabulary]:
        return None if self.adjacency is None else self.adjacency.vocab

    def parameters(self) -> list[Parameter]:
        params = self.backbone.parameters()
        if self.gcn is not None:
            params += self.gcn.parameters()
        return params + [self.head_weight, self.head_bias]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    class_id: int
    au_scores: Optional[np.ndarray]


def build_model(
    config: ModelConfig,
    adjacency: Optional[AdjacencyMatrix] = None,
    seed: int = 0,
    class_names: Optional[Sequence[str]] = None,
) -> MerGcnModel:
    rng = np.random.default_rng(seed)
    backbone = build_backbone(config.backbone, rng)
    gcn = None
    if config.variant == MER_GCN:
        if adjacency is None:
            raise ModelError("the mer-gcn variant needs an adjacency matrix")
        gcn = build_gcn_stack(adjacency.n, rng, config.gcn_dims, config.backbone.width_scale, config.gcn_slope)
        if gcn.dims[-1] != backbone.feature_dim:
            raise ModelError(
                f"gcn output dim {gcn.dims[-1]} must equal backbone feature dim {backbone.feature_dim}"
            )
        head_in = adjacency.n
    else:
        adjacency = None
        head_in = backbone.feature_dim
    head_w = Parameter.from_array("head.weight", rng.standard_normal((config.n_classes, head_in)) * config.head_init_std)
    head_b = Parameter.from_array("head.bias", np.zeros(config.n_classes))
    if class_names is None:
        class_names = default_class_names(config.n_classes)
    if len(class_names) != config.n_classes:
        raise ModelError(f"{len(class_names)} class names given for {config.n_classes} classes")
    model = MerGcnModel(config, backbone, head_w, head_b, gcn, adjacency, tuple(class_names), seed)
    names = [p.name for p in model.parameters()]
    if len(set(names)) != len(names):
        raise ModelError("duplicate parameter names")
    return model


def default_class_names(n_classes: int) -> tuple[str, ...]:
    names = list(DEFAULT_CLASS_NAMES[:n_classes])
    names += [f"class{k}" for k in range(len(names), n_classes)]
    return tuple(names)


def fuse(h_last: Tensor, feature: Tensor) -> Tensor:
    """Per-AU dot products ``h_last @ feature``."""
    if h_last.ndim != 2 or feature.ndim != 1 or h_last.shape[1] != feature.shape[0]:
        raise ShapeError(f"fuse: embeddings {h_last.shape} and feature {feature.shape} do not agree")
    f = feature.shape[0]
    return reshape(matmul(h_last, reshape(feature, (f, 1))), (h_last.shape[0],))


def _forward(model: MerGcnModel, seq: Tensor) -> tuple[Tensor, Optional[Tensor]]:
    feature = backbone_forward(model.backbone, seq)
    if model.gcn is None:
        return linear(feature, model.head_weight.value, model.head_bias.value), None
    h_last = gcn_stack_forward(model.adjacency, model.gcn)
    scores = fuse(h_last, feature)
    return linear(scores, model.head_weight.value, model.head_bias.value), scores


def model_logits(model: MerGcnModel, seq: Tensor) -> Tensor:
    return _forward(model, seq)[0]


def model_forward(model: MerGcnModel, seq: Tensor) -> Prediction:
    logits, scores = _forward(model, seq)
    z = logits.numpy()
    return Prediction(z, softmax(z), int(np.argmax(z)), None if scores is None else scores.numpy())


def model_loss(model: MerGcnModel, seq: Tensor, label: int, weight: float = 1.0) -> Tensor:
    if not 0 <= int(label) < model.n_classes:
        raise ModelError(f"label {label} out of range for {model.n_classes} classes")
    return softmax_cross_entropy(model_logits(model, seq), int(label), weight)


def predict(model: MerGcnModel, seq: Tensor) -> int:
    return decode_logits(model_logits(model, seq).data)


def decode_logits(logits) -> int:
    """Index of the maximal logit; ties go to the smallest index."""
    return int(np.argmax(np.asarray(logits)))


# ---------------------------------------------------------------------------
# checkpoints


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(path, model: MerGcnModel, extra: Optional[dict] = None) -> None:
    entries = {p.name: p.value.data for p in model.parameters()}
    if model.adjacency is not None:
        entries["graph.adjacency"] = model.adjacency.a
        entries["graph.counts"] = model.adjacency.counts.astype(float)
        entries["graph.pair_counts"] = model.adjacency.pair_counts.astype(float)
    container.save(path, entries)
    meta = {
        "config": model.config.to_dict(),
        "vocabulary": list(model.vocab.ids) if model.vocab is not None else [],
        "class_names": list(model.class_names),
        "seed": model.seed,
        "init": INIT_SCHEME,
    }
    if extra:
        meta["extra"] = extra
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> MerGcnModel:
    entries = container.load(path)
    meta = json.loads(sidecar_path(path).read_text())
    config = ModelConfig.from_dict(meta["config"])
    adjacency = None
    if config.variant == MER_GCN:
        if "graph.adjacency" not in entries:
            raise ModelError("checkpoint lacks graph.adjacency")
        vocab = AuVocabulary(tuple(meta["vocabulary"]))
        adjacency = AdjacencyMatrix(
            vocab,
            _readonly(entries.pop("graph.adjacency")),
            _readonly(entries.pop("graph.counts").astype(np.int64)),
            _readonly(entries.pop("graph.pair_counts").astype(np.int64)),
        )
        if adjacency.a.shape != (vocab.n, vocab.n):
            raise ModelError(f"adjacency shape {adjacency.a.shape} does not match vocabulary size {vocab.n}")
    model = build_model(config, adjacency, meta.get("seed", 0), meta["class_names"])
    params = model.named_parameters()
    missing = sorted(set(params) - set(entries))
    unexpected = sorted(set(entries) - set(params))
    if missing or unexpected:
        raise ModelError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
    for name, prm in params.items():
        if entries[name].shape != prm.shape:
            raise ModelError(f"{name}: checkpoint shape {entries[name].shape} != model shape {prm.shape}")
        prm.value.data[...] = entries[name]
    return model


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr
