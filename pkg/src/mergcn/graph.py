"""AU co-occurrence graph and the stacked graph convolution over AU nodes.

Node features are kept node-major: ``H`` is ``n x d`` and a layer computes
``leaky_relu(A @ H @ W)``, so ``A`` mixes rows (nodes). ``A[i, j]`` is the
conditional probability of AU ``i`` given AU ``j`` over the annotations the
graph was built from, which makes the matrix asymmetric in general.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, glorot_uniform, leaky_relu, matmul

DEFAULT_GCN_DIMS = (1024, 512)
DEFAULT_SLOPE = 0.2


class GraphError(ValueError):
    pass


class ZeroOccurrenceWarning(UserWarning):
    """An AU in the vocabulary never occurs, so its adjacency column is zero."""


@dataclass(frozen=True)
class AuVocabulary:
    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if not ids:
            raise GraphError("AU vocabulary must not be empty")
        if any(i <= 0 for i in ids):
            raise GraphError(f"AU ids must be positive integers, got {ids}")
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise GraphError(f"AU ids must be strictly increasing, got {ids}")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def index(self, au: int) -> int:
        try:
            return self.ids.index(int(au))
        except ValueError:
            raise GraphError(f"AU {au} is not in the vocabulary {list(self.ids)}") from None

    def __len__(self) -> int:
        return len(self.ids)


def build_vocabulary(annotations: Sequence[Iterable[int]]) -> AuVocabulary:
    """Sorted union of every AU id that occurs at least once."""
    if not annotations:
        raise GraphError("cannot build a vocabulary from an empty annotation list")
    seen: set[int] = set()
    for k, ann in enumerate(annotations):
        ann = set(ann)
        if not ann:
            raise GraphError(f"annotation {k} is empty")
        seen |= {int(a) for a in ann}
    return AuVocabulary(tuple(sorted(seen)))


@dataclass(frozen=True)
class AdjacencyMatrix:
    vocab: AuVocabulary
    a: np.ndarray
    counts: np.ndarray
    pair_counts: np.ndarray

    @property
    def n(self) -> int:
        return self.vocab.n

    def zero_columns(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.counts == 0)]

    def as_tensor(self) -> Tensor:
        return Tensor(self.a)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def build_adjacency(
    annotations: Sequence[Iterable[int]], vocab: AuVocabulary, warn: bool = True
) -> AdjacencyMatrix:
    """Co-occurrence conditional probabilities ``A[i, j] = N(i and j) / N(j)``.

    Columns of AUs that never occur are left at zero.
    """
    n = vocab.n
    occur = np.zeros((len(annotations), n), dtype=np.int64)
    pos = {au: k for k, au in enumerate(vocab.ids)}
    for row, ann in enumerate(annotations):
        for au in ann:
            k = pos.get(int(au))
            if k is None:
                raise GraphError(f"annotation {row} contains AU {au}, which is not in the vocabulary")
            occur[row, k] = 1
    pair_counts = occur.T @ occur
    counts = np.diag(pair_counts).copy()
    a = np.zeros((n, n))
    present = counts > 0
    a[:, present] = pair_counts[:, present] / counts[present]
    if warn and not present.all():
        missing = [vocab.ids[j] for j in np.flatnonzero(~present)]
        warnings.warn(
            f"AUs {missing} never occur; their adjacency columns are zero "
            "(consider pruning them from the vocabulary)",
            ZeroOccurrenceWarning,
            stacklevel=2,
        )
    return AdjacencyMatrix(vocab, _freeze(a), _freeze(counts), _freeze(pair_counts))


def reweight_adjacency(
    adj: AdjacencyMatrix, threshold: Optional[float] = None, row_normalize: bool = False
) -> np.ndarray:
    """Optional post-processing variants; both are off in the default model."""
    a = np.array(adj.a, copy=True)
    if threshold is not None:
        a = (a >= threshold).astype(float)
    if row_normalize:
        rows = a.sum(axis=1, keepdims=True)
        a = np.divide(a, rows, out=np.zeros_like(a), where=rows > 0)
    return a


def one_hot_nodes(vocab_or_n: Union[AuVocabulary, int]) -> Tensor:
    n = vocab_or_n.n if isinstance(vocab_or_n, AuVocabulary) else int(vocab_or_n)
    if n < 1:
        raise GraphError(f"need at least one node, got {n}")
    return Tensor(np.eye(n))


def _adjacency_tensor(adj) -> Tensor:
    if isinstance(adj, AdjacencyMatrix):
        return adj.as_tensor()
    if isinstance(adj, Tensor):
        return adj
    return Tensor(adj)


def gcn_layer_forward(h: Tensor, adj, w: Union[Parameter, Tensor], slope: float = DEFAULT_SLOPE) -> Tensor:
    a = _adjacency_tensor(adj)
    wt = w.value if isinstance(w, Parameter) else w
    n = a.shape[0]
    if a.ndim != 2 or a.shape != (n, n) or h.ndim != 2 or h.shape[0] != n or wt.shape[0] != h.shape[1]:
        raise ShapeError(
            f"gcn layer: adjacency {a.shape} (n={n}), features {h.shape}, weight {wt.shape} "
            f"do not agree (need n x d features and d x d' weight)"
        )
    return leaky_relu(matmul(matmul(a, h), wt), slope)


@dataclass
class GcnStack:
    layers: list[Parameter]
    slope: float = DEFAULT_SLOPE

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[0]] + [p.shape[1] for p in self.layers]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Parameter]:
        return list(self.layers)


def scaled_dims(dims: Sequence[int], width_scale: float) -> list[int]:
    return [max(1, int(round(d * width_scale))) for d in dims]


def build_gcn_stack(
    n: int,
    rng: np.random.Generator,
    dims: Sequence[int] = DEFAULT_GCN_DIMS,
    width_scale: float = 1.0,
    slope: float = DEFAULT_SLOPE,
) -> GcnStack:
    out_dims = scaled_dims(dims, width_scale)
    layers = []
    d_in = n
    for ell, d_out in enumerate(out_dims):
        layers.append(Parameter.from_array(f"gcn.layer{ell}.weight", glorot_uniform(rng, d_in, d_out)))
        d_in = d_out
    return GcnStack(layers, slope)


def gcn_stack_forward(adj, stack: GcnStack) -> Tensor:
    """Embedded AU representations: the last hidden layer, ``n x d_last``."""
    a = _adjacency_tensor(adj)
    n = a.shape[0]
    if stack.dims[0] != n:
        raise ShapeError(f"gcn stack expects {stack.dims[0]} input nodes, adjacency has {n}")
    h = one_hot_nodes(n)
    for w in stack.layers:
        h = gcn_layer_forward(h, a, w, stack.slope)
    return h


# ---------------------------------------------------------------------------
# plain-text export


def format_adjacency(adj: AdjacencyMatrix) -> str:
    lines = [f"n {adj.n}", "vocab " + " ".join(str(i) for i in adj.vocab.ids)]
    for row in adj.a:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_adjacency(path, adj: AdjacencyMatrix) -> None:
    Path(path).write_text(format_adjacency(adj))


def parse_adjacency(text: str) -> tuple[AuVocabulary, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        head, n = lines[0].split()
        if head != "n":
            raise ValueError
        n = int(n)
        vocab_line = lines[1].split()
        if vocab_line[0] != "vocab":
            raise ValueError
        vocab = AuVocabulary(tuple(int(v) for v in vocab_line[1:]))
        a = np.array([[float(v) for v in ln.split()] for ln in lines[2 : 2 + n]])
    except (ValueError, IndexError):
        raise GraphError("malformed adjacency export") from None
    if vocab.n != n or a.shape != (n, n):
        raise GraphError(f"adjacency export declares n={n} but holds {a.shape}")
    return vocab, a
