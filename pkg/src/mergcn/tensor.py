"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
which is how inference runs.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(mul(x, x))
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

# Above this many float64 entries an im2col buffer is rebuilt per temporal
# chunk instead of being held for the backward pass.
COLS_BUDGET = 16_000_000


class TensorError(ValueError):
    """Base class for tensor-engine errors."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError, ArithmeticError):
    pass


class GradientError(TensorError):
    pass


class Tensor:
    """Row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} holds non-finite values")
        if not requires_grad:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs; skips the defensive copy.
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite values")
        if not requires_grad:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class Parameter:
    """A named trainable tensor plus its SGD momentum buffer."""

    name: str
    value: Tensor
    momentum_buffer: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.value.requires_grad:
            raise TensorError(f"parameter {self.name!r} must require grad")

    @classmethod
    def from_array(cls, name: str, arr) -> "Parameter":
        return cls(name, Tensor(arr, requires_grad=True, name=name))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_active: contextvars.ContextVar[tuple["Tape", ...]] = contextvars.ContextVar(
    "mergcn_active_tapes", default=()
)


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._token = _active.set(_active.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Optional[Tape]:
    stack = _active.get()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, rule) -> Tensor:
    tape = _current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, result, rule))
    return result


# Debug hook used by gradient-check negative controls.
_FAULTS: set[str] = set()


@contextlib.contextmanager
def planted_fault(op: str) -> Iterator[None]:
    """Temporarily corrupt the backward rule of ``op`` (``"matmul"`` only)."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


# While a probe list is active, leaky_relu appends the sign pattern of its
# input; finite-difference checks use it to spot kink crossings.
_KINK_PROBE: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar("kink_probe", default=None)


@contextlib.contextmanager
def kink_probe() -> Iterator[list]:
    masks: list = []
    token = _KINK_PROBE.set(masks)
    try:
        yield masks
    finally:
        _KINK_PROBE.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, g.item()),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise TensorError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    positive = x.data > 0
    probe = _KINK_PROBE.get()
    if probe is not None:
        probe.append(np.packbits(positive))
    factor = np.where(positive, 1.0, slope)
    return _emit("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        gb = ad.T @ g
        if "matmul" in _FAULTS:
            gb = 2.0 * gb
        return g @ bd.T, gb

    return _emit("matmul", (a, b), ad @ bd, rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``w @ x + b`` for a single feature vector."""
    if x.ndim != 1 or w.ndim != 2 or b.ndim != 1 or w.shape != (b.shape[0], x.shape[0]):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not agree")
    xd, wd = x.data, w.data
    return _emit("linear", (x, w, b), wd @ xd + b.data, lambda g: (wd.T @ g, np.outer(g, xd), g))


def global_avg_pool3d(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool3d expects C x T x H x W, got {x.shape}")
    shape = x.shape
    count = shape[1] * shape[2] * shape[3]

    def rule(g):
        return (np.broadcast_to((g / count)[:, None, None, None], shape).copy(),)

    return _emit("global_avg_pool3d", (x,), x.data.mean(axis=(1, 2, 3)), rule)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel ``gamma * x + beta`` over a C x T x H x W map."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_affine: {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd, gd = x.data, gamma.data
    out = xd * gd[:, None, None, None] + beta.data[:, None, None, None]

    def rule(g):
        return g * gd[:, None, None, None], (g * xd).sum(axis=(1, 2, 3)), g.sum(axis=(1, 2, 3))

    return _emit("channel_affine", (x, gamma, beta), out, rule)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_cross_entropy(logits: Tensor, target: int, weight: float = 1.0) -> Tensor:
    """Stabilized ``-log softmax(logits)[target]``, optionally scaled by ``weight``."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects a logit vector, got {logits.shape}")
    n = logits.shape[0]
    if not (0 <= int(target) < n) or int(target) != target:
        raise TensorError(f"target {target} out of range for {n} classes")
    target = int(target)
    z = logits.data
    m = z.max()
    s = np.exp(z - m).sum()
    # Split so each term is non-negative: m >= z[target] and s >= 1.
    loss = (m - z[target]) + np.log(s)

    def rule(g):
        grad = np.exp(z - m) / s
        grad[target] -= 1.0
        return (grad * (g.item() * weight),)

    return _emit("softmax_cross_entropy", (logits,), np.array(loss * weight), rule)


# ---------------------------------------------------------------------------
# 3D convolution (im2col cross-correlation)


def conv3d_output_shape(
    in_shape: Sequence[int], kernel: Sequence[int], stride: Sequence[int], padding: Sequence[int]
) -> tuple[int, int, int]:
    out = []
    for axis, n, k, s, p in zip("THW", in_shape, kernel, stride, padding):
        m = (n + 2 * p - k) // s + 1
        if m < 1:
            raise ShapeError(
                f"conv3d: non-positive output size {m} on axis {axis} "
                f"(size {n}, kernel {k}, stride {s}, padding {p})"
            )
        out.append(m)
    return tuple(out)


def _fill_cols(xp, k, s, t0, t1, hw, cols):
    kt, kh, kw = k
    st, sh, sw = s
    ho, wo = hw
    for a in range(kt):
        ts = slice(a + st * t0, a + st * (t1 - 1) + 1, st)
        for b in range(kh):
            hs = slice(b, b + sh * (ho - 1) + 1, sh)
            for c in range(kw):
                cols[:, a, b, c] = xp[:, ts, hs, slice(c, c + sw * (wo - 1) + 1, sw)]


def _scatter_cols(dcols, k, s, t0, t1, hw, dxp):
    kt, kh, kw = k
    st, sh, sw = s
    ho, wo = hw
    for a in range(kt):
        ts = slice(a + st * t0, a + st * (t1 - 1) + 1, st)
        for b in range(kh):
            hs = slice(b, b + sh * (ho - 1) + 1, sh)
            for c in range(kw):
                dxp[:, ts, hs, slice(c, c + sw * (wo - 1) + 1, sw)] += dcols[:, a, b, c]


def _correlate(xd: np.ndarray, w: np.ndarray, s, p):
    """Forward cross-correlation; returns output, padded input, spans and cached columns."""
    c_in = xd.shape[0]
    c_out = w.shape[0]
    k = tuple(w.shape[2:])
    to, ho, wo = conv3d_output_shape(xd.shape[1:], k, s, p)
    xp = np.pad(xd, ((0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    w2 = w.reshape(c_out, -1)
    plane = c_in * k[0] * k[1] * k[2] * ho * wo
    chunk = max(1, min(to, COLS_BUDGET // max(plane, 1)))
    spans = [(t0, min(to, t0 + chunk)) for t0 in range(0, to, chunk)]
    out = np.empty((c_out, to, ho * wo))
    cached = None
    for t0, t1 in spans:
        cols = np.empty((c_in,) + k + (t1 - t0, ho, wo))
        _fill_cols(xp, k, s, t0, t1, (ho, wo), cols)
        cols = cols.reshape(w2.shape[1], -1)
        out[:, t0:t1] = (w2 @ cols).reshape(c_out, t1 - t0, ho * wo)
        if len(spans) == 1:
            cached = cols
    return out.reshape(c_out, to, ho, wo), xp, spans, cached


def conv3d(
    x: Tensor,
    kernel: Tensor,
    stride: Sequence[int] = (1, 1, 1),
    padding: Sequence[int] = (0, 0, 0),
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Space-time cross-correlation of a C_in x T x H x W map."""
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    c_in = x.shape[0]
    c_out, k_in = kernel.shape[:2]
    if k_in != c_in:
        raise ShapeError(f"conv3d: kernel expects {k_in} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    k = tuple(kernel.shape[2:])
    s = tuple(int(v) for v in stride)
    p = tuple(int(v) for v in padding)

    out, xp, spans, cached = _correlate(x.data, kernel.data, s, p)
    to, ho, wo = out.shape[1:]
    if bias is not None:
        out += bias.data[:, None, None, None]

    need_dx = x.requires_grad
    w2 = kernel.data.reshape(c_out, -1)
    # With unit stride the input gradient is a correlation of the padded
    # output gradient with the flipped, channel-transposed kernel.
    as_correlation = s == (1, 1, 1) and all(kk - 1 - pp >= 0 for kk, pp in zip(k, p))

    def rule(g):
        dw = np.zeros_like(w2)
        dxp = np.zeros_like(xp) if need_dx and not as_correlation else None
        for t0, t1 in spans:
            gc = g[:, t0:t1].reshape(c_out, -1)
            if cached is not None:
                cols = cached
            else:
                cols = np.empty((c_in,) + k + (t1 - t0, ho, wo))
                _fill_cols(xp, k, s, t0, t1, (ho, wo), cols)
                cols = cols.reshape(w2.shape[1], -1)
            dw += gc @ cols.T
            if dxp is not None:
                dcols = (w2.T @ gc).reshape((c_in,) + k + (t1 - t0, ho, wo))
                _scatter_cols(dcols, k, s, t0, t1, (ho, wo), dxp)
        dx = None
        if need_dx and as_correlation:
            flipped = kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            dx = _correlate(g, np.ascontiguousarray(flipped), (1, 1, 1), tuple(kk - 1 - pp for kk, pp in zip(k, p)))[0]
        elif need_dx:
            dx = dxp[:, p[0] : p[0] + x.shape[1], p[1] : p[1] + x.shape[2], p[2] : p[2] + x.shape[3]]
        grads = [dx, dw.reshape(kernel.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv3d", inputs, out, rule)


# ---------------------------------------------------------------------------
# backward pass and optimisation


def backward(loss: Tensor, tape: Tape, params: Iterable[Parameter] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Leaves recorded on ``tape`` (and any ``params``) that the loss does not
    depend on receive an all-zero gradient.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if loss.requires_grad and id(loss) not in produced:
        raise GradientError("loss was not recorded on the given tape")

    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for prm in params:
        leaves.setdefault(id(prm.value), prm.value)
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    if id(loss) in leaves:
        loss.grad += 1.0
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = np.asarray(gi, dtype=DTYPE).reshape(inp.shape)
            else:
                inp.grad += np.asarray(gi).reshape(inp.shape)


def zero_grads(params: Iterable[Parameter]) -> None:
    for prm in params:
        prm.value.zero_grad()


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for prm in params:
        if prm.grad is not None:
            total += float(np.sum(prm.grad * prm.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for prm in params:
            if prm.grad is not None:
                prm.value.grad = prm.grad * factor
    return norm


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0) -> None:
    """``v = momentum * v + grad; value -= lr * v``, then zero the gradients."""
    if lr <= 0:
        raise TensorError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise TensorError(f"momentum must lie in [0, 1), got {momentum}")
    for prm in params:
        if prm.grad is None:
            raise GradientError(f"parameter {prm.name!r} has no gradient")
    for prm in params:
        if prm.momentum_buffer is None:
            prm.momentum_buffer = np.zeros_like(prm.value.data)
        prm.momentum_buffer *= momentum
        prm.momentum_buffer += prm.grad
        prm.value.data -= lr * prm.momentum_buffer
        if not np.all(np.isfinite(prm.value.data)):
            raise NonFiniteError(f"parameter {prm.name!r} became non-finite")
        prm.value.zero_grad()


# ---------------------------------------------------------------------------
# initialisation


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))
