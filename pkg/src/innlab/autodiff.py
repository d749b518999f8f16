"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the thread-local tape.
``backward`` replays the tape in reverse, so the graph is re-recorded on
every forward pass (the attack loop relies on this).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    LabelError,
    NonFiniteError,
)

DTYPE = np.float32


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A float32 array plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dt(), copy=True, order="C")
        _check_finite(arr, "Tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        # internal constructor: no copy
        arr = np.asarray(arr, dtype=_dt())
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        _check_finite(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.shape))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(shape, x, dtype=_dt()))
    return Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputationTape:
    """Ordered record of the operations executed while it was active."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputationTape":
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _local.stack.pop()
        assert popped is self


class _Local(threading.local):
    def __init__(self) -> None:
        self.stack: list[ComputationTape] = [ComputationTape()]
        self.grad_enabled = True
        self.dtype = DTYPE
        self.regions: list[np.ndarray] | None = None


_local = _Local()


def _dt():
    return _local.dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Evaluate ops created in this block at ``dtype`` (float32 outside it)."""
    prev = _local.dtype
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextmanager
def record_regions() -> Iterator[list[np.ndarray]]:
    """Collect the relu sign masks and maxpool argmaxes of every op run inside.

    Together they identify the linear piece of a piecewise-linear function
    that the evaluation landed on.
    """
    prev = _local.regions
    _local.regions = []
    try:
        yield _local.regions
    finally:
        _local.regions = prev


def current_tape() -> ComputationTape:
    return _local.stack[-1]


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    track = _local.grad_enabled and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track, op)
    if track:
        current_tape().record(Node(op, inputs, result, backward_fn))
    return result


def backward(loss: Tensor, tape: ComputationTape | None = None) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; the tape is cleared afterwards.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = current_tape() if tape is None else tape
    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones((), dtype=loss.data.dtype))
    }
    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        g = entry[1]
        node.output.grad = g
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.data.dtype)
            _check_finite(ig, f"backward of {node.op}")
            prev = pending.get(id(inp))
            pending[id(inp)] = (inp, ig if prev is None else prev[1] + ig)
    for t, g in pending.values():
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    cc = _dt()(c)
    return _emit("scale", a.data * cc, (a,), lambda g: (g * cc,))


def shift_divide(a: Tensor, offset: np.ndarray, divisor: float) -> Tensor:
    """(a + offset) / divisor with a constant offset array."""
    offset = np.asarray(offset, dtype=a.data.dtype)
    if offset.shape != a.shape:
        raise DimensionError(f"shift_divide: offset {offset.shape} != input {a.shape}")
    d = a.data.dtype.type(divisor)
    return _emit("shift_divide", (a.data + offset) / d, (a,), lambda g: (g / d,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(
        "sum",
        np.asarray(a.data.sum(dtype=_dt())),
        (a,),
        lambda g: (np.full(shape, g, dtype=g.dtype),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def masked_fill(a: Tensor, mask: np.ndarray, values: np.ndarray) -> Tensor:
    """Replace entries where ``mask`` is true; replaced entries get zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        mask = np.broadcast_to(mask, a.shape)
    values = np.broadcast_to(np.asarray(values, dtype=a.data.dtype), a.shape)
    out = np.where(mask, values, a.data)
    return _emit("masked_fill", out, (a,), lambda g: (np.where(mask, g.dtype.type(0), g),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    if _local.regions is not None:
        _local.regions.append(pos)
    return _emit("relu", np.where(pos, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [F,C,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input channels (axis 1) {c} != kernel channels (axis 1) {kc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},) for kernel axis 0")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride {stride} / padding {padding} invalid")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} (axes 2,3) exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # channel-major layout keeps every im2col copy a run of contiguous rows
    xt = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
    xt[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3) + bias.data.reshape(1, f, 1, 1)

    def grad_fn(g):
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gw = (gt @ cols.T).reshape(f, c, kh, kw) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros_like(xt)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, i, j]
            gx = gxt[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _emit("conv2d", out, (x, kernel, bias), grad_fn)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise DimensionError(f"maxpool2d: H={h} (axis 2) / W={w} (axis 3) not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = (
        x.data.reshape(n, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, window * window)
    )
    arg = blocks.argmax(axis=-1)  # first occurrence on ties
    if _local.regions is not None:
        _local.regions.append(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros((n, c, ho, wo, window * window), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, ho, wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _emit("maxpool2d", out, (x,), grad_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"dense: expected [N,D] x [D,M], got {x.shape} x {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense: input axis 1 ({x.shape[1]}) != weight axis 0 ({weight.shape[0]})"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def grad_fn(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _emit("dense", out, (x, weight, bias), grad_fn)


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes}): min {labels.min()}, max {labels.max()}")
    return labels.astype(np.int64)


def _log_softmax(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    return logp, np.exp(logp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [N,L], got {logits.shape}")
    n, num = logits.shape
    labels = _check_labels(labels, n, num)
    logp, p = _log_softmax(logits.data)
    rows = np.arange(n)
    dt = _dt()
    loss = -logp[rows, labels].sum(dtype=dt) / dt(max(n, 1))

    def grad_fn(g):
        d = p.copy()
        d[rows, labels] -= 1
        return (d * (g / g.dtype.type(n)),)

    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), grad_fn)


def marginal_cross_entropy(logits: Tensor, base_labels, k: int) -> Tensor:
    """Mean of -log sum_j P(composite (c, j)) over the batch.

    Composite columns are laid out class-major: column ``c*k + j``.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"marginal_cross_entropy: logits must be [N,L], got {logits.shape}")
    n, width = logits.shape
    if k < 1 or width % k:
        raise DimensionError(f"marginal_cross_entropy: width {width} (axis 1) not divisible by K={k}")
    base_labels = _check_labels(base_labels, n, width // k)
    logp, p = _log_softmax(logits.data)
    rows = np.arange(n)
    group = logp.reshape(n, width // k, k)[rows, base_labels]  # [N, K]
    gmax = group.max(axis=1, keepdims=True)
    log_pc = (gmax + np.log(np.exp(group - gmax).sum(axis=1, keepdims=True)))[:, 0]
    dt = _dt()
    loss = -log_pc.sum(dtype=dt) / dt(max(n, 1))

    def grad_fn(g):
        d = p.copy().reshape(n, width // k, k)
        q = np.exp(group - log_pc[:, None])  # within-group posterior
        d[rows, base_labels] -= q
        return (d.reshape(n, width) * (g / g.dtype.type(n)),)

    return _emit("marginal_cross_entropy", np.asarray(loss), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class SgdState:
    velocity: list[np.ndarray]
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "SgdState":
        return cls([np.zeros_like(p.data) for p in params], **kw)

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be non-negative, got {self.learning_rate}")


def sgd_momentum_step(params: Sequence[Tensor], state: SgdState) -> None:
    """v <- m*v + grad + wd*param; param <- param - lr*v; then clear grads."""
    if len(params) != len(state.velocity):
        raise ContractError(f"{len(params)} params but {len(state.velocity)} velocity buffers")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i} has no gradient")
        if state.velocity[i].shape != p.shape:
            raise ContractError(f"velocity {i} shape {state.velocity[i].shape} != param {p.shape}")
    m, wd, lr = DTYPE(state.momentum), DTYPE(state.weight_decay), DTYPE(state.learning_rate)
    for p, v in zip(params, state.velocity):
        v *= m
        v += p.grad
        v += wd * p.data
        p.data -= lr * v
        _check_finite(p.data, "sgd_momentum_step")
        p.grad = None


# ---------------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    epsilon: float = 1e-3,
    n_coords: int = 24,
    seed: int = 0,
    oracle_dtype=np.float64,
) -> float:
    """Worst relative error between backward gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. The backward pass runs at float32;
    the difference quotients are evaluated at ``oracle_dtype`` so that float32
    rounding of ``f`` does not swamp small gradient coordinates. Coordinates
    are visited in a ``seed``-ed order; those whose +-epsilon stencil leaves
    the linear piece of ``x`` (a relu sign or maxpool argmax changes) are
    skipped, since a difference quotient across a kink measures no derivative.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    base = point.data
    with no_grad():
        f0 = f(Tensor(base)).data
        f1 = f(Tensor(base)).data
    if not np.array_equal(f0, f1):
        raise DeterminismError("f returned different values for identical inputs")

    x = Tensor(base, requires_grad=True)
    with ComputationTape() as tape:
        backward(f(x), tape)
    analytic = x.grad.reshape(-1)

    def evaluate(flat_point):
        with record_regions() as regions:
            value = float(f(Tensor(flat_point.reshape(base.shape))).data)
        return value, regions

    def same_piece(a, b):
        return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))

    rng = np.random.default_rng(seed)
    flat = base.reshape(-1).astype(oracle_dtype)
    worst, used = 0.0, 0
    with no_grad(), precision(oracle_dtype):
        _, home = evaluate(flat)
        for i in rng.permutation(base.size):
            if used == n_coords:
                break
            xp, xm = flat.copy(), flat.copy()
            xp[i] += epsilon
            xm[i] -= epsilon
            fp, rp = evaluate(xp)
            fm, rm = evaluate(xm)
            if not (same_piece(rp, home) and same_piece(rm, home)):
                continue  # stencil straddles a relu/maxpool kink; differences are not an oracle there
            used += 1
            numeric = (fp - fm) / (float(xp[i]) - float(xm[i]))
            a = float(analytic[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    if used == 0:
        raise ContractError("every sampled coordinate straddles a non-differentiable point")
    return worst
