"""Dense float64 tensors and tape-based reverse-mode differentiation.

Every differentiable operation is a module-level function that computes its
forward value with numpy and, when a GradTape is active, records a node whose
closure produces the input gradients from the output gradient.  Nodes are
appended in execution order, so the tape is topologically sorted by
construction and ``backward`` is a single reverse sweep.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError


class Tensor:
    """A dense float64 array that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


class TapeNode:
    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 grad_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class GradTape:
    """Ordered record of primitive applications.

    Usable as a context manager; while active, every op whose output requires
    gradients appends one node.  Execution order guarantees every node's
    inputs precede it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "mismatched GradTape nesting"


_TAPE_LOCAL = threading.local()  # recording is per-thread; training steps stay single-writer


def _tape_stack() -> list:
    stack = getattr(_TAPE_LOCAL, "stack", None)
    if stack is None:
        stack = _TAPE_LOCAL.stack = []
    return stack


def _active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(inputs: Sequence[Tensor], out_data: np.ndarray,
          grad_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(TapeNode(tuple(inputs), out, grad_fn))
    return out


def backward(tape: GradTape, root: Tensor, seed: np.ndarray | float | None = None,
             params: Iterable[Tensor] | None = None) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from root.

    ``root`` must be scalar unless an explicit ``seed`` gradient of the same
    shape is given.  Tensors listed in ``params`` that lie off every path get
    exact-zero gradients.
    """
    if seed is None:
        if root.size != 1:
            raise DimensionError("non-scalar backward root requires an explicit seed gradient")
        seed_arr = np.ones_like(root.data)
    else:
        seed_arr = np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != root.data.shape:
            raise DimensionError(
                f"seed shape {seed_arr.shape} does not match root shape {root.data.shape}")

    flowing: dict[int, np.ndarray] = {id(root): seed_arr}
    touched: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad:
                touched[id(t)] = t
        g_out = flowing.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.grad_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            acc = flowing.get(id(t))
            flowing[id(t)] = g if acc is None else acc + g

    for t in touched.values():
        if t is root:
            continue
        g = flowing.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)
    if root.requires_grad:
        root.grad = seed_arr.copy()
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make([a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make([a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make([a, b], ad * bd, lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make([a], a.data + c, lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make([a], a.data * c, lambda g: (g * c,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.data.shape:
        raise DimensionError(f"mul_const: shape mismatch {a.data.shape} vs {c.shape}")
    return _make([a], a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make([a], np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return _make([a], a.data * keep, lambda g: (g * keep,))


def abs_op(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make([a], np.abs(a.data), lambda g: (g * s,))


def exp_op(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make([a], out, lambda g: (g * out,))


def log_op(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericalError("log of non-positive value")
    ad = a.data
    return _make([a], np.log(ad), lambda g: (g / ad,))


def matmul_const(a: Tensor, m: np.ndarray) -> Tensor:
    """a @ m for a constant (non-trainable) matrix m over the last axis."""
    m = np.asarray(m, dtype=np.float64)
    if a.data.shape[-1] != m.shape[0]:
        raise DimensionError(f"matmul_const: {a.data.shape} @ {m.shape}")
    return _make([a], a.data @ m, lambda g: (g @ m.T,))


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T for 2-D tensors (M,F) x (K,F) -> (M,K)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"matmul_t: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _make([a, b], ad @ bd.T, lambda g: (g @ bd, g.T @ ad))


def normalize_rows(a: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise DimensionError("normalize_rows expects a 2-D tensor")
    norms = np.linalg.norm(a.data, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise NumericalError(f"zero-norm rows at indices {bad.tolist()}")
    inv = 1.0 / norms
    out = a.data * inv[:, None]

    def grad_fn(g):
        # d(x/|x|) = (g - x_hat (g . x_hat)) / |x|, rowwise
        dots = np.einsum("mf,mf->m", g, out)
        return ((g - out * dots[:, None]) * inv[:, None],)

    return _make([a], out, grad_fn)


def sum_axis(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape
    if axis is None:
        return _make([a], np.asarray(a.data.sum()),
                     lambda g: (np.broadcast_to(np.asarray(g, dtype=np.float64), shape).copy(),))
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make([a], out, grad_fn)


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.data.shape[0]:
        raise DimensionError(f"take_rows [{start}:{stop}] out of range for {a.data.shape}")
    shape = a.data.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make([a], a.data[start:stop].copy(), grad_fn)


def take_axis1(a: Tensor, index: int) -> Tensor:
    """Select one slice along axis 1, dropping that axis."""
    if a.data.ndim < 2 or not 0 <= index < a.data.shape[1]:
        raise DimensionError(f"take_axis1 index {index} out of range for {a.data.shape}")
    shape = a.data.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[:, index] = g
        return (full,)

    return _make([a], a.data[:, index].copy(), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _make([a], a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose_12(a: Tensor) -> Tensor:
    """Swap axes 1 and 2 of a 3-D tensor."""
    if a.data.ndim != 3:
        raise DimensionError("transpose_12 expects a 3-D tensor")
    return _make([a], np.ascontiguousarray(a.data.transpose(0, 2, 1)),
                 lambda g: (np.ascontiguousarray(g.transpose(0, 2, 1)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1]).tolist()

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(list(tensors), np.concatenate([t.data for t in tensors], axis=axis), grad_fn)


def detach(a: Tensor) -> Tensor:
    """A gradient-free copy; nothing recorded, no gradient ever flows back."""
    return Tensor(a.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _conv_out_len(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d_grouped(x: Tensor, weight: Tensor, bias: Tensor,
                   stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 1-D convolution: (B,C_in,L) -> (B,C_out,L_out).

    weight is (C_out, C_in/groups, k); output channel block g sees only input
    channel block g.
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(f"conv1d_grouped: input {x.data.shape}, weight {weight.data.shape}")
    B, c_in, length = x.data.shape
    c_out, cpg, k = weight.data.shape
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv1d_grouped: stride {stride}, padding {padding}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"conv1d_grouped: groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if cpg != c_in // groups:
        raise DimensionError(f"conv1d_grouped: weight expects {cpg} channels/group, input has {c_in // groups}")
    if bias.data.shape != (c_out,):
        raise DimensionError(f"conv1d_grouped: bias shape {bias.data.shape} != ({c_out},)")
    if length + 2 * padding < k:
        raise DimensionError(f"conv1d_grouped: kernel {k} exceeds padded length {length + 2 * padding}")

    l_out = _conv_out_len(length, k, stride, padding)
    opg = c_out // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    idx = stride * np.arange(l_out)[:, None] + np.arange(k)[None, :]
    # columns laid out (groups, B*l_out, cpg*k) so the contraction is one
    # batched BLAS matmul per call instead of a generic einsum loop
    win = (xp[:, :, idx]
           .reshape(B, groups, cpg, l_out, k)
           .transpose(1, 0, 3, 2, 4)
           .reshape(groups, B * l_out, cpg * k))
    w_cols = weight.data.reshape(groups, opg, cpg * k)
    out = np.matmul(win, w_cols.transpose(0, 2, 1))          # (g, B*l_out, opg)
    out = np.ascontiguousarray(
        out.reshape(groups, B, l_out, opg).transpose(1, 0, 3, 2)
    ).reshape(B, c_out, l_out)
    out += bias.data[None, :, None]

    def grad_fn(g):
        go = (g.reshape(B, groups, opg, l_out)
              .transpose(1, 0, 3, 2)
              .reshape(groups, B * l_out, opg))
        g_w = np.matmul(go.transpose(0, 2, 1), win).reshape(c_out, cpg, k)
        g_b = g.sum(axis=(0, 2))
        g_win = (np.matmul(go, w_cols)
                 .reshape(groups, B, l_out, cpg, k)
                 .transpose(1, 0, 3, 2, 4)
                 .reshape(B, c_in, l_out, k))
        g_xp = np.zeros_like(xp)
        for j in range(k):
            g_xp[:, :, j:j + stride * (l_out - 1) + 1:stride] += g_win[:, :, :, j]
        g_x = g_xp[:, :, padding:padding + length] if padding else g_xp
        return (np.ascontiguousarray(g_x), g_w, g_b)

    return _make([x, weight, bias], out, grad_fn)


def maxpool1d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling over 1-D windows; gradient routes to the first argmax."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool1d: input {x.data.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"maxpool1d: k={k}, stride={stride}, padding={padding}")
    if padding >= k:
        raise ConfigError(f"maxpool1d: padding {padding} must be < kernel {k}")
    B, C, length = x.data.shape
    if length + 2 * padding < k:
        raise DimensionError(f"maxpool1d: window {k} exceeds padded length {length + 2 * padding}")

    l_out = _conv_out_len(length, k, stride, padding)
    if padding:
        xp = np.full((B, C, length + 2 * padding), -np.inf)
        xp[:, :, padding:padding + length] = x.data
    else:
        xp = x.data
    idx = stride * np.arange(l_out)[:, None] + np.arange(k)[None, :]
    win = xp[:, :, idx]
    amax = win.argmax(axis=3)
    out = np.take_along_axis(win, amax[..., None], axis=3)[..., 0]

    def grad_fn(g):
        g_xp = np.zeros((B, C, length + 2 * padding))
        for j in range(k):
            m = amax == j
            g_xp[:, :, j:j + stride * (l_out - 1) + 1:stride][m] += g[m]
        return (np.ascontiguousarray(g_xp[:, :, padding:padding + length]) if padding else g_xp,)

    return _make([x], out, grad_fn)


def channel_upsample(x: Tensor, factor: int, groups: int = 1) -> Tensor:
    """Repeat each channel ``factor`` times contiguously; group blocks stay contiguous."""
    if x.data.ndim != 3:
        raise DimensionError(f"channel_upsample: input {x.data.shape}")
    if factor < 1:
        raise ConfigError(f"channel_upsample: factor {factor} must be >= 1")
    B, C, length = x.data.shape
    if groups < 1 or C % groups:
        raise ConfigError(f"channel_upsample: groups={groups} must divide C={C}")
    if factor == 1:
        return _make([x], x.data.copy(), lambda g: (g,))
    out = np.repeat(x.data, factor, axis=1)

    def grad_fn(g):
        return (g.reshape(B, C, factor, length).sum(axis=2),)

    return _make([x], out, grad_fn)


def linear_grouped(x: Tensor, weight: Tensor, bias: Tensor, groups: int = 1) -> Tensor:
    """Grouped affine map: (B,F) -> (B,F_out), block g of the output reads block g of the input."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear_grouped: input {x.data.shape}, weight {weight.data.shape}")
    B, f_in = x.data.shape
    f_out, fpg = weight.data.shape
    if groups < 1 or f_in % groups or f_out % groups:
        raise ConfigError(f"linear_grouped: groups={groups} must divide F={f_in} and F_out={f_out}")
    if fpg != f_in // groups:
        raise DimensionError(f"linear_grouped: weight expects {fpg} features/group, input has {f_in // groups}")
    if bias.data.shape != (f_out,):
        raise DimensionError(f"linear_grouped: bias shape {bias.data.shape} != ({f_out},)")

    opg = f_out // groups
    xg = np.ascontiguousarray(x.data.reshape(B, groups, fpg).transpose(1, 0, 2))
    wg = weight.data.reshape(groups, opg, fpg)
    out = np.matmul(xg, wg.transpose(0, 2, 1))               # (g, B, opg)
    out = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(B, f_out) + bias.data

    def grad_fn(g):
        go = np.ascontiguousarray(g.reshape(B, groups, opg).transpose(1, 0, 2))
        g_w = np.matmul(go.transpose(0, 2, 1), xg).reshape(f_out, fpg)
        g_x = np.ascontiguousarray(
            np.matmul(go, wg).transpose(1, 0, 2)).reshape(B, f_in)
        return (g_x, g_w, g.sum(axis=0))

    return _make([x, weight, bias], out, grad_fn)


def mse_per_variate(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Per-variate mean squared error of a (B, L_out, N) prediction -> (N,)."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.data.shape != truth.shape:
        raise DimensionError(f"mse_per_variate: {pred.data.shape} vs {truth.shape}")
    if pred.data.ndim != 3:
        raise DimensionError("mse_per_variate expects (B, L_out, N)")
    diff = pred.data - truth
    denom = diff.shape[0] * diff.shape[1]
    out = np.einsum("bln,bln->n", diff, diff) / denom

    def grad_fn(g):
        return (diff * (2.0 * g[None, None, :] / denom),)

    return _make([pred], out, grad_fn)
