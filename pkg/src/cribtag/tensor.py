"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays do the storage and the
arithmetic, a ``Tape`` records operations in execution order, and
``backward`` replays them once in reverse. Shapes are checked eagerly and
broadcasting is restricted to trailing-dimension addition (bias / positional
tables) plus an explicit ``broadcast_to``; everything else is a
``DimensionError``. float32 is the working precision, float64 exists for
gradient checking.

Typical training-step usage::

    with Tape() as tape:
        probs = model.forward_batch(x)
        loss = bce_loss(probs, targets)
        backward(loss)
    adam_step(params, [p.grad for p in params], state, lr)
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every op output is checked for NaN/Inf (debug mode).
_DEBUG_FINITE_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every operation output."""
    global _DEBUG_FINITE_CHECKS
    _DEBUG_FINITE_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional float array, optionally participating in a gradient tape.

    ``data`` is always a C-contiguous float32 or float64 numpy array.
    ``grad`` is populated by ``backward`` for every tensor with
    ``requires_grad=True`` that the loss depends on.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """A detached copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; the module-level functions hold the real logic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _TapeOp:
    """One recorded operation: output, inputs, and the rule mapping the
    output gradient to per-input gradients."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE_STACK: list = []


class Tape:
    """Records operations in execution order for one reverse pass.

    A tape is confined to a single training step on a single thread; enter
    it as a context manager around the forward pass and call ``backward``
    on the resulting scalar loss before leaving.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, op: _TapeOp) -> None:
        self._ops.append(op)
        self._out_ids.add(id(op.out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``grad`` on every requires-grad tensor the loss
        depends on, visiting each recorded op exactly once in reverse."""
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._out_ids:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self._ops):
            gout = grads.pop(id(op.out), None)
            if gout is None:
                continue
            leaves.pop(id(op.out), None)
            if op.out.requires_grad:
                op.out.grad = gout if op.out.grad is None else op.out.grad + gout
            input_grads = op.backward_fn(gout)
            for t, g in zip(op.inputs, input_grads):
                if g is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
                leaves[id(t)] = t
        for tid, g in grads.items():
            t = leaves[tid]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run the reverse pass for ``loss`` on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward() called with no active tape")
    tape.backward(loss)


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active and any input
    needs gradients."""
    if _DEBUG_FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite values in operation output")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(_TapeOp(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Union[Tensor, float, int]) -> Tensor:
    """Elementwise sum. ``b`` may be a scalar constant, a tensor of the same
    shape, or a tensor whose shape equals a trailing suffix of ``a``'s
    (bias vectors, positional tables); no other broadcasting."""
    if not isinstance(b, Tensor):
        return _finish(a.data + float(b), (a,), lambda g: (g,))
    if a.shape != b.shape:
        k = b.ndim
        if k == 0 or a.ndim < k or a.shape[a.ndim - k:] != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")
        bshape = b.shape

        def bwd(g, bshape=bshape):
            return g, g.sum(axis=tuple(range(g.ndim - len(bshape))))

        return _finish(a.data + b.data, (a, b), bwd)
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Union[Tensor, float, int]) -> Tensor:
    if not isinstance(b, Tensor):
        return _finish(a.data - float(b), (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Union[Tensor, float, int]) -> Tensor:
    """Elementwise product; ``b`` may be a scalar constant."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _finish(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, batched x 2-D (shared right
    operand), and batched x batched with identical leading dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim == 2:
        ad, bd = a.data, b.data

        def bwd_shared(g):
            ga = g @ bd.swapaxes(-1, -2)
            g2 = g.reshape(-1, g.shape[-1])
            a2 = ad.reshape(-1, ad.shape[-1])
            return ga, a2.T @ g2

        return _finish(ad @ bd, (a, b), bwd_shared)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd_batched(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _finish(ad @ bd, (a, b), bwd_batched)


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _finish(np.transpose(a.data, axes), (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}: {e}") from None
    old = a.shape
    return _finish(out, (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic (integer/slice) indexing with gradient scatter-back."""
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _finish(np.ascontiguousarray(out), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat: axis {axis} out of range for {nd}-D tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _finish(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast ``a`` to ``shape`` (gradient sums back)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape}: {e}") from None
    old = a.shape
    return _finish(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def tensor_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        return _finish(a.data.sum(dtype=a.dtype).reshape(()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish(out, (a,), bwd)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
        return _finish(
            (a.data.sum(dtype=np.float64) / n).astype(a.dtype).reshape(()),
            (a,),
            lambda g: (np.broadcast_to(g, a.shape) / n,),
        )
    ax = _normalize_axis(axis, a.ndim)
    n = a.shape[ax]
    out = a.data.mean(axis=ax, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape) / n,)

    return _finish(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _finish(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through unclamped
    entries."""
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _finish(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for overflow safety
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finish(out, (a,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = (ad * cdf).astype(ad.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _finish(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-max-subtracted softmax along ``axis``."""
    ax = _normalize_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=ax, keepdims=True)

    def bwd(g):
        dot = (g * z).sum(axis=ax, keepdims=True)
        return (z * (g - dot),)

    return _finish(z, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then scale
    by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: last dimension must be nonzero")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _finish(out.astype(xd.dtype, copy=False), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Per-parameter Adam moment buffers plus the shared step counter."""

    def __init__(self, params: Iterable[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad`` buffer when None.
    """
    if lr <= 0:
        raise ContractError(f"adam_step: lr must be positive, got {lr}")
    if grads is None:
        grads = [p.grad for p in params]
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise ContractError("adam_step: params do not match the state they were created with")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ContractError("adam_step: a parameter has no gradient")
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} does not match param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
