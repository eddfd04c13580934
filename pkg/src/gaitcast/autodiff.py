"""Reverse-mode automatic differentiation over dense float64 arrays.

Eager tape machine: each primitive computes its forward value with numpy and,
while a `Tape` is active, pushes a backward closure. `Tape.backward` replays
the record in reverse, which is a reverse topological order because ops are
appended in execution order.

There is deliberately no broadcasting. Every primitive states the exact
operand shapes it accepts and raises `ShapeError` otherwise; the few
"shared operand" cases that a transformer needs (bias on the last axis,
a table added to every batch item) are separate, explicitly named ops.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform to a primitive's documented shapes."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a spent tape or a non-scalar loss."""


class Tensor:
    """A dense float64 array plus a gradient slot.

    `grad` accumulates across backward passes; training code resets it
    between steps via `zero_grads`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; strict-shape semantics of the underlying primitives.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops for one forward computation.

    Use as a context manager; ops executed inside record themselves when any
    operand requires grad. A tape supports exactly one `backward` call.
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._spent = False
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, op: _Op) -> None:
        self._ops.append(op)
        self._produced.add(id(op.output))
        for t in op.inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t

    def reset(self) -> None:
        self._ops.clear()
        self._produced.clear()
        self._leaves.clear()
        self._spent = False

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor) -> str:
        """Accumulate d(loss)/d(leaf) into `.grad` of every requires-grad leaf.

        Returns "ok", or "detached" (with a warning) when the loss was not
        produced by this tape; leaves then receive zero gradients.
        """
        if self._spent:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._spent = True
        if loss.data.ndim != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

        status = "ok"
        if id(loss) not in self._produced:
            warnings.warn("backward: loss is detached from this tape; gradients are zero")
            status = "detached"
        else:
            loss.grad = np.ones((), dtype=np.float64)
            for op in reversed(self._ops):
                g = op.output.grad
                if g is None:
                    continue
                for t, ig in zip(op.inputs, op.backward(g)):
                    if ig is None:
                        continue
                    t.grad = ig if t.grad is None else t.grad + ig
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        return status


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(name: str, inputs: tuple[Tensor, ...], data: np.ndarray,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if out.requires_grad and tape is not None:
        tape._record(_Op(name, inputs, out, backward))
    return out


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted forms: (..., m, k) @ (..., k, n) with identical leading dims, or
    (..., m, k) @ (k, n) applying one weight matrix to every leading slice.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_err("matmul", a.shape, b.shape)
    if b.ndim == 2 and a.ndim >= 2:
        ok = a.shape[-1] == b.shape[0]
    else:
        ok = a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]
    if not ok:
        raise _shape_err("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", (a, b), ad @ bd, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (g if a.requires_grad else None,
                            g if b.requires_grad else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of two same-shape tensors."""
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (g if a.requires_grad else None,
                            -g if b.requires_grad else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("mul", (a, b), ad * bd,
                 lambda g: (g * bd if a.requires_grad else None,
                            g * ad if b.requires_grad else None))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _make("scale", (x,), x.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector to the last axis of every row: b.shape == (x.shape[-1],)."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise _shape_err("add_bias", x.shape, b.shape)

    def bwd(g):
        gx = g if x.requires_grad else None
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if b.requires_grad else None
        return gx, gb

    return _make("add_bias", (x, b), x.data + b.data, bwd)


def add_shared(x: Tensor, p: Tensor) -> Tensor:
    """Add p to every slice along the leading axis: p.shape == x.shape[1:]."""
    if x.ndim < 2 or p.shape != x.shape[1:]:
        raise _shape_err("add_shared", x.shape, p.shape)

    def bwd(g):
        return (g if x.requires_grad else None,
                g.sum(axis=0) if p.requires_grad else None)

    return _make("add_shared", (x, p), x.data + p.data, bwd)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise _shape_err("transpose", x.shape)
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    orig = x.shape
    return _make("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
                i != axis and other[i] != base[i] for i in range(len(base))):
            raise _shape_err("concat", parts[0].shape, p.shape)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    needs = [p.requires_grad for p in parts]

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i, need in enumerate(needs):
            if need:
                sl[axis] = slice(offsets[i], offsets[i + 1])
                outs.append(g[tuple(sl)])
            else:
                outs.append(None)
        return tuple(outs)

    return _make("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis), bwd)


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice `[start, start+length)` along one axis."""
    if not (0 <= axis < x.ndim) or start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(
            f"slice_axis: window [{start}, {start + length}) on axis {axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make("slice_axis", (x,), x.data[sl].copy(), bwd)


def gather_lastdim(x: Tensor, index) -> Tensor:
    """Pick one entry per row of the last axis: index.shape == x.shape[:-1]."""
    idx = np.asarray(index)
    if idx.shape != x.shape[:-1] or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_lastdim: index shape {idx.shape} for input {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ShapeError(f"gather_lastdim: index out of range for last dim {x.shape[-1]}")
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expanded, np.expand_dims(g, -1), axis=-1)
        return (gx,)

    return _make("gather_lastdim", (x,), out, bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if x.ndim < 1:
        raise _shape_err("softmax_lastdim", x.shape)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make("softmax_lastdim", (x,), s, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is 0."""
    sgn = np.sign(x.data)
    return _make("abs", (x,), np.abs(x.data), lambda g: (g * sgn,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make("log", (x,), np.log(xd), lambda g: (g / xd,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1] if x.ndim else 0
    if x.ndim < 1 or gain.shape != (n,) or bias.shape != (n,):
        raise _shape_err("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bwd(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (dxhat - m1 - xhat * m2) * inv
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _make("layer_norm", (x, gain, bias), xhat * gd + bias.data, bwd)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis (dropping it) or over all entries (axis=None)."""
    if axis is None:
        inv_n = 1.0 / x.size
        return _make("mean", (x,), x.data.mean(),
                     lambda g: (np.broadcast_to(g * inv_n, x.shape),))
    if not (0 <= axis < x.ndim):
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    n = x.shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape),)

    return _make("mean", (x,), x.data.mean(axis=axis), bwd)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis (dropping it) or over all entries (axis=None)."""
    if axis is None:
        return _make("sum", (x,), x.data.sum(),
                     lambda g: (np.broadcast_to(g, x.shape),))
    if not (0 <= axis < x.ndim):
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.shape}")

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _make("sum", (x,), x.data.sum(axis=axis), bwd)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def finite_difference_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f() w.r.t. every entry of arr.

    f must re-read arr on each call; arr is perturbed in place and restored.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f()
        flat[i] = keep - eps
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest |a-n| / max(|a|, |n|, floor); floor keeps near-zero grads honest."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build_loss: Callable[[], Tensor], params: dict[str, Tensor],
                    eps: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Compare tape gradients of build_loss() against central differences.

    build_loss must be deterministic and must read the current `.data` of
    every tensor in params on each call. Returns (max error, per-name errors).
    """
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}
    zero_grads(list(params.values()))

    def f() -> float:
        return build_loss().item()

    errors = {}
    for name, t in params.items():
        numeric = finite_difference_grad(f, t.data, eps=eps)
        errors[name] = max_relative_error(analytic[name], numeric)
    worst = max(errors.values()) if errors else 0.0
    return worst, errors
