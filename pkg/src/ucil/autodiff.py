"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

The primitive set is closed: every model and loss in the package is composed
from the functions registered in ``PRIMITIVES``. Each primitive validates its
input shapes, rejects non-finite results, and records itself on the tape of
its recorded inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple  # tape handles, None for constants
    saved: tuple  # input values at record time
    attrs: dict
    value: np.ndarray


class Tape:
    """Append-only list of nodes; inputs always precede the node using them."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value) -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        _check_finite("leaf", arr)
        self.nodes.append(Node("leaf", (), (), {}, arr))
        return Tensor(arr, self, len(self.nodes) - 1)

    def record(self, kind, inputs, saved, attrs, value) -> int:
        self.nodes.append(Node(kind, inputs, saved, attrs, value))
        return len(self.nodes) - 1

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class Tensor:
    data: np.ndarray
    tape: Tape | None = field(default=None, repr=False)
    node: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def recorded(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(value) -> Tensor:
    """Wrap a value as an unrecorded (constant) tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind}: non-finite values in result")


# --- forward / vector-Jacobian rules -------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b


def _add_vjp(g, out, needs, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def _sub_vjp(g, out, needs, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def _mul_vjp(g, out, needs, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fwd(a, b):
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _matmul_vjp(g, out, needs, a, b):
    k, n = b.shape
    ga = g @ b.T if needs[0] else None
    gb = a.reshape(-1, k).T @ g.reshape(-1, n) if needs[1] else None
    return ga, gb


def _im2col(x, k):
    """(B, T, C) -> (B, T, C*K) with zero padding; column index is c*K + j."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, T, C, K)
    return win.reshape(x.shape[0], x.shape[1], -1)


def _conv1d_fwd(x, w):
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError(
            f"conv1d: input {x.shape} (batch, frames, channels) incompatible with "
            f"kernel {w.shape} (odd width, in, out)"
        )
    k, cin, cout = w.shape
    return _im2col(x, k) @ w.transpose(1, 0, 2).reshape(cin * k, cout)


def _conv1d_vjp(g, out, needs, x, w):
    k, cin, cout = w.shape
    gx = gw = None
    if needs[0]:
        # correlation with the time-reversed kernel
        w_rev = w[::-1].transpose(2, 0, 1).reshape(cout * k, cin)
        gx = _im2col(g, k) @ w_rev
    if needs[1]:
        cols = _im2col(x, k).reshape(-1, cin * k)
        gw = (cols.T @ g.reshape(-1, cout)).reshape(cin, k, cout).transpose(1, 0, 2)
    return gx, gw


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def _relu_vjp(g, out, needs, x):
    return (g * (x > 0),)


def _sigmoid_fwd(x):
    return expit(x)


def _sigmoid_vjp(g, out, needs, x):
    return (g * out * (1.0 - out),)


def _log_fwd(x):
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(x)


def _log_vjp(g, out, needs, x):
    return (g / x,)


def _norm_axis(x, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    try:
        return tuple(sorted(a % x.ndim for a in axes)) if x.ndim else ()
    except ZeroDivisionError:
        raise ShapeError(f"mean: axis {axis} invalid for scalar") from None


def _mean_fwd(x, axis=None, keepdims=False):
    axes = _norm_axis(x, axis)
    if axes is not None and any(a >= x.ndim for a in axes):
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    return np.asarray(x.mean(axis=axes, keepdims=keepdims))


def _mean_vjp(g, out, needs, x, axis=None, keepdims=False):
    axes = _norm_axis(x, axis)
    if axes is None:
        count = x.size
        return (np.broadcast_to(g, x.shape) / count,)
    count = int(np.prod([x.shape[a] for a in axes]))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape) / count,)


def _l2n_fwd(x, axis=-1):
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise NonFiniteError("l2_normalize: zero-norm vector")
    return x / norm


def _l2n_vjp(g, out, needs, x, axis=-1):
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)


def _sqerr_fwd(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("squared_error: empty inputs")
    d = a - b
    return np.asarray((d * d).mean())


def _sqerr_vjp(g, out, needs, a, b):
    ga = g * 2.0 * (a - b) / a.size
    return ga, -ga


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_vjp),
    "sub": (_sub_fwd, _sub_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "matmul": (_matmul_fwd, _matmul_vjp),
    "conv1d": (_conv1d_fwd, _conv1d_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "sigmoid": (_sigmoid_fwd, _sigmoid_vjp),
    "log": (_log_fwd, _log_vjp),
    "mean": (_mean_fwd, _mean_vjp),
    "l2_normalize": (_l2n_fwd, _l2n_vjp),
    "squared_error": (_sqerr_fwd, _sqerr_vjp),
}


def apply_primitive(kind: str, *inputs, **attrs) -> Tensor:
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    fwd, _ = PRIMITIVES[kind]
    ts = [tensor(x) for x in inputs]
    arrays = tuple(t.data for t in ts)
    out = np.asarray(fwd(*arrays, **attrs), dtype=np.float64)
    _check_finite(kind, out)

    tapes = {id(t.tape): t.tape for t in ts if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ValueError(f"{kind}: inputs recorded on different tapes")
    tape = next(iter(tapes.values()))
    handles = tuple(t.node for t in ts)
    node = tape.record(kind, handles, arrays, attrs, out)
    return Tensor(out, tape, node)


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def conv1d(x, w):
    """Same-padded temporal convolution: (B, T, Cin) * (K, Cin, Cout) -> (B, T, Cout)."""
    return apply_primitive("conv1d", x, w)


def relu(x):
    return apply_primitive("relu", x)


def sigmoid(x):
    return apply_primitive("sigmoid", x)


def log(x):
    return apply_primitive("log", x)


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", x, axis=axis, keepdims=keepdims)


def l2_normalize(x, axis=-1):
    return apply_primitive("l2_normalize", x, axis=axis)


def squared_error(a, b):
    """Mean of squared differences over all elements."""
    return apply_primitive("squared_error", a, b)


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar output w.r.t. every leaf on the tape.

    Leaves that the output does not depend on get zero gradients.
    """
    if output.shape != ():
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if output.tape is not tape:
        raise ValueError("backward: output was not recorded on this tape")

    grads: list = [None] * len(tape.nodes)
    grads[output.node] = np.ones(())
    for idx in range(output.node, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.kind == "leaf":
            continue
        _, vjp = PRIMITIVES[node.kind]
        needs = tuple(h is not None for h in node.inputs)
        parts = vjp(g, node.value, needs, *node.saved, **node.attrs)
        for handle, part in zip(node.inputs, parts):
            if handle is None:
                continue
            if grads[handle] is None:
                grads[handle] = np.array(part, dtype=np.float64)
            else:
                grads[handle] = grads[handle] + part

    out = {}
    for h in tape.leaves():
        g = grads[h]
        out[h] = np.zeros_like(tape.nodes[h].value) if g is None else np.asarray(g).reshape(tape.nodes[h].value.shape)
    return out


def replay(tape: Tape) -> list[np.ndarray]:
    """Recompute every non-leaf node from its saved inputs."""
    outs = []
    for node in tape.nodes:
        if node.kind == "leaf":
            outs.append(node.value)
            continue
        fwd, _ = PRIMITIVES[node.kind]
        outs.append(np.asarray(fwd(*node.saved, **node.attrs), dtype=np.float64))
    return outs


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``function`` maps one tensor to a scalar tensor; the relative error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    analytic = backward(tape, function(x))[x.node]

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = function(tensor(xp.reshape(x0.shape))).item()
        fm = function(tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NonFiniteError("grad_check: non-finite finite-difference estimate")
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays; advances ``state``."""
    if set(params) != set(grads):
        raise ShapeError("adam_step: gradient keys do not match parameters")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ShapeError(f"adam_step: gradient for {name} has shape {np.shape(grads[name])}, expected {np.shape(p)}")
    lr = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    new = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new
