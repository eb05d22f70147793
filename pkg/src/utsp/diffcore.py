"""A small reverse-mode differentiation engine over float64 numpy arrays.

Only what the GNN and the per-instance minimiser need: elementwise arithmetic
with numpy broadcasting, affine maps, concatenation, reductions, activations
and softmax.  Every op checks its output for NaN/Inf.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class GraphError(RuntimeError):
    pass


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op
        self._freed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], op: str, backward):
        """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
        data = _finite(np.asarray(data, dtype=np.float64), op)
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return cls(data, _op=op)
        out = cls(data, requires_grad=True, _parents=tuple(parents), _op=op)
        out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor.lift(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data, (a, b), "add",
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor.lift(other))

    def __rsub__(self, other):
        return Tensor.lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor.lift(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data, (a, b), "mul",
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def scale(self, k: float) -> "Tensor":
        k = float(k)
        return Tensor._make(self.data * k, (self,), "scale", lambda g: (g * k,))

    def __truediv__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("division is only supported by a constant")
        return self.scale(1.0 / k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self

        idx = index if isinstance(index, tuple) else (index,)
        basic = all(i is Ellipsis or i is None or isinstance(i, (int, slice)) for i in idx)

        def back(g):
            full = np.zeros_like(a.data)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(a.data[index], (a,), "getitem", back)

    # -- shape ------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(np.transpose(self.data, axes), (self,), "transpose",
                            lambda g: (np.transpose(g, inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / count)

    # -- activations --------------------------------------------------------------

    def relu(self) -> "Tensor":
        on = self.data > 0
        return Tensor._make(self.data * on, (self,), "relu", lambda g: (g * on,))

    def sigmoid(self) -> "Tensor":
        s = _sigmoid(self.data)
        return Tensor._make(s, (self,), "sigmoid", lambda g: (g * s * (1.0 - s),))

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor._make(e, (self,), "exp", lambda g: (g * e,))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=axis, keepdims=True)
        return Tensor._make(
            p, (self,), "softmax",
            lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),),
        )

    # -- differentiation ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` and free the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar, got shape {self.shape}")
        if self._freed:
            raise GraphError("graph already freed by a previous backward call")
        if not self.requires_grad:
            raise GraphError("output does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                # leaf
                if g is not None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, m)."""
    a, b = Tensor.lift(a), Tensor.lift(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), "matmul", back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [Tensor.lift(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in ts], axis=ax), ts, "concat",
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def custom(inputs: Sequence[Tensor], value, vjp: Callable[[np.ndarray], tuple], op: str = "custom") -> Tensor:
    """Record an op whose value and vector-Jacobian product are supplied by the caller."""
    return Tensor._make(value, tuple(inputs), op, vjp)


# ---------------------------------------------------------------------------
# layers


class Mlp:
    """Two affine maps with a ReLU in between (input, hidden and output layer)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.W1 = parameter(uniform_init(rng, (in_dim, hidden), in_dim))
        self.b1 = parameter(uniform_init(rng, (hidden,), in_dim))
        self.W2 = parameter(uniform_init(rng, (hidden, out_dim), hidden))
        self.b2 = parameter(uniform_init(rng, (out_dim,), hidden))

    def __call__(self, x) -> Tensor:
        return self.output(self.hidden(x))

    def hidden(self, x) -> Tensor:
        return (matmul(x, self.W1) + self.b1).relu()

    def output(self, h: Tensor) -> Tensor:
        return matmul(h, self.W2) + self.b2

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + k, getattr(self, k)) for k in ("W1", "b1", "W2", "b2")]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float, coords=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-6,
                            floor: float = 1e-8) -> float:
    """Max relative error between the backward-pass gradient of ``f`` at ``x`` and central differences."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    probe = x0.copy()
    numeric = numeric_gradient(lambda: f(Tensor(probe)).item(), probe, step)
    return relative_error(analytic, numeric, floor)


def parameter_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
                    floor: float = 1e-8, coords_per_param: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Finite-difference check of ``loss_fn`` w.r.t. parameter tensors (optionally subsampled)."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = None
        if coords_per_param is not None and p.data.size > coords_per_param:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(p.data.size, coords_per_param, replace=False)
        numeric = numeric_gradient(lambda: loss_fn().item(), p.data, step, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric, floor))
        p.grad = None
    return worst



def directional_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], directions: int = 5,
                      step: float = 1e-5, rng: Optional[np.random.Generator] = None) -> float:
    """Compare ``<grad, v>`` with a central difference along random unit vectors ``v``.

    Each direction spans every parameter at once, so the compared quantity is
    not swamped by rounding in the loss the way near-zero single coordinates are.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.normal(size=p.data.shape) for p in params]
        norm = math.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        originals = [p.data.copy() for p in params]
        values = []
        for sign in (1.0, -1.0):
            for p, v, o in zip(params, vs, originals):
                p.data[...] = o + sign * step * v
            values.append(loss_fn().item())
        for p, o in zip(params, originals):
            p.data[...] = o
        numeric = (values[0] - values[1]) / (2.0 * step)
        worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
    for p in params:
        p.grad = None
    return worst

# ---------------------------------------------------------------------------
# checkpoints: JSON manifest of named row-major tensors

CHECKPOINT_FORMAT = "utsp-checkpoint"


def save_tensors(path, tensors: Sequence[tuple[str, np.ndarray]], config: Optional[dict] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": config or {},
        "tensors": [
            {"name": name, "shape": list(np.shape(arr)),
             "values": [float(v) for v in np.asarray(arr, dtype=np.float64).reshape(-1)]}
            for name, arr in tensors
        ],
    }
    # float repr is the shortest string that round-trips (<= 17 significant digits)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    tensors = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: tensor {entry['name']} has {values.size} values for shape {shape}")
        tensors[entry["name"]] = values.reshape(shape)
    return doc.get("config", {}), tensors
