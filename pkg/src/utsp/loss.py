"""Unsupervised TSP loss on relaxed edge matrices.

    L(X) = alpha * sum c_ij x_ij
         + beta  * [sum_j (1 - colsum_j)^2 + sum_i (1 - rowsum_i)^2]
         + gamma * sum_{(Q, dir) in S} (1 - cut_dir(Q))^2

``S`` comes from :func:`utsp.subtour.parametric_connectivity` and is treated
as a constant when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .diffcore import Tensor, custom
from .instances import Seed, TspInstance, make_rng
from .subtour import IN, OUT, Violation, parametric_connectivity

Costs = Union[TspInstance, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 1.0
    gamma: float = 1.0
    noise_scale: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("alpha, beta and gamma must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    @classmethod
    def for_kind(cls, kind: str, **kw) -> "LossWeights":
        """Defaults per instance family: no noise for Euclidean, 0.1 for asymmetric."""
        kw.setdefault("noise_scale", 0.1 if kind == "asymmetric" else 0.0)
        return cls(**kw)


def _costs(inst: Costs) -> np.ndarray:
    c = inst.weights if isinstance(inst, TspInstance) else np.asarray(inst, dtype=np.float64)
    return c


def _check(x: np.ndarray, c: np.ndarray) -> None:
    if x.shape != c.shape or x.ndim != 2:
        raise ValueError(f"solution shape {x.shape} does not match cost shape {c.shape}")


def _offdiag(c: np.ndarray) -> np.ndarray:
    c = c.copy()
    np.fill_diagonal(c, 0.0)
    return c


def tsp_loss(x, inst: Costs, s: Sequence[Violation], w: LossWeights = LossWeights()) -> float:
    x = np.asarray(x, dtype=np.float64)
    c = _offdiag(_costs(inst))
    _check(x, c)
    xo = _offdiag(x)
    length = float((c * xo).sum())
    rows = xo.sum(axis=1)
    cols = xo.sum(axis=0)
    degree = float(((1.0 - cols) ** 2).sum() + ((1.0 - rows) ** 2).sum())
    n = x.shape[0]
    subtour = 0.0
    for v in s:
        subtour += (1.0 - _cut(xo, v.mask(n), v.direction)) ** 2
    return w.alpha * length + w.beta * degree + w.gamma * subtour


def _cut(x: np.ndarray, mask: np.ndarray, direction: str) -> float:
    u = mask.astype(np.float64)
    if direction == OUT:
        return float(u @ x @ (1.0 - u))
    return float((1.0 - u) @ x @ u)


def tsp_loss_grad(x, inst: Costs, s: Sequence[Violation], w: LossWeights = LossWeights()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = _offdiag(_costs(inst))
    _check(x, c)
    xo = _offdiag(x)
    n = x.shape[0]
    rows = xo.sum(axis=1)
    cols = xo.sum(axis=0)
    g = w.alpha * c - 2.0 * w.beta * (1.0 - cols)[None, :] - 2.0 * w.beta * (1.0 - rows)[:, None]
    for v in s:
        mask = v.mask(n)
        slack = 1.0 - _cut(xo, mask, v.direction)
        u = mask.astype(np.float64)
        if v.direction == OUT:
            g -= 2.0 * w.gamma * slack * np.outer(u, 1.0 - u)
        elif v.direction == IN:
            g -= 2.0 * w.gamma * slack * np.outer(1.0 - u, u)
        else:
            raise ValueError(f"bad direction {v.direction!r}")
    np.fill_diagonal(g, 0.0)
    return g


def batch_loss(x: Tensor, costs: np.ndarray, violations: Sequence[Sequence[Violation]],
               w: LossWeights = LossWeights()) -> Tensor:
    """Mean loss over a batch ``x`` of shape (B, n, n); violation sets held fixed."""
    xs = x.data
    if xs.ndim != 3 or xs.shape != costs.shape or len(violations) != xs.shape[0]:
        raise ValueError("batch shapes disagree")
    b = xs.shape[0]
    # fixed index order keeps the reduction deterministic
    values = [tsp_loss(xs[k], costs[k], violations[k], w) for k in range(b)]
    value = np.array(sum(values) / b)

    def vjp(g):
        grads = np.stack([tsp_loss_grad(xs[k], costs[k], violations[k], w) for k in range(b)])
        return (grads * (float(g) / b),)

    return custom([x], value, vjp, op="tsp_loss")


def loss_and_violations(x: Tensor, costs: np.ndarray, w: LossWeights = LossWeights()):
    """Detect violations on the current ``x`` (no gradient through the choice) and score the batch."""
    violations = [parametric_connectivity(xk) for xk in x.data]
    return batch_loss(x, costs, violations, w), violations


# ---------------------------------------------------------------------------
# logits -> relaxed solution


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.where(u > 0.0, u, np.finfo(np.float64).tiny)
    return -np.log(-np.log(u))


def edge_probabilities(logits: Tensor, noise_scale: float = 0.0, rng=None) -> Tensor:
    """Class-1 softmax probability per edge.

    ``logits`` has shape (..., n, n, 2) with class 0 = edge unused and class 1
    = edge in the tour.  Noise is ``noise_scale`` times a standard Gumbel draw
    per class; the diagonal is forced to zero.
    """
    if noise_scale > 0.0:
        if rng is None:
            raise ValueError("a random generator is required when noise_scale > 0")
        logits = logits + noise_scale * gumbel_noise(rng, logits.shape)
    p = logits.softmax(axis=-1)[..., 1]
    n = p.shape[-1]
    return p * (1.0 - np.eye(n))


def gumbel_softmax_edges(logits, noise_scale: float = 0.0, seed: Seed = 0) -> np.ndarray:
    """Relaxed solution from class-major logits of shape (2, n, n)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] != 2 or logits.shape[1] != logits.shape[2]:
        raise ValueError(f"logits must have shape (2, n, n), got {logits.shape}")
    rng = make_rng(seed) if noise_scale > 0 else None
    lt = Tensor(np.moveaxis(logits, 0, -1))
    return edge_probabilities(lt, noise_scale, rng).data


def symmetrize_logits(logits) -> np.ndarray:
    """Average each class matrix with its transpose; works on (2, n, n) stacks."""
    logits = np.asarray(logits, dtype=np.float64)
    return 0.5 * (logits + np.swapaxes(logits, -1, -2))
