"""Parametric-connectivity detection of subtour-constraint violations.

Edges of the relaxed solution are added to an initially empty graph in
decreasing order of ``x_ij + x_ji``.  Whenever an edge joins two components,
the merged component is tested in both directions against ``cut >= 1``.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

OUT = "out"
IN = "in"

# a cut counts as violated only below 1 - CUT_TOL, so subsets whose cut is
# exactly 1 in exact arithmetic are not flagged because of rounding
CUT_TOL = 1e-12


class Violation(NamedTuple):
    nodes: tuple[int, ...]
    direction: str
    cut: float

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[list(self.nodes)] = True
        return m


ViolationSet = list[Violation]


def as_solution(x) -> np.ndarray:
    """Validate a relaxed solution: square, entries in [0, 1], zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"solution matrix must be square, got shape {x.shape}")
    if np.any(np.diagonal(x) != 0.0):
        raise ValueError("solution matrix must have a zero diagonal")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise ValueError("solution entries must lie in [0, 1]")
    return x


def _subset_mask(q, n: int) -> np.ndarray:
    q = np.asarray(q)
    if q.dtype == bool:
        if q.shape != (n,):
            raise ValueError("boolean subset mask has the wrong length")
        mask = q.copy()
    else:
        mask = np.zeros(n, dtype=bool)
        mask[q.astype(np.int64)] = True
    k = int(mask.sum())
    if k == 0 or k == n:
        raise ValueError("subset must be non-empty and proper")
    return mask


def cut_value(x, q: Sequence[int], direction: str) -> float:
    """Sum of ``x`` over edges leaving (``out``) or entering (``in``) the subset ``q``."""
    x = np.asarray(x, dtype=np.float64)
    mask = _subset_mask(q, x.shape[0])
    u = mask.astype(np.float64)
    if direction == OUT:
        return float(u @ x @ (1.0 - u))
    if direction == IN:
        return float((1.0 - u) @ x @ u)
    raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")


def edge_order(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges ``i < j`` sorted by decreasing ``x_ij + x_ji``, ties by ``(i, j)``."""
    n = x.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    w = x[iu, ju] + x[ju, iu]
    order = np.lexsort((ju, iu, -w))
    return iu[order], ju[order]


def merge_sequence(x):
    """Yield the component label mask after each merge; stops after ``n - 2`` merges."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    comp = np.arange(n)
    merges = 0
    for a, b in zip(*edge_order(x)):
        c, c0 = comp[a], comp[b]
        if c == c0:
            continue
        merges += 1
        comp[comp == c0] = c
        yield comp == c
        if merges == n - 2:
            return


def parametric_connectivity(x) -> ViolationSet:
    """Node subsets whose directed cuts fall below ``1 - CUT_TOL`` (at most ``2 (n - 2)`` entries).

    Component labels are rewritten on every merge and both cuts are recomputed
    from scratch, giving O(n^3) overall.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 nodes, got {n}")
    found: ViolationSet = []
    bound = 1.0 - CUT_TOL
    for inside in merge_sequence(x):
        u = inside.astype(np.float64)
        cut_out = float(u @ x @ (1.0 - u))
        cut_in = float((1.0 - u) @ x @ u)
        if cut_out < bound or cut_in < bound:
            nodes = tuple(int(v) for v in np.flatnonzero(inside))
            if cut_out < bound:
                found.append(Violation(nodes, OUT, cut_out))
            if cut_in < bound:
                found.append(Violation(nodes, IN, cut_in))
    return found


def batch_parametric_connectivity(xs: np.ndarray) -> list[ViolationSet]:
    return [parametric_connectivity(x) for x in xs]
