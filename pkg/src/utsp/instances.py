"""TSP instances: generation, exact oracles, baselines, gaps and dataset files.

All randomness goes through numpy's PCG64 bit generator, seeded with a
``SeedSequence`` whose entropy is ``[*seed, record_index]``.  Every record
therefore has its own stream, and sharded or serial generation agree bitwise.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

Seed = Union[int, Sequence[int]]

HELD_KARP_MAX_N = 22
BRUTE_FORCE_MAX_N = 10


class InstanceError(ValueError):
    """Invalid instance, tour or dataset record."""


class OracleLimitError(InstanceError):
    """Instance too large for the requested exact method."""


def make_rng(seed: Seed, *extra: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed..., extra...)``."""
    if isinstance(seed, (int, np.integer)):
        entropy = [int(seed)]
    else:
        entropy = [int(s) for s in seed]
    entropy.extend(int(e) for e in extra)
    if any(e < 0 for e in entropy):
        raise ValueError(f"seed components must be non-negative, got {entropy}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def euclidean_weights(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


@dataclass(eq=False)
class TspInstance:
    weights: np.ndarray
    coords: Optional[np.ndarray] = None
    opt_len: Optional[float] = None
    opt_tour: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InstanceError(f"weights must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InstanceError("weights must be finite and non-negative")
        np.fill_diagonal(w, 0.0)
        self.weights = w
        if self.coords is not None:
            c = np.array(self.coords, dtype=np.float64)
            if c.shape != (self.n, 2):
                raise InstanceError(f"coords must have shape ({self.n}, 2), got {c.shape}")
            if not np.allclose(w, euclidean_weights(c), rtol=0.0, atol=1e-9):
                raise InstanceError("weights do not match the Euclidean distances of coords")
            self.coords = c
        if self.opt_tour is not None:
            self.opt_tour = check_tour(self.opt_tour, self.n)
            if self.opt_len is None:
                self.opt_len = tour_length(self.opt_tour, self)
        if self.opt_len is not None:
            self.opt_len = float(self.opt_len)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def is_euclidean(self) -> bool:
        return self.coords is not None

    @property
    def kind(self) -> str:
        return "euclidean" if self.is_euclidean else "asymmetric"

    def digest(self) -> str:
        """Content hash of the weight matrix (used for split-overlap checks)."""
        return hashlib.sha1(np.ascontiguousarray(self.weights).tobytes()).hexdigest()

    def with_optimum(self, tour: Sequence[int], length: float) -> "TspInstance":
        return TspInstance(self.weights, self.coords, length, np.asarray(tour))

    @classmethod
    def from_coords(cls, coords, **kw) -> "TspInstance":
        coords = np.asarray(coords, dtype=np.float64)
        return cls(euclidean_weights(coords), coords=coords, **kw)


def _check_size(n: int, count: int = 1) -> None:
    if n < 3:
        raise InstanceError(f"instances need at least 3 nodes, got n={n}")
    if count < 1:
        raise InstanceError(f"count must be >= 1, got {count}")


def generate_euclidean(n: int, count: int, seed: Seed, start: int = 0) -> list[TspInstance]:
    """Uniform points in the unit square; record ``k`` uses stream ``(seed, start + k)``."""
    _check_size(n, count)
    out = []
    for k in range(start, start + count):
        coords = make_rng(seed, k).random((n, 2))
        out.append(TspInstance.from_coords(coords))
    return out


def generate_asymmetric(n: int, count: int, seed: Seed, start: int = 0) -> list[TspInstance]:
    """Off-diagonal costs i.i.d. uniform on [0, 1)."""
    _check_size(n, count)
    out = []
    for k in range(start, start + count):
        w = make_rng(seed, k).random((n, n))
        np.fill_diagonal(w, 0.0)
        out.append(TspInstance(w))
    return out


def generate(kind: str, n: int, count: int, seed: Seed, start: int = 0) -> list[TspInstance]:
    if kind == "euclidean":
        return generate_euclidean(n, count, seed, start)
    if kind == "asymmetric":
        return generate_asymmetric(n, count, seed, start)
    raise InstanceError(f"unknown instance kind {kind!r}")


def check_tour(tour: Sequence[int], n: int) -> np.ndarray:
    order = np.asarray(tour)
    if order.ndim != 1 or len(order) != n:
        raise InstanceError(f"tour has {order.size} entries, instance has {n} nodes")
    if not np.issubdtype(order.dtype, np.integer):
        if not np.all(order == np.round(order)):
            raise InstanceError("tour entries must be integers")
        order = order.astype(np.int64)
    if not np.array_equal(np.sort(order), np.arange(n)):
        raise InstanceError("tour must visit every node exactly once")
    return order.astype(np.int64)


def tour_length(tour: Sequence[int], inst: TspInstance) -> float:
    order = check_tour(tour, inst.n)
    # sum from node 0 so every rotation of a cycle gives the same float
    order = np.roll(order, -int(np.flatnonzero(order == 0)[0]))
    return float(inst.weights[order, np.roll(order, -1)].sum())


def held_karp(inst: TspInstance) -> tuple[np.ndarray, float]:
    """Exact directed TSP by bitmask dynamic programming, vectorised per subset size.

    Node 0 is the fixed start; bit ``k`` of a mask stands for node ``k + 1``.
    ``best[mask, k]`` is the cheapest path 0 -> ... -> k+1 through exactly the
    nodes of ``mask``.
    """
    n = inst.n
    if n > HELD_KARP_MAX_N:
        raise OracleLimitError(f"held-karp supports n <= {HELD_KARP_MAX_N}, got n={n}")
    if n < 2:
        raise InstanceError("need at least 2 nodes")
    c = inst.weights
    m = n - 1
    size = 1 << m
    best = np.full((size, m), np.inf)
    parent = np.full((size, m), -1, dtype=np.int8)
    for k in range(m):
        best[1 << k, k] = c[0, k + 1]

    masks = np.arange(size, dtype=np.int64)
    popcount = np.zeros(size, dtype=np.int64)
    for k in range(m):
        popcount += (masks >> k) & 1
    inner = c[1:, 1:]  # inner[j, k] = cost (j+1) -> (k+1)

    for s in range(2, m + 1):
        level = masks[popcount == s]
        for k in range(m):
            bit = 1 << k
            sel = level[(level & bit) != 0]
            prev = sel ^ bit
            cand = best[prev] + inner[:, k]
            j = np.argmin(cand, axis=1)
            best[sel, k] = cand[np.arange(len(sel)), j]
            parent[sel, k] = j

    full = size - 1
    closing = best[full] + c[1:, 0]
    last = int(np.argmin(closing))

    rev = []
    mask = full
    k = last
    while k >= 0:
        rev.append(k + 1)
        pk = int(parent[mask, k])
        mask ^= 1 << k
        k = pk
    tour = np.array([0] + rev[::-1], dtype=np.int64)
    # Recompute along the tour so the reported cost uses the canonical summation.
    return tour, tour_length(tour, inst)


def brute_force(inst: TspInstance) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all (n-1)! directed cycles starting at node 0."""
    n = inst.n
    if n > BRUTE_FORCE_MAX_N:
        raise OracleLimitError(f"brute force supports n <= {BRUTE_FORCE_MAX_N}, got n={n}")
    if n < 2:
        raise InstanceError("need at least 2 nodes")
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    tours = np.hstack([np.zeros((len(perms), 1), dtype=np.int64), perms])
    c = inst.weights
    lengths = c[tours, np.roll(tours, -1, axis=1)].sum(axis=1)
    best = int(np.argmin(lengths))
    tour = tours[best]
    return tour, tour_length(tour, inst)


ORACLES = {"held-karp": held_karp, "brute": brute_force}


def solve_exact(inst: TspInstance, method: str = "held-karp") -> tuple[np.ndarray, float]:
    try:
        fn = ORACLES[method]
    except KeyError:
        raise InstanceError(f"unknown oracle {method!r}; choose from {sorted(ORACLES)}") from None
    return fn(inst)


def annotate(instances: Iterable[TspInstance], method: str = "held-karp") -> list[TspInstance]:
    """Attach ``opt_len``/``opt_tour``; already-annotated records are re-solved identically."""
    out = []
    for inst in instances:
        tour, cost = solve_exact(inst, method)
        out.append(inst.with_optimum(tour, cost))
    return out


def greedy_nearest(inst: TspInstance, start: int = 0) -> np.ndarray:
    """Nearest-neighbour tour; ties go to the lowest node index."""
    n = inst.n
    if not 0 <= start < n:
        raise InstanceError(f"start node {start} out of range for n={n}")
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, np.inf, inst.weights[cur])
        cur = int(np.argmin(row))
        visited[cur] = True
        order.append(cur)
    return np.array(order, dtype=np.int64)


def random_tour(n: int, seed: Seed) -> np.ndarray:
    if n < 3:
        raise InstanceError(f"instances need at least 3 nodes, got n={n}")
    return make_rng(seed).permutation(n).astype(np.int64)


def optimality_gap(pred: float, opt: float) -> float:
    """Percent excess of ``pred`` over ``opt``."""
    if not opt > 0:
        raise InstanceError(f"optimum must be positive, got {opt}")
    if pred < opt - 1e-9:
        raise InstanceError(f"predicted length {pred} is below the optimum {opt}")
    # lengths equal up to summation order may land an ulp below the optimum
    return max(0.0, 100.0 * (pred / opt - 1.0))


# ---------------------------------------------------------------------------
# dataset files: one JSON object per line


def instance_to_record(inst: TspInstance) -> dict:
    rec: dict = {"n": inst.n}
    if inst.coords is not None:
        rec["coords"] = inst.coords.tolist()
    else:
        rec["matrix"] = inst.weights.tolist()
    if inst.opt_len is not None:
        rec["opt_len"] = inst.opt_len
    if inst.opt_tour is not None:
        rec["opt_tour"] = [int(v) for v in inst.opt_tour]
    return rec


def record_to_instance(rec: dict) -> TspInstance:
    if not isinstance(rec, dict):
        raise InstanceError("record must be a JSON object")
    unknown = set(rec) - {"n", "coords", "matrix", "opt_len", "opt_tour"}
    if unknown:
        raise InstanceError(f"unknown fields {sorted(unknown)}")
    if "n" not in rec or not isinstance(rec["n"], int) or isinstance(rec["n"], bool):
        raise InstanceError("field 'n' (integer) is required")
    n = rec["n"]
    has_coords, has_matrix = "coords" in rec, "matrix" in rec
    if has_coords == has_matrix:
        raise InstanceError("exactly one of 'coords' or 'matrix' is required")
    if has_coords:
        coords = np.asarray(rec["coords"], dtype=np.float64)
        if coords.shape != (n, 2):
            raise InstanceError(f"coords shape {coords.shape} does not match n={n}")
        inst = TspInstance.from_coords(coords)
    else:
        matrix = np.asarray(rec["matrix"], dtype=np.float64)
        if matrix.shape != (n, n):
            raise InstanceError(f"matrix shape {matrix.shape} does not match n={n}")
        inst = TspInstance(matrix)
    opt_tour = rec.get("opt_tour")
    opt_len = rec.get("opt_len")
    if opt_tour is not None or opt_len is not None:
        inst = TspInstance(inst.weights, inst.coords, opt_len, opt_tour)
        if opt_tour is not None and opt_len is not None:
            if abs(tour_length(inst.opt_tour, inst) - inst.opt_len) > 1e-9:
                raise InstanceError("opt_len disagrees with the length of opt_tour")
    return inst


def dumps_record(inst: TspInstance) -> str:
    # json writes floats with repr(), i.e. shortest round-trip form (up to 17 digits)
    return json.dumps(instance_to_record(inst), separators=(",", ":"))


def write_dataset(path, instances: Iterable[TspInstance]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(dumps_record(inst))
            fh.write("\n")


def read_dataset(path) -> list[TspInstance]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_to_instance(json.loads(line)))
            except (json.JSONDecodeError, InstanceError, ValueError, TypeError) as exc:
                raise InstanceError(f"{path}:{lineno}: {exc}") from exc
    return out
