import numpy as np
import pytest


def cycle_matrix(cycles, n):
    """0/1 matrix with x[a, b] = 1 for consecutive nodes of each directed cycle."""
    x = np.zeros((n, n))
    for cyc in cycles:
        for a, b in zip(cyc, cyc[1:] + cyc[:1]):
            x[a, b] = 1.0
    return x


def random_fractional(rng, n):
    """Mix of relaxed solutions: raw uniform, Sinkhorn-balanced, and sparse near-integer."""
    kind = rng.integers(3)
    x = rng.random((n, n))
    np.fill_diagonal(x, 0.0)
    if kind == 1:
        for _ in range(50):
            x /= x.sum(axis=1, keepdims=True)
            x /= x.sum(axis=0, keepdims=True)
    elif kind == 2:
        x = x ** 6
        x /= x.sum(axis=1, keepdims=True)
    return np.clip(x, 0.0, 1.0)


def random_multi_subtour(rng, n):
    """Random partition into k >= 2 directed cycles of length >= 2."""
    while True:
        order = list(rng.permutation(n))
        k = int(rng.integers(2, n // 2 + 1))
        cuts = sorted(rng.choice(np.arange(2, n - 1), size=k - 1, replace=False)) if n >= 4 else []
        parts = np.split(order, cuts)
        if len(parts) >= 2 and all(len(p) >= 2 for p in parts):
            return [list(map(int, p)) for p in parts]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
