import numpy as np
import pytest

from utsp import diffcore as dc
from utsp.diffcore import Adam, AdamState, Mlp, Tensor, adam_step, concat, finite_difference_check, matmul


def test_forward_basics():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    assert np.allclose(Tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])
    assert np.all(Tensor(-np.array([1.0, 2.5])).relu().data == 0)
    assert concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))], axis=1).shape == (2, 3)


def test_square_sum_gradient():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, -4.0, 6.0])


def test_constants_get_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    (x * c).sum().backward()
    assert c.grad is None
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.GraphError):
        (x * 2.0).backward()
    out = x.sum()
    out.backward()
    with pytest.raises(dc.GraphError):
        out.backward()


def test_shape_mismatch_and_nan_trap():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        Tensor(np.array([1000.0])).exp()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


OPS = {
    "matmul": lambda x, c: (matmul(x, c["W"]) * c["v"]).sum(),
    "broadcast_add_mul": lambda x, c: ((x + c["b"]) * (x.reshape(3, 4)[:, :1] + 1.0)).sum(),
    "sigmoid": lambda x, c: (x.sigmoid() * c["v"]).sum(),
    "relu": lambda x, c: (x.relu() * c["v"]).sum(),
    "softmax": lambda x, c: (x.softmax(axis=0) * c["v"]).sum(),
    "sum_axis": lambda x, c: (x.sum(axis=1) * x.sum(axis=1)).sum(),
    "mean": lambda x, c: (x * x).mean(axis=0).sum(),
    "transpose": lambda x, c: (x.transpose(1, 0) @ c["W2"]).sum(),
    "concat": lambda x, c: (concat([x, x * x], axis=1) * c["w8"]).sum(),
    "getitem": lambda x, c: (x[:, 1:3] * x[:, 0:2]).sum() + (x[[0, 0, 2], [1, 1, 3]] * 2.0).sum(),
    "exp_scale": lambda x, c: (x.scale(0.3).exp() - x / 4.0).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_match_finite_differences(name):
    rng = np.random.default_rng(0)
    consts = {
        "W": Tensor(rng.normal(size=(4, 5))), "v": Tensor(rng.normal(size=(3, 4)) if name != "matmul" else rng.normal(size=(3, 5))),
        "b": Tensor(rng.normal(size=(4,))), "W2": Tensor(rng.normal(size=(3, 2))), "w8": Tensor(rng.normal(size=(3, 8))),
    }
    x = rng.normal(size=(3, 4)) + 0.05
    err = finite_difference_check(lambda t: OPS[name](t, consts), x, step=1e-6)
    assert err < 1e-6


def test_quadratic_form_check():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 5))
    q = Tensor(a @ a.T)
    f = lambda t: (t.reshape(1, 5) @ q).reshape(5) * t
    err = finite_difference_check(lambda t: f(t).sum(), rng.normal(size=5), step=1e-5)
    assert err < 1e-9


def test_mlp_shape_and_gradients():
    rng = np.random.default_rng(1)
    mlp = Mlp(4, 6, 2, rng)
    x = rng.normal(size=(3, 5, 4))
    assert mlp(Tensor(x)).shape == (3, 5, 2)
    bound = 1 / np.sqrt(4)
    assert np.all(np.abs(mlp.W1.data) <= bound)
    err = dc.parameter_check(lambda: mlp(Tensor(x)).sigmoid().sum(),
                             [p for _, p in mlp.named_parameters()])
    assert err < 1e-5


def test_directional_check_catches_wrong_gradient():
    rng = np.random.default_rng(4)
    w = dc.parameter(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(5, 3)))
    good = lambda: (matmul(x, w).sigmoid() * 2.0).sum()
    assert dc.directional_check(good, [w]) < 1e-8
    # a custom op whose backward is off by a factor of two
    bad = lambda: dc.custom([w], np.array((w.data ** 2).sum()), lambda g: (4.0 * g * w.data,))
    assert dc.directional_check(bad, [w]) > 0.3
    assert w.grad is None


def test_adam_zero_gradient_first_step():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(lr=0.1))
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([3.0, -0.2, 1e-3])
    adam_step([p], [g], AdamState(lr=0.01))
    # m_hat = g, v_hat = g^2 on the first step
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, expected, rtol=0, atol=1e-15)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(5)
    p = rng.normal(size=4)
    ref = p.copy()
    state = AdamState(lr=0.05)
    m = v = np.zeros(4)
    for t in range(1, 20):
        g = rng.normal(size=4)
        adam_step([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p, ref, atol=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


def test_adam_determinism():
    def run():
        rng = np.random.default_rng(9)
        mlp = Mlp(3, 4, 1, rng)
        opt = Adam([p for _, p in mlp.named_parameters()], lr=0.01)
        x = Tensor(rng.normal(size=(8, 3)))
        for _ in range(5):
            opt.zero_grad()
            (mlp(x) * mlp(x)).sum().backward()
            opt.step()
        return np.concatenate([p.data.ravel() for _, p in mlp.named_parameters()])
    assert np.array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = [("a", rng.normal(size=(3, 4))), ("b.c", rng.normal(size=(5,)) * 1e-300), ("s", np.array(np.pi))]
    path = tmp_path / "ck.json"
    dc.save_tensors(path, tensors, {"d": 3})
    config, back = dc.load_tensors(path)
    assert config == {"d": 3}
    for name, arr in tensors:
        assert np.array_equal(back[name], arr)
