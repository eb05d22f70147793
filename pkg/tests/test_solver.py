import csv

import numpy as np
import pytest

from utsp import instances as I
from utsp import solver as S
from utsp.gnn import GnnConfig, GnnModel
from utsp.loss import LossWeights


def tour_matrix(tour, n):
    x = np.zeros((n, n))
    for a, b in zip(tour, np.roll(tour, -1)):
        x[a, b] = 1.0
    return x


def test_greedy_decode_follows_permutation_matrix():
    tour = [0, 3, 1, 4, 2]
    x = tour_matrix(tour, 5)
    assert list(S.greedy_decode(x, 0)) == tour
    assert list(S.greedy_decode(x, 4)) == [4, 2, 0, 3, 1]


def test_greedy_decode_ties_and_range():
    assert list(S.greedy_decode(np.zeros((4, 4)), 2)) == [2, 0, 1, 3]
    with pytest.raises(ValueError):
        S.greedy_decode(np.zeros((4, 4)), 4)


def test_decode_start_is_seeded():
    starts = [S.decode_start(10, 0, k) for k in range(200)]
    assert starts == [S.decode_start(10, 0, k) for k in range(200)]
    assert set(starts) == set(range(10))


def test_direct_minimize_zero_steps_is_uniform():
    (inst,) = I.generate_euclidean(6, 1, 0)
    x = S.direct_minimize(inst, steps=0)
    assert np.array_equal(x, 0.5 * (1 - np.eye(6)))


@pytest.mark.parametrize("kind,noise", [("euclidean", 0.0), ("asymmetric", 0.1)])
def test_direct_minimize_lowers_loss(kind, noise):
    (inst,) = I.generate(kind, 7, 1, 3)
    x, tr = S.direct_minimize(inst, steps=300, lr=0.05, noise_scale=noise, seed=1, trace=True)
    assert tr.final_loss < tr.initial_loss
    assert np.all(np.diag(x) == 0)
    again = S.direct_minimize(inst, steps=300, lr=0.05, noise_scale=noise, seed=1)
    assert np.array_equal(x, again)


def test_direct_minimize_recovers_small_tour():
    # edges of a unit-cost ring are far cheaper than everything else
    n = 5
    w = np.full((n, n), 10.0)
    for i in range(n):
        w[i, (i + 1) % n] = 1.0
    np.fill_diagonal(w, 0.0)
    inst = I.TspInstance(w)
    x = S.direct_minimize(inst, steps=1500, lr=0.05, weights=LossWeights(alpha=0.05))
    assert list(S.greedy_decode(x, 0)) == list(range(n))


def test_report_fields():
    data = I.annotate(I.generate_euclidean(6, 4, 0), "brute")
    rep = S.build_report("opt", data, [inst.opt_tour for inst in data], 1.23456)
    d = rep.to_dict()
    assert d["count"] == 4 and d["mean_gap"] == 0.0 and d["seconds"] == 1.235
    assert [r["gap"] for r in d["instances"]] == [0.0] * 4
    with pytest.raises(I.InstanceError):
        S.build_report("x", I.generate_euclidean(6, 1, 0), [np.arange(6)], None)


def test_baselines():
    data = I.annotate(I.generate_asymmetric(7, 6, 1), "held-karp")
    g = S.run_baseline("greedy", data)
    assert g.lengths == [I.tour_length(I.greedy_nearest(inst, 0), inst) for inst in data]
    r1, r2 = S.run_baseline("random", data, 5), S.run_baseline("random", data, 5)
    assert r1.lengths == r2.lengths
    assert all(gap >= 0 for gap in g.gaps + r1.gaps)
    with pytest.raises(ValueError):
        S.run_baseline("best", data)


def test_train_config_validation():
    assert S.TrainConfig(kind="asymmetric").noise_scale == 0.1
    assert S.TrainConfig().noise_scale == 0.0
    with pytest.raises(ValueError):
        S.TrainConfig(kind="grid")
    with pytest.raises(ValueError):
        S.TrainConfig(n=2)


def tiny_config(tmp_path, **kw):
    base = dict(n=6, epochs=2, epoch_size=20, batch_size=8, lr=1e-3, d=4, layers=1, seed=3,
                metrics_path=str(tmp_path / "m.csv"), checkpoint_dir=str(tmp_path / "ck"), timing=False)
    base.update(kw)
    return S.TrainConfig(**base)


@pytest.mark.parametrize("kind", ["euclidean", "asymmetric"])
def test_train_writes_metrics_and_checkpoints(tmp_path, kind):
    val = I.annotate(I.generate(kind, 6, 8, 77), "brute")
    cfg = tiny_config(tmp_path, kind=kind)
    res = S.train(cfg, val)
    rows = list(csv.reader(open(cfg.metrics_path)))
    assert rows[0] == S.METRICS_HEADER
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(r[3] == "" for r in rows[1:])
    assert 1 <= res.best_epoch <= 2
    final = GnnModel.load(tmp_path / "ck" / "final.json")
    assert final.config == cfg.model_config
    report = S.evaluate(final, val, cfg.val_decode_seed)
    assert report.mean_gap == pytest.approx(res.metrics[-1].val_mean_gap, abs=1e-12)
    assert (tmp_path / "ck" / "best.json").exists()


def test_train_is_deterministic(tmp_path):
    val = I.annotate(I.generate_euclidean(6, 8, 77), "brute")
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir(), b.mkdir()
    S.train(tiny_config(a), val)
    S.train(tiny_config(b), val)
    assert (a / "m.csv").read_bytes() == (b / "m.csv").read_bytes()
    assert (a / "ck" / "final.json").read_bytes() == (b / "ck" / "final.json").read_bytes()


def test_train_rejects_bad_validation(tmp_path):
    with pytest.raises(I.InstanceError):
        S.train(tiny_config(tmp_path), I.generate_euclidean(6, 2, 0))
    with pytest.raises(I.InstanceError):
        S.train(tiny_config(tmp_path), I.annotate(I.generate_euclidean(5, 2, 0), "brute"))


def test_evaluate_handles_partial_batches():
    model = GnnModel(GnnConfig.for_kind("asymmetric", d=4, layers=1), 0)
    data = I.annotate(I.generate_asymmetric(6, 5, 2), "brute")
    a = S.evaluate(model, data, 1, batch_size=2)
    b = S.evaluate(model, data, 1, batch_size=256)
    assert a.gaps == b.gaps and len(a.gaps) == 5
