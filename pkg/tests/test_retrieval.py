import math

import numpy as np
import pytest

from mapreloc.errors import ShapeError, TrainingDivergedError
from mapreloc.geom import GridIndex, MapSpec
from mapreloc.retrieval import (LossConfig, RetrievalParams, TrainConfig, TrainSet, batch_loss,
                                forward, loss, soft_target, top_cells, train)
from oracles import gradient_check, naive_logits


def random_setup(seed, t=8, n=9, d=16, heads=4):
    rng = np.random.default_rng(seed)
    p = RetrievalParams.init(t, n, d, heads, seed)
    p.b_head = rng.normal(size=n)
    return p, rng.normal(size=(t, d)), rng.normal(size=(n, d))


@pytest.mark.parametrize("seed", range(3))
def test_attention_matches_naive_loops(seed):
    p, q, base = random_setup(seed)
    z, _ = forward(q[None], base[None], p)
    assert np.abs(z[0] - naive_logits(q, base, p)).max() < 1e-6


def test_constant_base_row_survives_standardisation():
    p, q, base = random_setup(4)
    base[:] = base[0]
    z, _ = forward(q[None], base[None], p)
    assert np.abs(z[0] - naive_logits(q, base, p)).max() < 1e-6


def test_zero_inputs_give_bias():
    p, q, base = random_setup(5)
    p.query_pos[:] = 0
    p.base_pos[:] = 0
    z, _ = forward(np.zeros_like(q)[None], np.zeros_like(base)[None], p)
    assert np.allclose(z[0], p.b_head, atol=1e-15)


def test_permuting_cells_permutes_logits():
    p, q, base = random_setup(6)
    perm = np.random.default_rng(0).permutation(base.shape[0])
    pp = p.copy()
    pp.base_pos = p.base_pos[perm]
    pp.w_head = p.w_head[:, perm]
    pp.b_head = p.b_head[perm]
    a, _ = forward(q[None], base[None], p)
    b, _ = forward(q[None], base[perm][None], pp)
    assert np.allclose(a[0][perm], b[0], atol=1e-12)


def test_shape_mismatch_raises():
    p, q, base = random_setup(0)
    with pytest.raises(ShapeError):
        forward(q[None, :, :8], base[None], p)
    with pytest.raises(ShapeError):
        RetrievalParams.init(dim=10, heads=4)


def test_soft_target_properties():
    spec = MapSpec()
    s = soft_target(GridIndex(5, 5), spec, 50.0)
    assert abs(s.sum() - 1.0) <= 1e-12 and (s > 0).all()
    assert s.argmax() == 55
    assert s[55] / s[56] == pytest.approx(math.exp(0.5), abs=1e-9)
    sharp = soft_target(GridIndex(2, 7), spec, 1e-3)
    assert sharp[27] == pytest.approx(1.0) and sharp.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        soft_target(GridIndex(0, 0), spec, 0.0)


def test_loss_analytic_values():
    lv = loss(np.zeros(100), GridIndex(5, 5))
    assert abs(lv.bce - math.log(2)) <= 1e-9
    assert abs(lv.dist - math.log(100)) <= 1e-9
    assert lv.total == pytest.approx(math.log(2) + math.log(100))
    assert abs(loss(np.full(100, 3.7), GridIndex(0, 9)).dist - math.log(100)) <= 1e-9


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=100)
    target = GridIndex(3, 4)
    cfg = LossConfig(lam=0.7)
    g = loss(z, target, cfg).grad
    h = 1e-4
    num = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        num[i] = (loss(z + e, target, cfg).total - loss(z - e, target, cfg).total) / (2 * h)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4


def test_loss_monotone_in_lambda():
    z = np.random.default_rng(1).normal(size=100)
    vals = [loss(z, GridIndex(1, 1), LossConfig(lam=l)).total for l in (0.0, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals)


@pytest.mark.parametrize("seed", range(3))
def test_parameter_gradients(seed):
    assert gradient_check(seed) < 1e-3


def test_top_cells():
    z = np.arange(100, dtype=float)
    assert top_cells(z) == [GridIndex(9, 9)]
    assert top_cells(np.zeros(100)) == [GridIndex(0, 0)]
    w = np.random.default_rng(2).normal(size=100)
    ref = [GridIndex(*divmod(int(i), 10)) for i in sorted(range(100), key=lambda i: (-w[i], i))[:5]]
    assert top_cells(w, 5) == ref
    assert top_cells(w + 123.0, 5) == ref
    with pytest.raises(ValueError):
        top_cells(w, 0)


def test_batch_loss_is_mean_of_singles():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 100))
    y = np.zeros((4, 100))
    y[np.arange(4), [0, 10, 20, 99]] = 1
    soft = np.stack([soft_target(GridIndex.from_flat(int(k), 10)) for k in (0, 10, 20, 99)])
    whole = batch_loss(z, y, soft, 1.0).total
    parts = [batch_loss(z[i], y[i], soft[i], 1.0).total for i in range(4)]
    assert whole == pytest.approx(np.mean(parts), abs=1e-12)


def tiny_set(n=4, t=4, d=8, seed=0):
    rng = np.random.default_rng(seed)
    views = [rng.normal(size=(1, t, d)) for _ in range(n)]
    cells = [GridIndex(i % 10, (3 * i) % 10) for i in range(n)]
    return TrainSet(views, ["m"] * n, cells, {"m": rng.normal(size=(100, d))})


def test_training_overfits_single_sample():
    # with lam > 0 the floor is the soft target's entropy, so fit BCE alone
    ts = tiny_set(1)
    res = train(ts, TrainConfig(epochs=150, batch=1, dim=8, heads=2, lr=3e-2, lam=0.0))
    assert res.curve[-1]["train_loss"] < 0.05
    z, _ = forward(ts.views[0][:1], ts.bases["m"][None], res.params)
    assert top_cells(z[0]) == [ts.cells[0]]


def test_zero_epochs_returns_initialisation():
    ts = tiny_set()
    res = train(ts, TrainConfig(epochs=0, dim=8, heads=2, seed=4))
    ref = RetrievalParams.init(4, 100, 8, 2, 4)
    assert res.best_epoch == 0 and not res.curve
    for k, v in ref.tensors().items():
        assert np.array_equal(v, res.params.tensors()[k])


def test_training_is_deterministic():
    ts = tiny_set(6)
    cfg = TrainConfig(epochs=3, batch=2, dim=8, heads=2)
    a, b = train(ts, cfg), train(ts, cfg)
    assert a.curve == b.curve
    assert all(np.array_equal(a.params.tensors()[k], b.params.tensors()[k]) for k in a.params.tensors())


def test_non_finite_input_raises_divergence():
    ts = tiny_set()
    ts.views[0][:] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train(ts, TrainConfig(epochs=2, batch=4, dim=8, heads=2))
    assert err.value.epoch == 1


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(batch=0), dict(epochs=-1), dict(sigma_d=0.0),
                                 dict(dim=10, heads=4), dict(momentum=1.0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


@pytest.fixture(scope="module")
def single_map_runs(map0):
    from mapreloc.eval import build_dataset, training_material
    spec = MapSpec()
    maps = {"m0": map0}
    samples = build_dataset(maps, 500, frame_count=1, seed=0, render=False)
    tr = [s for s in samples if s.split == "train"]
    va = [s for s in samples if s.split == "val"]
    ts, val = training_material(tr, maps, va, 4, 0, spec)
    runs = {lam: train(ts, TrainConfig(lam=lam), spec, val=val) for lam in (1.0, 0.0)}
    return {lam: r.curve[r.best_epoch - 1] for lam, r in runs.items()}


def test_single_map_top1(single_map_runs):
    assert single_map_runs[1.0]["val_top1"] >= 0.90


def test_distance_loss_helps_top3(single_map_runs):
    assert single_map_runs[1.0]["val_top3"] >= single_map_runs[0.0]["val_top3"]
