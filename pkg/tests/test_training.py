import numpy as np
import pytest

from lidar_voice.model import ModelConfig, init_params, load_checkpoint, model_forward
from lidar_voice.training import (ArrayDataset, ClassMetrics, EarlyStopper, FitConfig, OptimizerState,
                                  PlateauController, adam_step, early_stop_update, evaluate, fit,
                                  lr_plateau_update, split_indices, train_epoch)
from oracles import scalar_adam

TINY = ModelConfig(width=1 / 32, image_size=16, n_points=32, seed=1)


def run_adam(theta, grads, lr=0.0005):
    p = {"x": np.array([theta])}
    state = OptimizerState(lr=lr)
    for g in grads:
        adam_step(p, {"x": np.array([g])}, state)
    return float(p["x"][0])


def toy_data(n, config, seed=0):
    """Classes separable by which axis the Gaussian cloud is stretched along."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    stretch = np.array([[4, 1, 1], [1, 4, 1], [1, 1, 4], [1, 1, 1]], dtype=float)
    pts = rng.normal(size=(n, config.n_points, 3)) * stretch[labels][:, None, :]
    imgs = np.zeros((n, config.image_size, config.image_size, 3))
    imgs[np.arange(n), :, :, labels % 3] = 1.0
    return ArrayDataset(pts, imgs, labels)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_hand_value():
    assert run_adam(1.0, [1.0]) == pytest.approx(1.0 - 0.0005 / (1 + 1e-8), abs=1e-15)
    assert abs(run_adam(1.0, [1.0]) - 0.9995) < 1e-9


def test_adam_zero_gradient_leaves_params():
    assert run_adam(0.7, [0.0, 0.0, 0.0]) == 0.7


@pytest.mark.parametrize("seed", range(10))
def test_adam_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        theta = float(rng.normal(scale=5))
        grads = rng.normal(scale=10 ** rng.uniform(-3, 2), size=int(rng.integers(1, 40))).tolist()
        want = scalar_adam(theta, grads)
        got = run_adam(theta, grads)
        assert abs(got - want) <= 1e-12 * max(abs(want), 1e-300)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"x": np.zeros(3)}, {"x": np.zeros(2)}, OptimizerState(lr=0.1))


# ---------------------------------------------------------------------------
# schedules


def test_plateau_examples():
    assert set(lr_plateau_update([1.0 - 0.01 * i for i in range(30)])) == {0.0005}
    lrs = lr_plateau_update([1.0] * 6)
    assert lrs[:5] == [0.0005] * 5 and lrs[5] == 0.00025
    assert lr_plateau_update([1.0] * 11)[-1] == 0.000125
    # sub-threshold improvements do not count
    assert lr_plateau_update([1.0, 0.99995, 0.99994, 0.99993, 0.99992, 0.99991])[-1] == 0.00025


def test_plateau_floor():
    ctl = PlateauController(2e-6, patience=1)
    for _ in range(5):
        lr = ctl.update(1.0)
    assert lr == 1e-6


def test_early_stop_examples():
    assert early_stop_update([1.0 / (i + 1) for i in range(100)]) == (None, 100)
    assert early_stop_update([1.0] * 16) == (16, 1)
    assert early_stop_update([1.0] * 15) == (None, 1)
    # an improvement on the 15th flat epoch resets the counter
    hist = [1.0] * 15 + [0.5] + [0.5] * 15
    assert early_stop_update(hist) == (31, 16)


def test_early_stopper_state():
    s = EarlyStopper(patience=2)
    assert [s.update(v) for v in (3.0, 2.0, 2.0, 2.0)] == [False, False, False, True]
    assert s.best_epoch == 2 and s.best == 2.0


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        FitConfig(class_weights=(1, 2, 3))
    with pytest.raises(ValueError):
        FitConfig(batch_size=0)


# ---------------------------------------------------------------------------
# metrics


def test_metrics_two_class_hand_values():
    m = ClassMetrics.from_confusion([[8, 2], [1, 9]])
    assert m.precision[0] == pytest.approx(8 / 9)
    assert m.recall[0] == pytest.approx(0.8)
    assert m.f1[0] == pytest.approx(2 * (8 / 9 * 0.8) / (8 / 9 + 0.8))
    assert m.accuracy == pytest.approx(17 / 20)


def test_metrics_perfect_and_empty_column():
    m = ClassMetrics.from_predictions([0, 1, 1, 2], [0, 1, 1, 2])
    assert m.accuracy == 1.0
    assert m.precision[:3].tolist() == [1.0, 1.0, 1.0] and m.f1[3] == 0.0
    m = ClassMetrics.from_predictions([0, 1], [0, 0])
    assert m.precision.tolist() == [0.5, 0.0, 0.0, 0.0]
    assert m.confusion[1, 0] == 1
    assert set(m.to_dict()) == {"accuracy", "precision", "recall", "f1", "confusion"}


def test_split_indices():
    tr, va = split_indices(3000, 0.2, seed=0)
    assert (len(tr), len(va)) == (2400, 600)
    assert not set(tr) & set(va) and len(set(tr) | set(va)) == 3000
    tr2, va2 = split_indices(3000, 0.2, seed=0)
    assert np.array_equal(va, va2)


# ---------------------------------------------------------------------------
# training loop


def test_class_weight_scaling_scales_loss_and_gradients():
    params = init_params(TINY)
    data = toy_data(4, TINY)
    base = (1.0, 5.0, 20.0, 5.0)

    def loss_and_grads(weights):
        for p in params.values():
            p.zero_grad()
        _, loss = model_forward(params, ModelConfig(**{**TINY.__dict__, "ortho_weight": 0.0}),
                                data.points, data.images, data.labels, class_weights=weights)
        loss.backward()
        return float(loss.data), {k: p.grad.copy() for k, p in params.items()}

    l1, g1 = loss_and_grads(base)
    l4, g4 = loss_and_grads(tuple(4 * w for w in base))
    assert l4 == 4 * l1
    for k in g1:
        np.testing.assert_array_equal(g4[k], 4 * g1[k])


def test_single_batch_epoch_reports_batch_loss():
    data = toy_data(5, TINY)
    params = init_params(TINY)
    fc = FitConfig(batch_size=8, seed=4)
    ref = init_params(TINY)
    _, want = model_forward(ref, TINY, data.subset(np.random.default_rng(5).permutation(5)).points,
                            data.subset(np.random.default_rng(5).permutation(5)).images,
                            data.subset(np.random.default_rng(5).permutation(5)).labels,
                            training=True, rng=np.random.default_rng([4, 1]))
    loss, _ = train_epoch(params, OptimizerState(lr=fc.lr0), data, fc, TINY, epoch=1)
    assert loss == pytest.approx(float(want.data), rel=1e-12)


def test_micro_batch_loss_decreases():
    data = toy_data(8, TINY)
    params = init_params(TINY)
    state = OptimizerState(lr=0.0005)
    config = ModelConfig(**{**TINY.__dict__, "dropout_rate": 0.0})
    losses = []
    for _ in range(10):
        for p in params.values():
            p.zero_grad()
        _, loss = model_forward(params, config, data.points, data.images, data.labels)
        loss.backward()
        losses.append(float(loss.data))
        adam_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()}, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_fit_is_deterministic_and_restores_best(tmp_path):
    train, val = toy_data(16, TINY, 0), toy_data(8, TINY, 1)
    fc = FitConfig(max_epochs=4, seed=2)
    p1, r1 = fit(train, val, fc, TINY, checkpoint_path=tmp_path / "best.ckpt")
    p2, r2 = fit(train, val, fc, TINY)
    assert [r.line(with_time=False) for r in r1] == [r.line(with_time=False) for r in r2]
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)

    best = min(r1, key=lambda r: r.val_loss)
    val_loss, _ = evaluate(p1, TINY, val)
    assert val_loss == pytest.approx(best.val_loss, rel=1e-12)
    saved, _, extra = load_checkpoint(tmp_path / "best.ckpt")
    assert extra["epoch"] == best.epoch
    assert all(np.array_equal(saved[k].data, p1[k].data) for k in p1)


def test_fit_single_epoch_and_report_line():
    _, reports = fit(toy_data(8, TINY), toy_data(4, TINY, 1), FitConfig(max_epochs=1), TINY)
    assert len(reports) == 1
    line = reports[0].line()
    assert line.startswith("epoch=1 train_acc=") and "wall_ms=" in line
    assert "wall_ms" not in reports[0].line(with_time=False)


def test_fit_learns_separable_toy_set():
    # Dropout off: with 1/5/20/5 weights the weight-1 class otherwise lags on this tiny set.
    config = ModelConfig(width=0.125, image_size=16, n_points=32, seed=1, mode="lidar_only", dropout_rate=0.0)
    train = toy_data(32, config)
    params, _ = fit(train, train, FitConfig(max_epochs=60, lr0=0.003), config)
    _, metrics = evaluate(params, config, train)
    assert metrics.accuracy >= 0.95
