"""Training loop and evaluation metrics."""

import numpy as np
import pytest

from poisonlab import datapipe, models, victim


def _blob_dataset(seed, per_class=40, size=6, classes=2):
    """Trivially separable: class c occupies brightness band c."""
    rng = np.random.default_rng(seed)
    rows = []
    for cls in range(classes):
        lo = cls / classes
        for i in range(per_class):
            px = rng.uniform(lo + 0.02, lo + 1.0 / classes - 0.02,
                             size=(size, size, 3))
            rows.append(datapipe.LabeledImage(px, cls, cls * per_class + i))
    return datapipe.Dataset(rows, classes)


def _spec(size=6, classes=2, seed=0):
    return models.ModelSpec("mlp-small", (size, size, 3), classes, seed=seed)


def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError):
        victim.TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        victim.TrainConfig(batch=0)
    with pytest.raises(ValueError):
        victim.TrainConfig(lr=-0.1)
    with pytest.raises(ValueError):
        victim.TrainConfig(momentum=1.0)


def test_train_needs_exactly_one_starting_point():
    ds = _blob_dataset(0, per_class=4)
    cfg = victim.TrainConfig(epochs=1, batch=4, seed=1)
    with pytest.raises(ValueError):
        victim.train(ds, cfg)
    with pytest.raises(ValueError):
        victim.train(ds, cfg, spec=_spec(), state=models.build(_spec()))


def test_train_deterministic_and_seed_sensitive():
    ds = _blob_dataset(3)
    cfg = victim.TrainConfig(epochs=2, batch=16, lr=0.05, drop_epochs=(), seed=9)
    a = victim.train(ds, cfg, spec=_spec(seed=5))
    b = victim.train(ds, cfg, spec=_spec(seed=5))
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa, pb)
    cfg2 = victim.TrainConfig(epochs=2, batch=16, lr=0.05, drop_epochs=(), seed=10)
    c = victim.train(ds, cfg2, spec=_spec(seed=5))
    assert any(not np.array_equal(pa, pc) for pa, pc in zip(a.params, c.params))


def test_zero_lr_and_zero_epochs_leave_params_alone():
    ds = _blob_dataset(4, per_class=8)
    init = models.build(_spec(seed=2))
    frozen = victim.train(ds, victim.TrainConfig(epochs=3, batch=8, lr=0.0, seed=1),
                          state=init)
    for p0, p1 in zip(init.params, frozen.params):
        assert np.array_equal(p0, p1)
    untouched = victim.train(ds, victim.TrainConfig(epochs=0, batch=8, seed=1),
                             state=init)
    for p0, p1 in zip(init.params, untouched.params):
        assert np.array_equal(p0, p1)
    assert untouched.epochs_trained == init.epochs_trained


def test_input_state_never_mutated():
    ds = _blob_dataset(5, per_class=8)
    init = models.build(_spec(seed=3))
    before = [p.copy() for p in init.params]
    victim.train(ds, victim.TrainConfig(epochs=1, batch=8, lr=0.1, seed=2), state=init)
    for p0, p1 in zip(before, init.params):
        assert np.array_equal(p0, p1)


def test_epochs_trained_accumulates():
    ds = _blob_dataset(6, per_class=8)
    cfg = victim.TrainConfig(epochs=3, batch=8, lr=0.01, seed=4)
    m = victim.train(ds, cfg, spec=_spec(seed=1))
    assert m.epochs_trained == 3
    m2 = victim.train(ds, victim.TrainConfig(epochs=2, batch=8, lr=0.01, seed=5),
                      state=m)
    assert m2.epochs_trained == 5
    assert m.epochs_trained == 3


def test_learns_separable_data():
    ds = _blob_dataset(7)
    cfg = victim.TrainConfig(epochs=3, batch=16, lr=0.05, drop_epochs=(),
                             augment=datapipe.AugmentPolicy(enabled=False), seed=6)
    m = victim.train(ds, cfg, spec=_spec(seed=7))
    assert victim.validation_accuracy(m, ds) > 0.9


def test_lr_schedule_drops():
    cfg = victim.TrainConfig(epochs=30, lr=0.05, drop_epochs=(15, 25), drop_factor=0.1)
    assert victim._lr_at(cfg, 0) == pytest.approx(0.05)
    assert victim._lr_at(cfg, 14) == pytest.approx(0.05)
    assert victim._lr_at(cfg, 15) == pytest.approx(0.005)
    assert victim._lr_at(cfg, 25) == pytest.approx(0.0005)


def test_divergence_is_reported_with_location(monkeypatch):
    ds = _blob_dataset(8, per_class=16)
    cfg = victim.TrainConfig(epochs=1, batch=8, seed=3)
    real = models.loss_and_param_grads
    calls = []

    def poisoned_loss(state, images, labels):
        loss, grads = real(state, images, labels)
        calls.append(1)
        if len(calls) == 3:
            return float("nan"), grads
        return loss, grads

    monkeypatch.setattr(victim.models, "loss_and_param_grads", poisoned_loss)
    with pytest.raises(victim.TrainingDivergedError, match="epoch 0, batch 2"):
        victim.train(ds, cfg, spec=_spec(seed=8))


def _constant_predictor(spec, winner):
    """All-zero weights except a positive bias on one output class."""
    state = models.build(spec)
    for i, p in enumerate(state.params):
        state.params[i] = np.zeros_like(p)
    state.params[-1][winner] = 1.0
    return state


def test_success_rate_counts_adversarial_predictions():
    spec = _spec(classes=3)
    variants = [datapipe.LabeledImage(np.full((6, 6, 3), 0.5), 0, 100 + i, float(i))
                for i in range(4)]
    always_two = _constant_predictor(spec, 2)
    sr, flags = victim.success_rate(always_two, variants, y_adv=2)
    assert sr == 1.0 and flags == [True] * 4
    sr0, flags0 = victim.success_rate(always_two, variants, y_adv=1)
    assert sr0 == 0.0 and flags0 == [False] * 4
    assert victim.success_rate(always_two, [], y_adv=2) == (0.0, [])


def test_evaluate_overall_rate_is_exact_count_ratio():
    spec = _spec(classes=3)
    mk = lambda i: datapipe.LabeledImage(np.full((6, 6, 3), 0.4), 0, 200 + i, float(i))
    target = datapipe.TargetSpec(y_adv=1, known=[mk(0), mk(1)],
                                 heldout=[mk(2), mk(3), mk(4)])
    val = _blob_dataset(9, per_class=5, classes=3)
    always_one = _constant_predictor(spec, 1)
    out = victim.evaluate(always_one, val, target)
    assert out["sr_known"] == 1.0
    assert out["sr_heldout"] == 1.0
    assert out["sr_overall"] == 1.0
    assert len(out["variants"]) == 5
    assert [r["known"] for r in out["variants"]] == [True, True, False, False, False]
    never = _constant_predictor(spec, 0)
    out0 = victim.evaluate(never, val, target)
    assert out0["sr_overall"] == 0.0


def test_heatmap_shape_edges_and_columns():
    spec = _spec(classes=2)
    variants = [datapipe.LabeledImage(np.full((6, 6, 3), 0.3), 0, 300 + i, float(10 * i))
                for i in range(12)]
    seen = []

    def pipeline(view):
        seen.append(view.viewpoint)
        return _constant_predictor(spec, 1)

    matrix, edges, columns = victim.heatmap(variants, pipeline, bins=4, y_adv=1)
    assert matrix.shape == (4, 4)
    assert len(edges) == 5 and edges == sorted(edges)
    # every victim predicts the adversarial class, so each bin saturates
    assert (matrix == 3).all()
    assert len(columns) == 4 and seen == [v.viewpoint for v in columns]


def test_heatmap_rejects_too_few_variants():
    variants = [datapipe.LabeledImage(np.full((6, 6, 3), 0.3), 0, 400 + i, float(i))
                for i in range(3)]
    with pytest.raises(ValueError):
        victim.heatmap(variants, lambda v: None, bins=4, y_adv=1)
