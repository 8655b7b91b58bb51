import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsim.learn import (
    FULL_MASK,
    ArraySource,
    ModelSpec,
    ParamVector,
    ShapeError,
    TrainerConfig,
    UpdateMask,
    apply_mask,
    evaluate,
    init_params,
    last_layer_mask,
    local_train,
    loss_and_grad,
    mask_for_round,
)
from oracles import central_differences, ref_softmax_loss


def test_param_vector_invariants():
    with pytest.raises(ValueError):
        ParamVector(np.array([1.0, np.nan]), ((1, 2),))
    with pytest.raises(ValueError):
        ParamVector(np.array([1.0, 2.0, 3.0]), ((1, 2),))
    p = ParamVector(np.arange(6.0), ((2, 2), (1, 2)))
    assert [layer.shape for layer in p.layers()] == [(2, 2), (1, 2)]
    assert ParamVector.from_bytes(p.to_bytes()).equals(p)


def test_softmax_init_shape_and_zero_bias():
    p = init_params(ModelSpec("softmax", 3, 2), seed=1)
    assert len(p) == 8
    assert p.values[6:].tolist() == [0.0, 0.0]
    s = math.sqrt(6 / 5)
    assert np.all(np.abs(p.values[:6]) <= s)
    assert init_params(ModelSpec("softmax", 3, 2), seed=1).equals(p)


def test_mlp_param_count():
    assert len(init_params(ModelSpec("mlp", 4, 3, hidden_dim=5), seed=0)) == 43


def test_zero_weights_two_classes_loss_is_ln2():
    spec = ModelSpec("softmax", 3, 2)
    zero = ParamVector(np.zeros(8), spec.shapes)
    loss, grad = loss_and_grad(spec, zero, np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]), np.array([0, 1]))
    assert loss == math.log(2)
    assert np.all(np.isfinite(grad.values))


def test_zero_features_give_zero_weight_gradient():
    spec = ModelSpec("softmax", 3, 2)
    p = ParamVector(np.zeros(8), spec.shapes)
    _, grad = loss_and_grad(spec, p, np.zeros((4, 3)), np.array([0, 1, 0, 1]))
    assert np.all(grad.values[:6] == 0)
    assert np.all(grad.values[6:] == 0)  # balanced labels, symmetric classes


def test_dimension_mismatch():
    spec = ModelSpec("softmax", 3, 2)
    with pytest.raises(ShapeError):
        loss_and_grad(spec, init_params(spec), np.zeros((2, 4)), np.array([0, 1]))
    with pytest.raises(ShapeError):
        loss_and_grad(spec, init_params(ModelSpec("softmax", 4, 2)), np.zeros((2, 3)), np.array([0, 1]))


def test_loss_matches_reference_loss():
    spec = ModelSpec("softmax", 4, 3)
    p = init_params(spec, seed=5)
    x = np.random.default_rng(0).normal(size=(6, 4))
    y = np.array([0, 1, 2, 2, 1, 0])
    W, b = p.layers()
    assert math.isclose(loss_and_grad(spec, p, x, y)[0], ref_softmax_loss(W, b[0], x, y), rel_tol=1e-12)


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))


def test_gradient_matches_finite_differences_100_triples_per_family():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for family in ("softmax", "mlp"):
        for trial in range(100):
            d, c = int(rng.integers(1, 7)), int(rng.integers(2, 6))
            spec = ModelSpec(family, d, c, hidden_dim=int(rng.integers(1, 6)) if family == "mlp" else None)
            values = rng.uniform(-1, 1, spec.n_params)
            n = int(rng.integers(1, 9))
            x = rng.normal(size=(n, d))
            y = rng.integers(0, c, n)

            def f(v):
                return loss_and_grad(spec, ParamVector(v, spec.shapes), x, y)[0]

            analytic = loss_and_grad(spec, ParamVector(values, spec.shapes), x, y)[1].values
            numeric = central_differences(f, values, 1e-5)
            err = _rel_err(analytic, numeric).max()
            worst = max(worst, err)
            assert err < 1e-4, (family, trial, err)
    assert worst < 1e-4


def test_single_sgd_step_by_hand():
    spec = ModelSpec("softmax", 2, 2)
    zero = ParamVector(np.zeros(6), spec.shapes)
    x, y = np.array([[1.0, 2.0]]), np.array([1])
    fd = central_differences(lambda v: loss_and_grad(spec, ParamVector(v, spec.shapes), x, y)[0], zero.values)
    # softmax of zero logits is (1/2, 1/2): dlogits = (1/2, -1/2)
    by_hand = np.array([0.5, -0.5, 1.0, -1.0, 0.5, -0.5])
    assert np.allclose(fd, by_hand, atol=1e-9)
    out = local_train(spec, zero, ArraySource(x, y), TrainerConfig(lr=0.1, local_epochs=1, batch_size=1), rng_seed=0)
    assert out.params.values.tolist() == (-0.1 * by_hand).tolist()
    assert out.tau == 1 and out.n_samples == 1


def _toy(seed=0, n=40, d=3, c=3):
    rng = np.random.default_rng(seed)
    return ArraySource(rng.normal(size=(n, d)), rng.integers(0, c, n)), ModelSpec("softmax", d, c)


def test_prox_mu_zero_is_bitwise_plain():
    data, spec = _toy()
    g = init_params(spec, 3)
    plain = local_train(spec, g, data, TrainerConfig(lr=0.1, batch_size=8), rng_seed=(1, 2))
    prox = local_train(spec, g, data, TrainerConfig(lr=0.1, batch_size=8, variant="prox", mu=0.0), rng_seed=(1, 2))
    assert plain.params.values.tobytes() == prox.params.values.tobytes()


def test_prox_pulls_toward_global():
    data, spec = _toy()
    g = init_params(spec, 3)
    plain = local_train(spec, g, data, TrainerConfig(lr=0.5, batch_size=4, local_epochs=5), rng_seed=1)
    prox = local_train(spec, g, data, TrainerConfig(lr=0.5, batch_size=4, local_epochs=5, variant="prox", mu=1.0), rng_seed=1)
    assert np.linalg.norm(prox.params.values - g.values) < np.linalg.norm(plain.params.values - g.values)


def test_lr_zero_is_identity_and_counts_steps():
    data, spec = _toy(n=10)
    g = init_params(spec, 3)
    cfg = TrainerConfig(lr=0.0, batch_size=4, local_epochs=2)
    out = local_train(spec, g, data, cfg, rng_seed=0)
    assert out.params.equals(g)
    assert out.tau == 6 == cfg.expected_steps(10)


def test_batch_larger_than_data_is_one_full_batch():
    data, spec = _toy(n=5)
    out = local_train(spec, init_params(spec), data, TrainerConfig(batch_size=64, local_epochs=3), rng_seed=0)
    assert out.tau == 3


def test_local_train_is_deterministic():
    data, spec = _toy()
    g = init_params(spec, 3)
    a = local_train(spec, g, data, TrainerConfig(lr=0.1, batch_size=7), rng_seed=(4, 5))
    b = local_train(spec, g, data, TrainerConfig(lr=0.1, batch_size=7), rng_seed=(4, 5))
    c = local_train(spec, g, data, TrainerConfig(lr=0.1, batch_size=7), rng_seed=(4, 6))
    assert a.params.values.tobytes() == b.params.values.tobytes()
    assert a.params.values.tobytes() != c.params.values.tobytes()


def test_pfedme_personal_model_and_step_count():
    data, spec = _toy(n=16)
    g = init_params(spec, 3)
    cfg = TrainerConfig(lr=0.05, batch_size=8, local_epochs=1, variant="pfedme", lam=15.0, inner_steps=3)
    out = local_train(spec, g, data, cfg, rng_seed=0)
    assert out.tau == 6 == cfg.expected_steps(16)
    assert out.personal is not None and not out.personal.equals(out.params)
    assert np.all(np.isfinite(out.params.values))


def test_pfedme_resumes_from_carried_personal_model():
    data, spec = _toy(n=32, seed=3)
    w = init_params(spec, 1)
    cfg = TrainerConfig(lr=0.01, batch_size=32, local_epochs=1, variant="pfedme", lam=50.0, inner_steps=1)
    first = local_train(spec, w, data, cfg, rng_seed=0)
    fresh = local_train(spec, first.params, data, cfg, rng_seed=1)
    carried = local_train(spec, first.params, data, cfg, rng_seed=1, personal=first.personal)
    again = local_train(spec, first.params, data, cfg, rng_seed=1, personal=first.personal)
    assert not carried.personal.equals(fresh.personal)
    assert carried.params.values.tobytes() == again.params.values.tobytes()


def test_evaluate_constant_predictor():
    spec = ModelSpec("softmax", 1, 2)
    always_zero = ParamVector(np.array([0.0, 0.0, 1.0, 0.0]), spec.shapes)
    ev = evaluate(spec, always_zero, np.ones((4, 1)), np.array([0, 0, 1, 1]))
    assert ev.accuracy == 0.5 and ev.per_class_accuracy == [1.0, 0.0]


def test_evaluate_tie_break_picks_lowest_class_and_absent_classes_are_nan():
    spec = ModelSpec("softmax", 2, 3)
    zero = ParamVector(np.zeros(spec.n_params), spec.shapes)
    y = np.array([0, 1, 1, 0, 1, 0])
    ev = evaluate(spec, zero, np.random.default_rng(0).normal(size=(6, 2)), y)
    assert ev.accuracy == 0.5  # share of class 0
    assert ev.per_class_accuracy[:2] == [1.0, 0.0] and math.isnan(ev.per_class_accuracy[2])


@given(st.integers(0, 1000))
def test_accuracy_is_frequency_weighted_per_class_mean(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("softmax", 3, 4)
    x, y = rng.normal(size=(30, 3)), rng.integers(0, 4, 30)
    ev = evaluate(spec, init_params(spec, seed), x, y)
    freq = np.bincount(y, minlength=4)
    weighted = sum(f * a for f, a in zip(freq, ev.per_class_accuracy) if f) / 30
    assert math.isclose(ev.accuracy, weighted, abs_tol=1e-12)


def test_masks():
    spec = ModelSpec("mlp", 4, 3, hidden_dim=5)
    base, full = init_params(spec, 1), init_params(spec, 2)
    assert apply_mask(full, base, FULL_MASK) is full
    m = last_layer_mask(spec)
    assert (m.start, m.stop) == (25, 43)
    partial = apply_mask(full, base, m)
    assert int(np.sum(partial.values != base.values)) <= 18
    assert partial.values[:25].tolist() == base.values[:25].tolist()
    # masked then full reconstructs the full update
    assert apply_mask(full, partial, FULL_MASK).equals(full)
    with pytest.raises(ShapeError):
        apply_mask(full, base, UpdateMask(40, 50))


def test_mask_period_schedule():
    spec = ModelSpec("softmax", 2, 2)
    cfg = TrainerConfig(mask_policy="partial", mask_period=3)
    kinds = ["full" if mask_for_round(spec, cfg, r).is_full else "partial" for r in range(6)]
    assert kinds == ["partial", "partial", "full", "partial", "partial", "full"]
    assert mask_for_round(spec, TrainerConfig(), 0).is_full


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(lr=-1),
        dict(local_epochs=0),
        dict(batch_size=0),
        dict(variant="prox", mu=-1),
        dict(variant="pfedme", lam=0),
        dict(mask_period=0),
    ],
)
def test_trainer_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainerConfig(**kwargs)
