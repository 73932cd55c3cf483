import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rebalance.errors import InvalidInputError
from rebalance.models import LinearHead, OptimConfig
from rebalance.services import mathcore


def test_softmax_is_stable_for_large_logits():
    p = mathcore.softmax([1000.0, 999.0, -1000.0])
    assert np.all(np.isfinite(p))
    assert_allclose(p.sum(), 1.0)
    assert p[0] > p[1] > p[2]


def test_softmax_rejects_empty_and_non_finite():
    with pytest.raises(InvalidInputError):
        mathcore.softmax([])
    with pytest.raises(InvalidInputError):
        mathcore.softmax([0.0, np.nan])


def test_cross_entropy_hand_values():
    assert mathcore.cross_entropy([math.log(2.0), 0.0], 1) == pytest.approx(math.log(3.0))
    assert mathcore.cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2.0))


def test_cross_entropy_batch_matches_rows():
    logits = np.array([[math.log(2.0), 0.0], [0.0, 0.0]])
    losses = mathcore.cross_entropy(logits, np.array([1, 0]))
    assert_allclose(losses, [math.log(3.0), math.log(2.0)])


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InvalidInputError):
        mathcore.cross_entropy([0.0, 0.0], 2)


def test_kl_and_tvd_hand_values():
    p = [2.0 / 3.0, 1.0 / 3.0]
    q = [0.5, 0.5]
    assert mathcore.kl_divergence(p, q) == pytest.approx(0.056633, abs=1e-6)
    assert mathcore.total_variation(p, q) == pytest.approx(1.0 / 6.0)
    assert mathcore.kl_divergence([1.0, 0.0], q) == pytest.approx(math.log(2.0))


def test_kl_needs_support():
    with pytest.raises(InvalidInputError):
        mathcore.kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_logit_divergence_matches_probability_form():
    zf = np.array([math.log(2.0), 0.0])
    zg = np.zeros(2)
    expected = mathcore.kl_divergence(mathcore.softmax(zf), mathcore.softmax(zg))
    assert mathcore.logit_divergence(zf, zg, "kl") == pytest.approx(expected)
    assert mathcore.logit_divergence(zf, zg, "tvd") == pytest.approx(1.0 / 6.0)
    # saturated outputs stay finite
    assert np.isfinite(mathcore.logit_divergence([800.0, 0.0], [0.0, 800.0]))


def test_divergence_properties_on_random_pairs():
    rng = np.random.default_rng(11)
    for k in (2, 3, 5):
        p = rng.dirichlet(np.ones(k), size=10_000 // 3 + 1)
        q = rng.dirichlet(np.ones(k), size=p.shape[0])
        kl = mathcore.kl_divergence(p, q)
        tvd = mathcore.total_variation(p, q)
        assert np.all(kl >= 0.0)
        assert np.all((tvd >= 0.0) & (tvd <= 1.0))
        assert_allclose(tvd, mathcore.total_variation(q, p))
        assert np.all(tvd <= np.sqrt(kl / 2.0) + 1e-12)


def test_linear_forward_shapes():
    head = LinearHead(np.arange(6.0).reshape(2, 3), [1.0, -1.0])
    x = np.array([1.0, 0.0, 2.0])
    assert_allclose(mathcore.linear_forward(head, x), [5.0, 12.0])
    assert mathcore.linear_forward(head, np.stack([x, x])).shape == (2, 2)
    with pytest.raises(InvalidInputError):
        mathcore.linear_forward(head, [1.0, 2.0])


def _loss(head, x, label):
    return mathcore.cross_entropy(mathcore.linear_forward(head, x), label)


def test_ce_gradient_matches_central_differences():
    rng = np.random.default_rng(2024)
    h = 1e-6
    for _ in range(100):
        k, d = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        head = LinearHead(rng.normal(scale=0.5, size=(k, d)), rng.normal(scale=0.5, size=k))
        x = rng.normal(size=d)
        label = int(rng.integers(0, k))
        grad_w, grad_b = mathcore.ce_gradient(head, x, label)

        numeric_w = np.zeros_like(grad_w)
        for i in range(k):
            for j in range(d):
                plus, minus = head.copy(), head.copy()
                plus.weights[i, j] += h
                minus.weights[i, j] -= h
                numeric_w[i, j] = (_loss(plus, x, label) - _loss(minus, x, label)) / (2 * h)
        numeric_b = np.zeros_like(grad_b)
        for i in range(k):
            plus, minus = head.copy(), head.copy()
            plus.bias[i] += h
            minus.bias[i] -= h
            numeric_b[i] = (_loss(plus, x, label) - _loss(minus, x, label)) / (2 * h)

        analytic = np.concatenate([grad_w.ravel(), grad_b])
        numeric = np.concatenate([numeric_w.ravel(), numeric_b])
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / scale < 1e-6


def test_batch_gradient_is_mean_of_rows():
    rng = np.random.default_rng(5)
    head = LinearHead(rng.normal(size=(3, 4)), rng.normal(size=3))
    X = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, 6)
    loss, grad_w, grad_b = mathcore.ce_gradient_batch(head, X, y)
    rows = [mathcore.ce_gradient(head, X[i], int(y[i])) for i in range(6)]
    assert_allclose(grad_w, np.mean([r[0] for r in rows], axis=0))
    assert_allclose(grad_b, np.mean([r[1] for r in rows], axis=0))
    assert loss == pytest.approx(np.mean(mathcore.cross_entropy(mathcore.linear_forward(head, X), y)))


def test_sgd_step_applies_coupled_decay():
    assert_allclose(mathcore.sgd_step([1.0, 2.0], [0.5, 0.0], lr=0.1, weight_decay=0.5), [0.9, 1.9])


def test_adaptive_first_step_moves_by_lr():
    state = mathcore.AdamState.fresh(np.zeros(3))
    updated, state = mathcore.adaptive_step(state, np.zeros(3), np.array([0.2, -3.0, 1e-3]), lr=0.01)
    assert state.t == 1
    assert_allclose(updated, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adaptive_decay_is_decoupled():
    state = mathcore.AdamState.fresh(np.ones(2))
    updated, _ = mathcore.adaptive_step(state, np.ones(2), np.zeros(2), lr=0.1, weight_decay=0.5)
    assert_allclose(updated, [0.95, 0.95])


def test_lr_schedules():
    cosine = OptimConfig(lr0=0.1, schedule="cosine", total_steps=100)
    assert mathcore.lr_at(cosine, 0) == pytest.approx(0.1)
    assert mathcore.lr_at(cosine, 50) == pytest.approx(0.05)
    assert mathcore.lr_at(cosine, 100) == pytest.approx(0.0, abs=1e-15)

    linear = cosine.model_copy(update={"schedule": "linear"})
    assert mathcore.lr_at(linear, 25) == pytest.approx(0.075)

    constant = cosine.model_copy(update={"schedule": "constant"})
    assert mathcore.lr_at(constant, 99) == 0.1
    assert mathcore.lr_at(cosine.model_copy(update={"total_steps": 0}), 0) == 0.1
    with pytest.raises(InvalidInputError):
        mathcore.lr_at(cosine, 101)
