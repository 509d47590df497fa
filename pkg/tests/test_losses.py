import math

import numpy as np
import pytest

from affmtl import losses
from affmtl.losses import (BatchLosses, ClassWeights, LabelError, ValidityMask,
                           ccc, loss_au, loss_expr, loss_total, loss_va)
from affmtl.tensor import Tensor, backward

from oracles import bce_pos_weighted, ccc_direct, ce_weighted, finite_diff_grads


def w_uniform():
    return ClassWeights.uniform()


def all_valid(n):
    return np.ones(n, dtype=bool)


# -- validity masks -------------------------------------------------------------


def test_validity_from_sentinels():
    y_va = np.array([[-5.0, -5.0], [0.5, -0.25]])
    y_expr = np.array([3, -1])
    y_au = np.array([[1] * 12, [-1] + [0] * 11])
    m = ValidityMask.from_arrays(y_va, y_expr, y_au)
    np.testing.assert_array_equal(m.va_valid, [False, True])
    np.testing.assert_array_equal(m.expr_valid, [True, False])
    np.testing.assert_array_equal(m.au_valid, [True, False])


def test_class_weights_validation():
    with pytest.raises(ValueError):
        ClassWeights(np.zeros(12), np.ones(8))
    with pytest.raises(ValueError):
        ClassWeights(np.ones(12), np.full(8, np.inf))
    with pytest.raises(ValueError):
        ClassWeights(np.ones(11), np.ones(8))


# -- AU loss ----------------------------------------------------------------------


def test_loss_au_single_unit_ln2():
    logits = Tensor(np.zeros((1, 12)))
    y = np.ones((1, 12))
    val, n = loss_au(logits, y, w_uniform(), all_valid(1))
    assert n == 1
    assert val.item() == pytest.approx(math.log(2.0), rel=1e-6)


def test_loss_au_matches_elementwise_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        b = rng.integers(1, 6)
        logits = rng.standard_normal((b, 12)) * 3
        y = rng.integers(0, 2, (b, 12)).astype(float)
        p = np.exp(rng.standard_normal(12))
        weights = ClassWeights(p, np.ones(8))
        val, _ = loss_au(Tensor(logits), y, weights, all_valid(b))
        expected = bce_pos_weighted(logits, y, p)
        assert val.item() == pytest.approx(expected, rel=1e-5)


def test_loss_au_stable_matches_naive_where_finite():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((4, 12)) * 5
    y = rng.integers(0, 2, (4, 12)).astype(float)
    val, _ = loss_au(Tensor(logits), y, w_uniform(), all_valid(4))
    s = 1.0 / (1.0 + np.exp(-logits))
    naive = -(y * np.log(s) + (1 - y) * np.log(1 - s)).mean()
    assert val.item() == pytest.approx(naive, abs=1e-6)


def test_loss_au_extreme_logits_finite():
    logits = Tensor(np.array([[1000.0] * 12, [-1000.0] * 12]))
    y = np.array([[0.0] * 12, [1.0] * 12])
    val, _ = loss_au(logits, y, w_uniform(), all_valid(2))
    assert np.isfinite(val.item())


def test_loss_au_empty_valid_set():
    val, n = loss_au(Tensor(np.zeros((2, 12))), np.ones((2, 12)), w_uniform(),
                     np.zeros(2, dtype=bool))
    assert n == 0 and val.item() == 0.0


# -- EXPR loss -----------------------------------------------------------------


def test_loss_expr_uniform_logits_ln8():
    val, n = loss_expr(Tensor(np.zeros((3, 8))), np.array([0, 4, 7]),
                       w_uniform(), all_valid(3))
    assert n == 3
    assert val.item() == pytest.approx(math.log(8.0), rel=1e-6)


def test_loss_expr_saturated_correct_logit():
    logits = np.full((1, 8), -50.0)
    logits[0, 2] = 50.0
    val, _ = loss_expr(Tensor(logits), np.array([2]), w_uniform(), all_valid(1))
    assert val.item() == pytest.approx(0.0, abs=1e-6)


def test_loss_expr_matches_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        b = rng.integers(1, 7)
        logits = rng.standard_normal((b, 8)) * 2
        y = rng.integers(0, 8, b)
        p = np.exp(rng.standard_normal(8))
        weights = ClassWeights(np.ones(12), p)
        val, _ = loss_expr(Tensor(logits), y, weights, all_valid(b))
        assert val.item() == pytest.approx(ce_weighted(logits, y, p), rel=1e-5)


def test_loss_expr_mass_on_true_class_decreases_loss():
    logits = np.zeros((1, 8))
    base, _ = loss_expr(Tensor(logits), np.array([3]), w_uniform(), all_valid(1))
    logits2 = logits.copy()
    logits2[0, 3] += 0.5
    better, _ = loss_expr(Tensor(logits2), np.array([3]), w_uniform(), all_valid(1))
    assert better.item() < base.item()


def test_loss_expr_rejects_out_of_range_valid_label():
    with pytest.raises(LabelError):
        loss_expr(Tensor(np.zeros((1, 8))), np.array([9]), w_uniform(), all_valid(1))


# -- CCC and VA loss ----------------------------------------------------------------


def test_ccc_self_is_one():
    x = np.array([0.1, 0.5, -0.7, 0.3])
    assert ccc(x, x) == pytest.approx(1.0, abs=1e-6)


def test_ccc_anti_concordant_negative():
    x = np.array([-1.0, -0.2, 0.2, 1.0])
    assert ccc(x, -x) < 0


def test_ccc_hand_value():
    assert ccc([0.0, 1.0], [0.5, 1.5]) == pytest.approx(2.0 / 3.0, rel=1e-6)


def test_ccc_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(10)
    for _ in range(30):
        n = rng.integers(2, 40)
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        assert ccc(x, y) == pytest.approx(ccc(y, x), abs=1e-12)
        perm = rng.permutation(n)
        assert ccc(x[perm], y[perm]) == pytest.approx(ccc(x, y), abs=1e-9)


def test_ccc_constant_equal_inputs_guarded():
    assert ccc([0.3, 0.3, 0.3], [0.3, 0.3, 0.3]) == 0.0


def test_ccc_matches_direct_formula():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = rng.integers(2, 50)
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        assert ccc(x, y) == pytest.approx(ccc_direct(x, y), abs=1e-9)


def test_loss_va_perfect_is_zero():
    y = np.array([[0.1, -0.2], [0.5, 0.3], [-0.4, 0.9]])
    val, n = loss_va(Tensor(y.copy()), y, all_valid(3))
    assert n == 3
    assert val.item() == pytest.approx(0.0, abs=1e-6)


def test_loss_va_range():
    rng = np.random.default_rng(12)
    for _ in range(30):
        pred = rng.uniform(-1, 1, (8, 2))
        y = rng.uniform(-1, 1, (8, 2))
        val, _ = loss_va(Tensor(pred), y, all_valid(8))
        assert 0.0 <= val.item() <= 4.0


def test_loss_va_anticoncordant_arousal_exceeds_one():
    v = np.array([0.5, -0.5, 0.25, -0.25])
    a = np.array([0.6, -0.6, 0.3, -0.3])  # zero mean
    pred = np.stack([v, -a], axis=1)
    y = np.stack([v, a], axis=1)
    val, _ = loss_va(Tensor(pred), y, all_valid(4))
    assert val.item() > 1.0


def test_loss_va_agrees_with_metric_ccc():
    rng = np.random.default_rng(13)
    pred = rng.uniform(-1, 1, (16, 2))
    y = rng.uniform(-1, 1, (16, 2))
    val, _ = loss_va(Tensor(pred), y, all_valid(16))
    expected = 2.0 - ccc(pred[:, 0], y[:, 0]) - ccc(pred[:, 1], y[:, 1])
    assert val.item() == pytest.approx(expected, rel=1e-6)


def test_loss_va_single_valid_sample_is_zero():
    val, n = loss_va(Tensor(np.zeros((3, 2))), np.zeros((3, 2)),
                     np.array([True, False, False]))
    assert n == 1 and val.item() == 0.0


# -- total loss -------------------------------------------------------------------


def rand_batch(rng, b=6, sentinel_fraction=0.3):
    au_logits = rng.standard_normal((b, 12))
    expr_logits = rng.standard_normal((b, 8))
    va_pred = np.tanh(rng.standard_normal((b, 2)))
    y_au = rng.integers(0, 2, (b, 12)).astype(float)
    y_expr = rng.integers(0, 8, b)
    y_va = rng.uniform(-1, 1, (b, 2))
    for i in range(b):
        if rng.random() < sentinel_fraction:
            y_va[i] = -5.0
        if rng.random() < sentinel_fraction:
            y_expr[i] = -1
        if rng.random() < sentinel_fraction:
            y_au[i] = -1
    return au_logits, expr_logits, va_pred, y_au, y_expr, y_va


def test_loss_total_is_sum_of_parts():
    rng = np.random.default_rng(14)
    au_l, ex_l, va_p, y_au, y_expr, y_va = rand_batch(rng)
    w = w_uniform()
    bundle = loss_total(Tensor(au_l), Tensor(ex_l), Tensor(va_p),
                        y_au, y_expr, y_va, w)
    masks = ValidityMask.from_arrays(y_va, y_expr, y_au)
    la, _ = loss_au(Tensor(au_l), y_au, w, masks.au_valid)
    le, _ = loss_expr(Tensor(ex_l), y_expr, w, masks.expr_valid)
    lv, _ = loss_va(Tensor(va_p), y_va, masks.va_valid)
    assert bundle.total.item() == pytest.approx(
        la.item() + le.item() + lv.item(), rel=1e-6)


def test_loss_total_all_invalid_is_zero():
    b = 4
    y_va = np.full((b, 2), -5.0)
    y_expr = np.full(b, -1)
    y_au = np.full((b, 12), -1.0)
    bundle = loss_total(Tensor(np.zeros((b, 12))), Tensor(np.zeros((b, 8))),
                        Tensor(np.zeros((b, 2))), y_au, y_expr, y_va, w_uniform())
    assert bundle.total.item() == 0.0
    assert (bundle.n_valid_au, bundle.n_valid_expr, bundle.n_valid_va) == (0, 0, 0)


def test_masked_samples_have_exactly_zero_influence():
    rng = np.random.default_rng(15)
    for _ in range(100):
        au_l, ex_l, va_p, y_au, y_expr, y_va = rand_batch(rng, b=8)
        # force at least one sentinel of each type
        y_va[0] = -5.0
        y_expr[1] = -1
        y_au[2] = -1
        w = w_uniform()
        base = loss_total(Tensor(au_l), Tensor(ex_l), Tensor(va_p),
                          y_au, y_expr, y_va, w).total.item()
        masks = ValidityMask.from_arrays(y_va, y_expr, y_au)
        au2, ex2, va2 = au_l.copy(), ex_l.copy(), va_p.copy()
        au2[~masks.au_valid] += rng.standard_normal(au2[~masks.au_valid].shape) * 10
        ex2[~masks.expr_valid] += rng.standard_normal(ex2[~masks.expr_valid].shape) * 10
        va2[~masks.va_valid] = rng.uniform(-1, 1, va2[~masks.va_valid].shape)
        perturbed = loss_total(Tensor(au2), Tensor(ex2), Tensor(va2),
                               y_au, y_expr, y_va, w).total.item()
        assert perturbed == base


def test_loss_total_gradient_matches_finite_differences():
    rng = np.random.default_rng(16)
    au_l, ex_l, va_p, y_au, y_expr, y_va = rand_batch(rng, b=5)
    w = ClassWeights(np.exp(rng.standard_normal(12) * 0.3),
                     np.exp(rng.standard_normal(8) * 0.3))

    def f(a, e, v):
        return loss_total(Tensor(a), Tensor(e), Tensor(v),
                          y_au, y_expr, y_va, w).total.item()

    ta, te, tv = (Tensor(au_l, requires_grad=True),
                  Tensor(ex_l, requires_grad=True),
                  Tensor(va_p, requires_grad=True))
    bundle = loss_total(ta, te, tv, y_au, y_expr, y_va, w)
    backward(bundle.total)
    numeric = finite_diff_grads(f, [au_l, ex_l, va_p])
    for t, n in zip((ta, te, tv), numeric):
        g = t.grad if t.grad is not None else np.zeros_like(n)
        np.testing.assert_allclose(g, n, rtol=1e-4, atol=1e-7)


def test_loss_total_gradient_is_sum_of_task_gradients():
    rng = np.random.default_rng(17)
    au_l, ex_l, va_p, y_au, y_expr, y_va = rand_batch(rng, b=6, sentinel_fraction=0)
    w = w_uniform()
    masks = ValidityMask.from_arrays(y_va, y_expr, y_au)

    t_all = Tensor(au_l, requires_grad=True)
    bundle = loss_total(t_all, Tensor(ex_l), Tensor(va_p), y_au, y_expr, y_va, w)
    backward(bundle.total)

    t_au = Tensor(au_l, requires_grad=True)
    la, _ = loss_au(t_au, y_au, w, masks.au_valid)
    backward(la)
    np.testing.assert_allclose(t_all.grad, t_au.grad, rtol=1e-6)
