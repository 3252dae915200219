import numpy as np
import pytest

from attnroute import autodiff as ad
from attnroute.autodiff import (AdamConfig, BNStats, ContractError, InvalidMaskError, ParamStore, ShapeError, Tensor,
                                adam_step, batchnorm, finite_diff_check, log_softmax_last, softmax_last)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity_and_hand_case():
    b = np.arange(6.0).reshape(2, 3)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)
    out = Tensor([[1.0, 2], [3, 4]]) @ Tensor([[1.0], [1]])
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_grad_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    (a @ b).sum().backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_batched_matmul_grads_match_finite_differences():
    rng = np.random.default_rng(1)
    a0, w0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    a, w = leaf(a0), leaf(w0)
    ad.tanh(a @ w).sum().backward()
    f_a = lambda x: np.tanh(x @ w0).sum()
    f_w = lambda x: np.tanh(a0 @ x).sum()
    assert finite_diff_check(f_a, a0, a.grad) < 1e-8
    assert finite_diff_check(f_w, w0, w.grad) < 1e-8


def test_softmax_examples():
    assert np.allclose(softmax_last(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.array_equal(softmax_last(Tensor([5.0, -np.inf])).data, [1.0, 0.0])
    x = np.random.default_rng(2).normal(size=(4, 7))
    assert np.allclose(softmax_last(Tensor(x)).data, softmax_last(Tensor(x + 123.4)).data, atol=1e-15)


def test_softmax_mask_and_all_masked_row():
    s = softmax_last(Tensor([1.0, 2.0, 3.0]), np.array([True, False, True]))
    assert s.data[1] == 0 and np.isclose(s.data.sum(), 1)
    with pytest.raises(InvalidMaskError):
        softmax_last(Tensor([[1.0, 2.0], [0.0, 0.0]]), np.array([[True, True], [False, False]]))


def test_log_softmax_masked_entries_and_grad():
    x = leaf([0.3, -1.0, 2.0, 0.5])
    mask = np.array([True, True, False, True])
    out = log_softmax_last(x, mask)
    assert out.data[2] == -np.inf
    out[1].backward()
    s = softmax_last(Tensor(x.data), mask).data
    expect = -s
    expect[1] += 1
    assert np.allclose(x.grad, expect) and x.grad[2] == 0


def test_backward_sum_of_squares():
    x = leaf([1.0, -2.0, 3.0])
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_log_softmax_closed_form():
    x0 = np.array([0.1, 0.7, -0.4, 1.2])
    x = leaf(x0)
    ad.log(softmax_last(x))[2].backward()
    s = np.exp(x0) / np.exp(x0).sum()
    assert np.allclose(x.grad, np.eye(4)[2] - s)


def test_backward_requires_scalar_root():
    with pytest.raises(ContractError):
        leaf([1.0, 2.0]).backward()


def test_leaf_grads_accumulate_and_interior_buffers_clear():
    x = leaf([1.0, 2.0])
    y = x * 3.0
    y.sum().backward()
    y2 = x * 3.0
    y2.sum().backward()
    assert np.array_equal(x.grad, [6.0, 6.0])
    assert y2.grad is None


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and ad.graph_size(y) == 0


def test_broadcast_add_unbroadcasts_grad():
    x = leaf(np.ones((3, 4)))
    b = leaf(np.zeros(4))
    (x + b).sum().backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_getitem_fancy_index_grad_accumulates_duplicates():
    x = leaf(np.arange(4.0))
    x[np.array([1, 1, 3])].sum().backward()
    assert np.array_equal(x.grad, [0, 2, 0, 1])


def test_batchnorm_constant_batch_gives_bias():
    x = Tensor(np.full((5, 3), 2.5))
    out = batchnorm(x, Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.array([0.1, 0.2, 0.3])))
    assert np.allclose(out.data, [0.1, 0.2, 0.3])


def test_batchnorm_standardizes():
    x = np.random.default_rng(3).normal(2.0, 3.0, size=(4000, 3))
    out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.allclose(out.mean(0), 0, atol=1e-12)
    assert np.allclose(out.var(0), 1, atol=1e-5)


def test_batchnorm_eval_hand_case():
    stats = BNStats(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    x = np.array([[3.0, 0.0]])
    w, b = np.array([2.0, 1.0]), np.array([0.5, -0.5])
    out = batchnorm(Tensor(x), Tensor(w), Tensor(b), stats, training=False).data
    expect = (x - stats.mean) / np.sqrt(stats.var + 1e-5) * w + b
    assert np.allclose(out, expect, rtol=0, atol=1e-15)


def test_batchnorm_running_stats_update_and_errors():
    stats = BNStats(np.zeros(2), np.ones(2))
    x = np.array([[0.0, 1.0], [2.0, 5.0]])
    batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats)
    assert np.allclose(stats.mean, 0.1 * x.mean(0))
    assert np.allclose(stats.var, 0.9 + 0.1 * x.var(0, ddof=1))
    with pytest.raises(ShapeError):
        batchnorm(Tensor(np.zeros((0, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    with pytest.raises(ContractError):
        batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, training=False)


def test_batchnorm_grad_finite_differences():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(6, 3))
    w0 = rng.normal(size=3)
    c = rng.normal(size=(6, 3))
    x = leaf(x0)
    (batchnorm(x, Tensor(w0), Tensor(np.zeros(3))) * c).sum().backward()

    def f(z):
        xh = (z - z.mean(0)) / np.sqrt(z.var(0) + 1e-5)
        return (xh * w0 * c).sum()

    assert finite_diff_check(f, x0, x.grad, h=1e-6) < 1e-7


def _store(value):
    s = ParamStore()
    s.add("x", np.asarray(value, float))
    return s


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    s = _store([1.0, -1.0])
    s.m["x"] = np.array([0.5, 0.5])
    adam_step(s, {"x": np.zeros(2)}, AdamConfig(lr=0.1))
    assert np.allclose(s.m["x"], 0.45)
    # a nonzero first moment still moves the parameter; with zero moments nothing moves
    s2 = _store([1.0, -1.0])
    adam_step(s2, {"x": np.zeros(2)}, AdamConfig(lr=0.1))
    assert np.array_equal(s2["x"].data, [1.0, -1.0])


def test_adam_first_step_is_lr_times_sign():
    s = _store([0.0, 0.0, 0.0])
    g = np.array([3.0, -0.02, 1e3])
    adam_step(s, {"x": g}, AdamConfig(lr=0.01))
    assert np.allclose(s["x"].data, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_converges_on_quadratic():
    s = _store([1.0])
    cfg = AdamConfig(lr=0.1)
    for _ in range(100):
        adam_step(s, {"x": 2 * s["x"].data}, cfg)
    assert abs(s["x"].data[0]) < 0.1


def test_adam_shape_mismatch_and_duplicate_names():
    s = _store([1.0, 2.0])
    with pytest.raises(ShapeError):
        adam_step(s, {"x": np.zeros(3)}, AdamConfig())
    with pytest.raises(ContractError):
        s.add("x", [0.0])


def test_finite_diff_check_examples():
    x = np.array([0.3, -0.2, 0.5])
    c = np.array([1.0, 2.0, -3.0])
    assert finite_diff_check(lambda z: c @ z, x, c) < 1e-9
    e = np.exp(x.sum())
    assert finite_diff_check(lambda z: np.exp(z.sum()), x, np.full(3, e)) < 1e-6
    assert abs(finite_diff_check(lambda z: c @ z, x, 2 * c) - 0.5) < 1e-6
