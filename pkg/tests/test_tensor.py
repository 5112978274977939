import math

import numpy as np
import pytest

from crossmod import tensor as T


def t64(arr, requires_grad=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def rand64(rng, *shape):
    return t64(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_sigmoid_fixed_point():
    assert T.sigmoid(T.Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-9)


def test_softmax_uniform_input():
    out = T.softmax(T.Tensor([1.0, 1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-7)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5)).astype(np.float32)
    out = T.matmul(T.Tensor(np.eye(3, dtype=np.float32)), T.Tensor(x))
    np.testing.assert_allclose(out.data, x, atol=1e-7)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    out = T.softmax(T.Tensor(rng.standard_normal((6, 9)).astype(np.float32)))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)
    assert (out.data >= 0).all()


def test_forward_dispatch_and_unknown_op():
    out = T.forward("sigmoid", [T.Tensor(0.0)])
    assert out.item() == pytest.approx(0.5)
    with pytest.raises(ValueError, match="unknown op_kind"):
        T.forward("conv2d", [])


def test_forward_deterministic():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4)).astype(np.float32)
    a = T.softmax(T.Tensor(x)).data
    b = T.softmax(T.Tensor(x)).data
    assert (a == b).all()


def test_dropout_train_only_and_seeded():
    x = T.Tensor(np.ones((100,), dtype=np.float32))
    assert (T.dropout(x, 0.5, seed=3, train=False).data == 1.0).all()
    a = T.dropout(x, 0.5, seed=3, train=True).data
    b = T.dropout(x, 0.5, seed=3, train=True).data
    c = T.dropout(x, 0.5, seed=4, train=True).data
    assert (a == b).all()
    assert not (a == c).all()
    # inverted scaling preserves the mean roughly
    assert abs(a.mean() - 1.0) < 0.35


# ---------------------------------------------------------------------------
# backward: hand cases
# ---------------------------------------------------------------------------

def test_backward_linear_map_outer_product():
    rng = np.random.default_rng(3)
    W = rand64(rng, 4, 3)
    x = t64(rng.standard_normal(3), requires_grad=False)
    loss = T.sum_(T.matmul(W, T.reshape(x, (3, 1))))
    T.backward(loss)
    expect = np.outer(np.ones(4), x.data)
    np.testing.assert_allclose(W.grad, expect, rtol=1e-12)


def test_backward_sigmoid_slope_at_zero():
    w = t64(0.0)
    const = 3.0
    loss = T.mul(T.sigmoid(w), const)
    T.backward(loss)
    assert w.grad == pytest.approx(0.25 * const, rel=1e-12)


def test_backward_rejects_nonscalar_loss():
    w = t64([1.0, 2.0])
    with pytest.raises(T.GraphError, match="scalar"):
        T.backward(T.mul(w, 2.0))


def test_gradient_accumulates_across_fanout():
    x = t64(2.0)
    y = T.add(T.mul(x, x), T.mul(x, 3.0))  # x^2 + 3x
    T.backward(y)
    assert x.grad == pytest.approx(2 * 2.0 + 3.0)


def test_off_path_parameter_gets_no_gradient():
    x = t64(1.0)
    unused = t64(5.0)
    T.backward(T.mul(x, 2.0))
    assert unused.grad is None


# ---------------------------------------------------------------------------
# backward: finite-difference oracle per op
# ---------------------------------------------------------------------------

def check(fn, *tensors):
    worst = T.gradcheck(fn, list(tensors))
    assert worst <= 1e-3, f"max relative error {worst}"


def test_grad_add_broadcast():
    rng = np.random.default_rng(10)
    a, b = rand64(rng, 4, 5), rand64(rng, 5)
    check(lambda a, b: T.sum_(T.mul(T.add(a, b), T.add(a, b))), a, b)


def test_grad_mul_div():
    rng = np.random.default_rng(11)
    a, b = rand64(rng, 3, 4), t64(rng.standard_normal((3, 4)) + 3.0)
    check(lambda a, b: T.sum_(T.div(T.mul(a, b), b)), a, b)


def test_grad_matmul_batched():
    rng = np.random.default_rng(12)
    a, b = rand64(rng, 2, 3, 4), rand64(rng, 4, 5)
    check(lambda a, b: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b))), a, b)


def test_grad_exp_log_tanh_sigmoid_sqrt():
    rng = np.random.default_rng(13)
    x = t64(rng.uniform(0.5, 2.0, (6,)))
    check(lambda x: T.sum_(T.exp(x)), x)
    check(lambda x: T.sum_(T.log(x)), x)
    check(lambda x: T.sum_(T.tanh(x)), x)
    check(lambda x: T.sum_(T.sigmoid(x)), x)
    check(lambda x: T.sum_(T.sqrt(x)), x)


def test_grad_softmax():
    rng = np.random.default_rng(14)
    x = rand64(rng, 3, 6)
    r = t64(rng.standard_normal((3, 6)), requires_grad=False)
    check(lambda x: T.sum_(T.mul(T.softmax(x), r)), x)


def test_grad_layernorm():
    rng = np.random.default_rng(15)
    x = rand64(rng, 4, 8)
    gain = t64(rng.uniform(0.5, 1.5, 8))
    bias = rand64(rng, 8)
    r = t64(rng.standard_normal((4, 8)), requires_grad=False)
    check(lambda x, g, b: T.sum_(T.mul(T.layernorm(x, g, b), r)), x, gain, bias)


def test_grad_mean_pool_and_reductions():
    rng = np.random.default_rng(16)
    x = rand64(rng, 5, 3)
    check(lambda x: T.sum_(T.mul(T.mean_pool(x), T.mean_pool(x))), x)
    check(lambda x: T.mean_(T.mul(x, x)), x)


def test_grad_max_reduce():
    rng = np.random.default_rng(17)
    x = rand64(rng, 4, 6)
    check(lambda x: T.sum_(T.max_reduce(x, axis=-1)), x)


def test_grad_l2_norm():
    rng = np.random.default_rng(18)
    x = t64(rng.standard_normal((5, 4)) + 0.5)
    check(lambda x: T.sum_(T.l2_norm(x)), x)


def test_grad_concat_reshape_transpose_take():
    rng = np.random.default_rng(19)
    a, b = rand64(rng, 3, 2), rand64(rng, 3, 4)
    check(lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=-1), T.concat([a, b], axis=-1))), a, b)
    x = rand64(rng, 2, 6)
    check(lambda x: T.sum_(T.mul(T.reshape(x, (3, 4)), 2.0)), x)
    check(lambda x: T.sum_(T.mul(T.transpose(x, (1, 0)), T.transpose(x, (1, 0)))), x)
    check(lambda x: T.sum_(T.mul(x[:, 1:4], x[:, 1:4])), x)


def test_grad_cross_entropy_and_kl():
    rng = np.random.default_rng(20)
    p = t64(rng.uniform(0.05, 0.95, (8,)))
    y = rng.integers(0, 2, 8).astype(np.float64)
    check(lambda p: T.cross_entropy(p, y), p)

    logits_p = rand64(rng, 4, 3)
    logits_q = rand64(rng, 4, 3)
    check(
        lambda lp, lq: T.kl_div(T.softmax(lp), T.softmax(lq)),
        logits_p, logits_q,
    )


def test_grad_multi_head_attention():
    rng = np.random.default_rng(21)
    D, h = 8, 2
    q_in, kv_in = rand64(rng, 4, D), rand64(rng, 5, D)
    wq, wk, wv, wo = (rand64(rng, D, D) for _ in range(4))
    r = t64(rng.standard_normal((4, D)), requires_grad=False)

    def fn(q_in, kv_in, wq, wk, wv, wo):
        out, _ = T.multi_head_attention(q_in, kv_in, wq, wk, wv, wo, h)
        return T.sum_(T.mul(out, r))

    check(fn, q_in, kv_in, wq, wk, wv, wo)


def test_attention_rows_stochastic_and_through_attn_grad():
    rng = np.random.default_rng(22)
    D, h = 8, 2
    q_in, kv_in = rand64(rng, 3, D), rand64(rng, 6, D)
    wq, wk, wv, wo = (rand64(rng, D, D) for _ in range(4))
    out, attn = T.multi_head_attention(q_in, kv_in, wq, wk, wv, wo, h)
    np.testing.assert_allclose(attn.data.sum(axis=-1), np.ones(3), atol=1e-6)
    assert (attn.data >= 0).all()

    # gradients flow through the exported attention matrix too
    def fn(q_in, kv_in, wq, wk, wv, wo):
        _, a = T.multi_head_attention(q_in, kv_in, wq, wk, wv, wo, h)
        return T.sum_(T.mul(a, a))

    check(fn, q_in, kv_in, wq, wk, wv, wo)


def test_grad_composite_graph():
    rng = np.random.default_rng(23)
    x = rand64(rng, 4, 6)
    w1, w2 = rand64(rng, 6, 5), rand64(rng, 5, 2)
    b1, b2 = rand64(rng, 5), rand64(rng, 2)
    y = rng.integers(0, 2, 4).astype(np.float64)

    def fn(x, w1, b1, w2, b2):
        hidden = T.tanh(T.linear(x, w1, b1))
        probs = T.softmax(T.linear(hidden, w2, b2))
        return T.cross_entropy(probs[:, 1], y)

    check(fn, x, w1, b1, w2, b2)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_keeps_params():
    p = T.parameter(np.ones(3, dtype=np.float32))
    opt = T.AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(3, dtype=np.float32))


def test_adamw_descends_on_quadratic():
    w = T.parameter(np.asarray(1.0, dtype=np.float32))
    opt = T.AdamW([w], lr=0.1, weight_decay=0.0)
    loss = T.mul(w, w)
    T.backward(loss)
    opt.step()
    assert w.data < 1.0


def test_adamw_converges_on_shifted_quadratic():
    w = T.parameter(np.asarray(0.0, dtype=np.float32))
    opt = T.AdamW([w], lr=0.05, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        diff = T.sub(w, 3.0)
        T.backward(T.mul(diff, diff))
        opt.step()
    assert abs(float(w.data) - 3.0) < 0.05


def test_adamw_rejects_nonpositive_lr():
    with pytest.raises(ValueError, match="lr"):
        T.AdamW([T.parameter(np.zeros(1))], lr=0.0)
    with pytest.raises(ValueError, match="lr"):
        T.adamw_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 1, lr=-1.0)


def test_no_grad_builds_no_tape():
    w = T.parameter(np.ones(2, dtype=np.float32))
    with T.no_grad():
        out = T.mul(w, 2.0)
    assert not out.requires_grad
    assert out._parents == ()
