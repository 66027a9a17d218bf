import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcases
import oracles
from leafvit import ops
from leafvit.errors import ConfigError, ContractError, DimensionError, StatisticsError
from leafvit.tensor import OpCounter, Tensor, backward, counting, make_rng, no_grad, precision


def t(values, **kw):
    return Tensor(np.asarray(values, dtype=np.float32), **kw)


# ---------------------------------------------------------------------------
# Tensor value type
# ---------------------------------------------------------------------------
def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0, 3)))


def test_default_storage_is_single_precision():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


def test_rng_streams_are_keyed():
    a = make_rng(3, 1).random(5)
    assert np.array_equal(a, make_rng(3, 1).random(5))
    assert not np.array_equal(a, make_rng(3, 2).random(5))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------
def test_matmul_identity_left():
    b = t([[1, 2, 3], [4, 5, 6]])
    assert np.array_equal(ops.matmul(t(np.eye(2)), b).data, b.data)


def test_matmul_hand_example():
    out = ops.matmul(t([[1, 2], [3, 4]]), t([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(t(np.ones((2, 3))), t(np.ones((4, 5))))


def test_matmul_counts_mnk_macs():
    with counting() as c:
        ops.matmul(t(np.ones((3, 4))), t(np.ones((4, 5))))
    assert c.macs == 3 * 4 * 5


@pytest.mark.parametrize("seed", range(10))
def test_matmul_matches_loop(seed):
    rng = make_rng(seed)
    m, k, n = rng.integers(1, 6, size=3)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    np.testing.assert_allclose(ops.matmul(t(a), t(b)).data, oracles.matmul_loop(a, b), atol=1e-5)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------
def test_conv_centered_delta_is_identity():
    x = t(np.arange(9).reshape(1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    assert np.array_equal(ops.conv2d(x, t(w), padding=1).data, x.data)


def test_conv_scalar_kernel_scales():
    out = ops.conv2d(t([[[[1, 2], [3, 4]]]]), t([[[[2]]]]))
    assert out.data[0, 0].tolist() == [[2, 4], [6, 8]]


def test_conv_strided_matches_six_loop_oracle():
    rng = make_rng(11)
    x, w = rng.standard_normal((1, 4, 8, 8)), rng.standard_normal((8, 4, 3, 3))
    out = ops.conv2d(t(x), t(w), stride=2, padding=1)
    np.testing.assert_allclose(out.data, oracles.conv2d_loop(x, w, stride=2, padding=1), atol=1e-5)


def test_conv_is_cross_correlation():
    x = t(np.arange(9).reshape(1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 0, 0] = 1  # top-left tap reads the top-left neighbour
    out = ops.conv2d(x, t(w), padding=1)
    assert out.data[0, 0, 1, 1] == 0.0 and out.data[0, 0, 2, 2] == 4.0


@pytest.mark.parametrize("seed", range(5))
def test_depthwise_equals_per_channel_conv(seed):
    rng = make_rng(seed)
    x, w = rng.standard_normal((1, 4, 8, 8)), rng.standard_normal((4, 1, 3, 3))
    grouped = ops.conv2d(t(x), t(w), padding=1, groups=4).data
    for c in range(4):
        single = ops.conv2d(t(x[:, c : c + 1]), t(w[c : c + 1]), padding=1).data
        np.testing.assert_allclose(grouped[:, c : c + 1], single, atol=1e-5)


def test_conv_mac_count_formula():
    x, w = t(np.ones((2, 6, 9, 7))), t(np.ones((4, 3, 3, 3)))
    with counting() as c:
        out = ops.conv2d(x, w, stride=2, padding=1, groups=2)
    b, cout, ho, wo = out.shape
    assert c.macs == b * cout * ho * wo * 3 * 3 * 3


def test_conv_group_and_extent_errors():
    with pytest.raises(ConfigError):
        ops.conv2d(t(np.ones((1, 3, 4, 4))), t(np.ones((4, 1, 1, 1))), groups=2)
    with pytest.raises(DimensionError):
        ops.conv2d(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
def test_activation_values():
    assert ops.silu(t([0.0])).data[0] == 0.0
    assert ops.relu(t([-3.0])).data[0] == 0.0
    assert ops.silu(t([1.0])).data[0] == pytest.approx(0.731059, abs=1e-6)
    np.testing.assert_allclose(ops.softmax(t([1, 2, 3])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        ops.softmax(t(np.ones((2, 3))), axis=2)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50, width=32)),
       st.integers(0, 2))
def test_softmax_slices_sum_to_one(x, axis):
    axis = axis % x.ndim
    out = ops.softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_log_softmax_is_log_of_softmax(x):
    with precision(np.float64):
        np.testing.assert_allclose(ops.log_softmax(Tensor(x)).data, np.log(ops.softmax(Tensor(x)).data), atol=1e-9)


# ---------------------------------------------------------------------------
# normalization and pooling
# ---------------------------------------------------------------------------
def _bn_args(c, rng=None):
    return t(np.ones(c)), t(np.zeros(c)), np.zeros(c, np.float32), np.ones(c, np.float32)


def test_batch_norm_requires_mode():
    with pytest.raises(ConfigError):
        ops.batch_norm2d(t(np.ones((2, 1, 2, 2))), *_bn_args(1))


def test_batch_norm_eval_identity():
    x = make_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = ops.batch_norm2d(t(x), *_bn_args(3), mode="eval").data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-6)
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_batch_norm_constant_input_gives_beta():
    x = t(np.full((2, 2, 3, 3), 7.0))
    beta = t([0.5, -1.5])
    out = ops.batch_norm2d(x, t([2.0, 3.0]), beta, np.zeros(2), np.ones(2), mode="train").data
    np.testing.assert_allclose(out[:, 0], 0.5, atol=1e-6)
    np.testing.assert_allclose(out[:, 1], -1.5, atol=1e-6)


def test_batch_norm_single_value_per_channel_errors():
    with pytest.raises(StatisticsError):
        ops.batch_norm2d(t(np.ones((1, 2, 1, 1))), *_bn_args(2), mode="train")


@pytest.mark.parametrize("seed", range(5))
def test_batch_norm_train_matches_two_pass_oracle(seed):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batch_norm2d(t(x), t(gamma), t(beta), rm, rv, mode="train").data
    ref, mu, unbiased = oracles.batch_norm_loop(x, gamma, beta)
    np.testing.assert_allclose(out, ref, atol=1e-5)
    np.testing.assert_allclose(rm, 0.1 * mu, atol=1e-6)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * unbiased, atol=1e-6)


def test_eval_batch_norm_leaves_running_stats():
    rm, rv = np.array([0.3], np.float32), np.array([2.0], np.float32)
    ops.batch_norm2d(t(np.ones((2, 1, 2, 2))), t([1.0]), t([0.0]), rm, rv, mode="eval")
    assert rm[0] == np.float32(0.3) and rv[0] == np.float32(2.0)


def test_group_norm_constant_input_gives_beta():
    beta = np.arange(4, dtype=np.float32)
    out = ops.group_norm(t(np.full((2, 4, 3, 3), 5.0)), 2, t(np.ones(4)), t(beta)).data
    np.testing.assert_allclose(out, np.broadcast_to(beta[None, :, None, None], out.shape), atol=1e-6)


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_group_norm_matches_oracle(groups):
    rng = make_rng(groups)
    x = rng.standard_normal((2, 4, 3, 5))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    out = ops.group_norm(t(x), groups, t(gamma), t(beta)).data
    np.testing.assert_allclose(out, oracles.group_norm_loop(x, groups, gamma, beta), atol=1e-5)


def test_group_norm_channels_last_matches_channels_first():
    x = make_rng(5).standard_normal((2, 3, 7, 4)).astype(np.float32)
    gamma, beta = t(np.linspace(0.5, 2, 4)), t(np.linspace(-1, 1, 4))
    last = ops.group_norm(t(x), 1, gamma, beta, channels_last=True).data
    first = ops.group_norm(t(np.moveaxis(x, -1, 1)), 1, gamma, beta).data
    np.testing.assert_allclose(last, np.moveaxis(first, 1, -1), atol=1e-6)


def test_group_norm_fixed_point():
    x = make_rng(2).standard_normal((1, 2, 8, 8))
    x = (x - x.mean()) / x.std()
    out = ops.group_norm(t(x), 1, t(np.ones(2)), t(np.zeros(2))).data
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_group_norm_divisibility():
    with pytest.raises(ConfigError):
        ops.group_norm(t(np.ones((1, 3, 2, 2))), 2, t(np.ones(3)), t(np.zeros(3)))


def test_adaptive_avg_pool():
    assert ops.adaptive_avg_pool2d(t([[[[1, 2], [3, 4]]]])).data.item() == 2.5
    assert np.all(ops.adaptive_avg_pool2d(t(np.full((1, 2, 3, 5), 4.0))).data == 4.0)
    x = t(np.array([[[[7.0]], [[-1.0]]]]))
    assert np.array_equal(ops.adaptive_avg_pool2d(x).data, x.data)


def test_max_pool_tie_routes_gradient_to_first():
    x = t(np.ones((1, 1, 2, 2)), requires_grad=True)
    ops.max_pool2d(x, 2).sum().backward()
    assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------
def test_dropout_eval_is_bit_identity():
    x = t(make_rng(0).standard_normal((4, 4)))
    assert ops.dropout(x, 0.7, "eval").data is x.data


def test_dropout_p_zero_train_is_identity():
    x = t(make_rng(0).standard_normal((4, 4)))
    assert np.array_equal(ops.dropout(x, 0.0, "train", make_rng(1)).data, x.data)


def test_dropout_mean_preserved():
    out = ops.dropout(t(np.ones(100_000)), 0.5, "train", make_rng(42)).data
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_contracts():
    with pytest.raises(ConfigError):
        ops.dropout(t([1.0]), 1.0, "train", make_rng(0))
    with pytest.raises(ConfigError):
        ops.dropout(t([1.0]), 0.5, "train")


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------
def test_backward_of_sum_is_ones():
    x = t(np.arange(6).reshape(2, 3), requires_grad=True)
    ops.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_relu_gating():
    x = t([-1.0, 2.0], requires_grad=True)
    ops.sum(ops.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_backward_rejects_non_scalar():
    x = t([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(ops.mul(x, 2.0))


def test_detached_leaf_gets_zero_gradient():
    x = t([1.0, 2.0], requires_grad=True)
    unused = t([5.0], requires_grad=True)
    backward(ops.sum(x), inputs=[x, unused])
    assert unused.grad.tolist() == [0.0]


def test_gradient_accumulates_over_reuse():
    x = t([3.0], requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    assert x.grad.tolist() == [6.0]


def test_no_grad_records_nothing():
    x = t([1.0], requires_grad=True)
    with no_grad():
        y = ops.mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


@pytest.mark.parametrize("name", sorted(gradcases.OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient(name, seed):
    assert gradcases.op_error(name, seed) <= gradcases.TOLERANCE


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(3, 4), (1, 4), (4,), (3, 1), (1,)]))
def test_broadcast_gradient_matches_operand_shape(shape):
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.full(shape, 2.0), requires_grad=True)
    ops.sum(ops.mul(a, b)).backward()
    assert b.grad.shape == b.shape
    assert np.allclose(b.grad.sum(), 12.0)


def test_counter_is_monotone_and_scoped():
    seen = []
    with counting() as c:
        x = t(np.ones((2, 3)))
        for _ in range(3):
            x = ops.add(x, 1.0)
            seen.append(c.adds)
    assert seen == sorted(seen) and seen[0] > 0
    with counting() as fresh:
        pass
    assert fresh.as_dict() == OpCounter().as_dict()
