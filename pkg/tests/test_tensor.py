import math

import numpy as np
import pytest

from rfuda import rng as rngs
from rfuda.errors import ConfigError, DimensionError, NumericalError, UsageError
from rfuda.gradcheck import check_gradients
from rfuda.model import classification_loss, one_hot
from rfuda.tensor import (
    EVAL,
    LOG_FLOOR,
    TRAIN,
    Tape,
    Tensor,
    backward,
    conv2d,
    dense,
    detach,
    dropout,
    gru_step,
    log,
    max_pool2d,
    reduce_sum,
    relu,
    sigmoid,
    softmax,
    softplus,
    stack,
    take,
    tanh,
)

GRAD_TOL = 1e-4


def _param(g, *shape, scale=1.0):
    return Tensor(scale * g.standard_normal(shape), requires_grad=True)


def _gru_params(g, d_h, d_u, scale=0.5):
    params = {}
    for gate in ("z", "r", "h"):
        params[f"w_{gate}"] = _param(g, d_h, d_u, scale=scale)
        params[f"u_{gate}"] = _param(g, d_h, d_h, scale=scale)
        params[f"b_{gate}"] = _param(g, d_h, scale=scale)
    return params


# ----------------------------------------------------------------------
# conv2d
# ----------------------------------------------------------------------

def test_conv2d_zero_input_gives_bias():
    out = conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.5]))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 0.5))


def test_conv2d_unit_kernel_is_identity():
    x = rngs.stream(0, "conv-id").random((1, 5, 5))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_loop_oracle():
    g = rngs.stream(1, "conv-oracle")
    x = g.standard_normal((1, 4, 4))
    k = g.standard_normal((1, 1, 2, 2))
    out = conv2d(Tensor(x), Tensor(k), Tensor([0.25])).data

    expected = np.zeros((1, 3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.25
            for a in range(2):
                for b in range(2):
                    acc += x[0, i + a, j + b] * k[0, 0, a, b]
            expected[0, i, j] = acc
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_conv2d_batches_over_leading_axes():
    g = rngs.stream(2, "conv-batch")
    x = g.standard_normal((2, 3, 1, 5, 5))
    k, b = Tensor(g.standard_normal((4, 1, 3, 3))), Tensor(g.standard_normal(4))
    out = conv2d(Tensor(x), k, b).data
    assert out.shape == (2, 3, 4, 3, 3)
    np.testing.assert_allclose(out[1, 2], conv2d(Tensor(x[1, 2]), k, b).data, atol=1e-12)


def test_conv2d_kernel_larger_than_input_names_axis():
    with pytest.raises(DimensionError) as exc:
        conv2d(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]))
    assert exc.value.axis == "H"


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError, match="C_in"):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]))


# ----------------------------------------------------------------------
# max_pool2d
# ----------------------------------------------------------------------

def test_max_pool_small():
    out = max_pool2d(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2)
    np.testing.assert_array_equal(out.data, [[4.0]])


def test_max_pool_constant():
    out = max_pool2d(Tensor(np.full((3, 4, 6), 2.5)), 2)
    np.testing.assert_array_equal(out.data, np.full((3, 2, 3), 2.5))


def test_max_pool_matches_loop_oracle():
    x = rngs.stream(3, "pool").standard_normal((2, 4, 4))
    out = max_pool2d(Tensor(x), 2).data
    expected = np.zeros((2, 2, 2))
    for c in range(2):
        for i in range(2):
            for j in range(2):
                expected[c, i, j] = max(x[c, 2 * i + a, 2 * j + b] for a in range(2) for b in range(2))
    np.testing.assert_array_equal(out, expected)


def test_max_pool_tie_routes_gradient_to_first_index():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(max_pool2d(x, 2))
        tape.backward(loss)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_max_pool_non_divisible():
    with pytest.raises(DimensionError):
        max_pool2d(Tensor(np.zeros((5, 4))), 2)


# ----------------------------------------------------------------------
# dense
# ----------------------------------------------------------------------

def test_dense_identity_weight():
    x = rngs.stream(4, "dense").standard_normal(3)
    out = dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_zero_weight_gives_bias():
    out = dense(Tensor([1.0, -2.0]), Tensor(np.zeros((3, 2))), Tensor([0.1, 0.2, 0.3]))
    np.testing.assert_array_equal(out.data, [0.1, 0.2, 0.3])


def test_dense_matches_loop_oracle():
    g = rngs.stream(5, "dense-oracle")
    x, w, b = g.standard_normal(2), g.standard_normal((3, 2)), g.standard_normal(3)
    out = dense(Tensor(x), Tensor(w), Tensor(b)).data
    expected = [sum(w[i, j] * x[j] for j in range(2)) + b[i] for i in range(3)]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_dense_width_mismatch():
    with pytest.raises(DimensionError) as exc:
        dense(Tensor(np.zeros(4)), Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))
    assert exc.value.axis == "d_in"


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------

def test_softplus_values():
    assert softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)
    assert softplus(Tensor(1000.0)).item() == 1000.0
    assert softplus(Tensor(-1000.0)).item() == pytest.approx(0.0, abs=1e-300)
    assert softplus(Tensor(30.5)).item() == pytest.approx(30.5 + math.log1p(math.exp(-30.5)), rel=1e-15)


def test_softmax_uniform_for_constant_input():
    np.testing.assert_allclose(softmax(Tensor(np.full(6, 3.7))).data, np.full(6, 1 / 6), atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_rows_sum_to_one():
    out = softmax(Tensor(rngs.stream(6, "softmax").standard_normal((50, 6)) * 10), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((out > 0) & (out < 1))


def test_relu():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_log_is_clamped():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        y = log(x)
        tape.backward(reduce_sum(y))
    assert y.data[0] == pytest.approx(math.log(LOG_FLOOR))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


# ----------------------------------------------------------------------
# dropout
# ----------------------------------------------------------------------

def test_dropout_rate_zero_and_eval_are_identity():
    x = Tensor(rngs.stream(8, "drop").random((4, 5)))
    assert dropout(x, 0.0, rngs.stream(0), TRAIN) is x
    assert dropout(x, 0.0, None, EVAL) is x
    assert dropout(x, 0.9, None, EVAL) is x


def test_dropout_statistics():
    x = Tensor(np.ones(100_000))
    out = dropout(x, 0.5, rngs.stream(9, "drop-mc"), TRAIN).data
    assert abs(np.mean(out > 0) - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.02


def test_dropout_same_stream_same_mask():
    x = Tensor(np.ones((10, 10)))
    a = dropout(x, 0.3, rngs.stream(1, "mask"), TRAIN).data
    b = dropout(x, 0.3, rngs.stream(1, "mask"), TRAIN).data
    np.testing.assert_array_equal(a, b)


def test_dropout_per_row_streams_match_single_row_calls():
    x = Tensor(np.ones((3, 8)))
    rows = dropout(x, 0.5, [rngs.stream(2, i) for i in range(3)], TRAIN).data
    for i in range(3):
        single = dropout(Tensor(np.ones(8)), 0.5, rngs.stream(2, i), TRAIN).data
        np.testing.assert_array_equal(rows[i], single)


def test_dropout_rejects_rate_one():
    with pytest.raises(ConfigError):
        dropout(Tensor(np.ones(3)), 1.0, rngs.stream(0), TRAIN)


def test_dropout_train_needs_stream():
    with pytest.raises(UsageError):
        dropout(Tensor(np.ones(3)), 0.5, None, TRAIN)


# ----------------------------------------------------------------------
# gru_step
# ----------------------------------------------------------------------

def test_gru_zero_params_zero_state():
    params = {k: Tensor(np.zeros_like(v.data)) for k, v in _gru_params(rngs.stream(0), 3, 2).items()}
    h = gru_step(Tensor([1.0, -1.0]), Tensor(np.zeros(3)), params)
    np.testing.assert_array_equal(h.data, np.zeros(3))


def test_gru_saturated_update_gate_takes_candidate():
    g = rngs.stream(10, "gru-sat")
    params = _gru_params(g, 3, 2)
    params["b_z"] = Tensor(np.full(3, 50.0))
    x, h_prev = g.standard_normal(2), g.standard_normal(3)
    h = gru_step(Tensor(x), Tensor(h_prev), params).data

    p = {k: v.data for k, v in params.items()}
    r = 1 / (1 + np.exp(-(p["w_r"] @ x + p["u_r"] @ h_prev + p["b_r"])))
    candidate = np.tanh(p["w_h"] @ x + p["u_h"] @ (r * h_prev) + p["b_h"])
    assert np.max(np.abs(h - candidate)) < 1e-9


def test_gru_matches_scalar_oracle():
    g = rngs.stream(11, "gru-oracle")
    params = _gru_params(g, 2, 3)
    x, h_prev = g.standard_normal(3), g.standard_normal(2)
    h = gru_step(Tensor(x), Tensor(h_prev), params).data

    p = {k: v.data for k, v in params.items()}
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    for i in range(2):
        z = sig(sum(p["w_z"][i, j] * x[j] for j in range(3)) + sum(p["u_z"][i, j] * h_prev[j] for j in range(2)) + p["b_z"][i])
        r = [sig(sum(p["w_r"][k, j] * x[j] for j in range(3)) + sum(p["u_r"][k, j] * h_prev[j] for j in range(2)) + p["b_r"][k])
             for k in range(2)]
        c = math.tanh(sum(p["w_h"][i, j] * x[j] for j in range(3))
                      + sum(p["u_h"][i, j] * r[j] * h_prev[j] for j in range(2)) + p["b_h"][i])
        assert h[i] == pytest.approx((1 - z) * h_prev[i] + z * c, abs=1e-12)


def test_gru_width_mismatch():
    params = _gru_params(rngs.stream(0), 3, 2)
    with pytest.raises(DimensionError) as exc:
        gru_step(Tensor(np.zeros(4)), Tensor(np.zeros(3)), params)
    assert exc.value.axis == "d_u"


# ----------------------------------------------------------------------
# Tape and backward
# ----------------------------------------------------------------------

def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce_sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        backward(x * x)
    assert x.grad == 6.0


def test_reused_input_accumulates():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(x * x + x)
    assert x.grad == 5.0


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(UsageError):
            tape.backward(y)


def test_backward_without_tape():
    with pytest.raises(UsageError):
        backward(Tensor(1.0))


def test_ops_outside_tape_do_not_require_grad():
    x = Tensor([1.0], requires_grad=True)
    assert not (x * 2.0).requires_grad


def test_tape_records_in_execution_order():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        reduce_sum(relu(x * 2.0))
    assert tape.op_names() == ["mul", "relu", "sum"]


def test_detach_stops_gradient():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(x * detach(x))
    assert x.grad == 2.0


def test_check_numerics_names_op():
    x = Tensor(1e200, requires_grad=True)
    with np.errstate(over="ignore"), Tape(check_numerics=True):
        with pytest.raises(NumericalError) as exc:
            x * x
    assert exc.value.op == "mul"


def test_first_nonfinite():
    x = Tensor([1.0, 1e200], requires_grad=True)
    with np.errstate(over="ignore"), Tape() as tape:
        y = x + 1.0
        y * y
    assert tape.first_nonfinite() == "mul#1"


# ----------------------------------------------------------------------
# Finite-difference checks
# ----------------------------------------------------------------------

INSTANCES = range(20)


@pytest.mark.parametrize("seed", INSTANCES)
def test_conv2d_gradients(seed):
    g = rngs.stream(seed, "grad-conv")
    x, k, b = _param(g, 2, 1, 4, 4), _param(g, 2, 1, 2, 2), _param(g, 2)
    w = g.standard_normal((2, 2, 3, 3))
    assert check_gradients(lambda: reduce_sum(conv2d(x, k, b) * w), [x, k, b]) < GRAD_TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_pool_and_relu_gradients(seed):
    g = rngs.stream(seed, "grad-pool")
    x = _param(g, 2, 4, 4)
    w = g.standard_normal((2, 2, 2))
    assert check_gradients(lambda: reduce_sum(max_pool2d(relu(x), 2) * w), [x]) < GRAD_TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_dense_and_activation_gradients(seed):
    g = rngs.stream(seed, "grad-dense")
    x, w, b = _param(g, 2, 3), _param(g, 4, 3), _param(g, 4)
    c = g.standard_normal((2, 4))

    def loss():
        h = dense(x, w, b)
        return reduce_sum((softplus(h) + sigmoid(h) + tanh(h)) * c)

    assert check_gradients(loss, [x, w, b]) < GRAD_TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_softmax_cross_entropy_gradients(seed):
    g = rngs.stream(seed, "grad-ce")
    logits = _param(g, 4, 3)
    targets = one_hot(g.integers(0, 3, size=4), 3)
    assert check_gradients(lambda: classification_loss(softmax(logits), targets), [logits]) < GRAD_TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_log_gradients(seed):
    g = rngs.stream(seed, "grad-log")
    x = Tensor(g.uniform(0.1, 2.0, size=5), requires_grad=True)
    assert check_gradients(lambda: reduce_sum(log(x)), [x]) < GRAD_TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_dropout_gradients(seed):
    g = rngs.stream(seed, "grad-drop")
    x = _param(g, 3, 4)
    w = g.standard_normal((3, 4))
    loss = lambda: reduce_sum(dropout(x, 0.4, rngs.stream(seed, "mask"), TRAIN) * w)
    assert check_gradients(loss, [x]) < GRAD_TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_gru_step_gradients(seed):
    g = rngs.stream(seed, "grad-gru")
    params = _gru_params(g, 3, 2)
    x, h_prev = _param(g, 2, 2), _param(g, 2, 3)
    w = g.standard_normal((2, 3))

    def loss():
        h = gru_step(x, h_prev, params)
        return reduce_sum(gru_step(x, h, params) * w)

    assert check_gradients(loss, [x, h_prev] + list(params.values())) < GRAD_TOL


# ----------------------------------------------------------------------
# Indexing and stacking
# ----------------------------------------------------------------------

def test_slice_gradient_lands_in_place():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce_sum(take(x, (slice(None), 1)) * np.array([1.0, 2.0, 3.0])))
    expected = np.zeros((3, 4))
    expected[:, 1] = [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(x.grad, expected)


def test_repeated_integer_index_accumulates():
    x = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce_sum(take(x, np.array([2, 0, 2, 2]))))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 3.0, 0.0])


@pytest.mark.parametrize("seed", INSTANCES)
def test_stack_gradients(seed):
    g = rngs.stream(seed, "grad-stack")
    a, b = _param(g, 2, 3), _param(g, 2, 3)
    w = g.standard_normal((2, 2, 3))
    assert check_gradients(lambda: reduce_sum(softplus(stack([a, b])) * w), [a, b]) < GRAD_TOL


def test_stack_rejects_mixed_shapes():
    with pytest.raises(DimensionError):
        stack([Tensor(np.zeros(3)), Tensor(np.zeros(4))])
    with pytest.raises(UsageError):
        stack([])
