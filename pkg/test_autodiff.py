"""Autodiff core, optimizer and gradient checks"""

import math

import numpy as np
import pytest

from mrmp.core import tensor as T
from mrmp.core.gradcheck import gradient_check
from mrmp.core.optim import AdamState, LrSchedule, adam_step, clip_grad_norm, lr_at_epoch
from mrmp.core.tensor import GradTape, Tensor
from mrmp.errors import NonFiniteError, ShapeError, TapeError, UnknownOpError
from mrmp.nn import layers


def f64(values):
    return Tensor(np.asarray(values, dtype=np.float64), dtype=np.float64)


def test_sum_of_squares_gradient():
    x = f64([1.0, -2.0, 3.0])
    with GradTape() as tape:
        tape.watch(x)
        loss = T.sum(T.mul(x, x))
    grads = tape.backward(loss, {"x": x})
    np.testing.assert_allclose(grads["x"], [2.0, -4.0, 6.0])


def test_fan_out_accumulates():
    x = f64([2.0])
    with GradTape() as tape:
        tape.watch(x)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))
        loss = T.sum(y)
    grads = tape.backward(loss, {"x": x})
    np.testing.assert_allclose(grads["x"], [2 * 2.0 + 3.0])


def test_broadcast_add_gradient_is_summed():
    a = f64(np.ones((3, 2)))
    b = f64([1.0, 1.0])
    with GradTape() as tape:
        tape.watch_all({"a": a, "b": b})
        loss = T.sum(T.add(a, b))
    grads = tape.backward(loss, {"a": a, "b": b})
    np.testing.assert_allclose(grads["b"], [3.0, 3.0])
    np.testing.assert_allclose(grads["a"], np.ones((3, 2)))


def test_matmul_gradient():
    a = f64([[1.0, 2.0]])
    b = f64([[3.0], [4.0]])
    with GradTape() as tape:
        tape.watch_all({"a": a, "b": b})
        loss = T.sum(T.matmul(a, b))
    grads = tape.backward(loss, {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"], [[3.0, 4.0]])
    np.testing.assert_allclose(grads["b"], [[1.0], [2.0]])


def test_unreachable_param_gets_zero_gradient():
    x = f64([1.0, 2.0])
    unused = f64([[5.0]])
    with GradTape() as tape:
        tape.watch_all({"x": x, "unused": unused})
        loss = T.sum(x)
    grads = tape.backward(loss, {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros((1, 1)))


def test_tape_is_single_use():
    x = f64([1.0])
    with GradTape() as tape:
        tape.watch(x)
        loss = T.sum(x)
    tape.backward(loss, {"x": x})
    assert tape.consumed
    with pytest.raises(TapeError):
        tape.backward(loss, {"x": x})


def test_backward_needs_scalar():
    x = f64([1.0, 2.0])
    with GradTape() as tape:
        tape.watch(x)
        y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y, {"x": x})


def test_no_recording_without_tape():
    x = f64([1.0])
    y = T.relu(x)
    assert y.node_id is None


def test_unknown_op():
    with pytest.raises(UnknownOpError):
        T.forward("no_such_op", [f64([1.0])])


def test_shape_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))


def test_mixed_dtypes_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(2), dtype=np.float32), Tensor(np.ones(2), dtype=np.float64))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        T.log(f64([0.0]))


def test_masked_fill_and_softmax_give_exact_zero():
    scores = f64([[1.0, 2.0, 3.0]])
    masked = T.masked_fill(scores, np.array([[False, False, True]]), layers.MASK_FILL)
    weights = T.softmax(masked, axis=-1).data
    assert weights[0, 2] == 0.0
    assert weights[0, :2].sum() == pytest.approx(1.0)


def test_l2_normalize_zero_row():
    x = f64([[3.0, 4.0], [0.0, 0.0]])
    with GradTape() as tape:
        tape.watch(x)
        y = T.l2_normalize(x, axis=1)
        loss = T.sum(y)
    np.testing.assert_allclose(y.data, [[0.6, 0.8], [0.0, 0.0]])
    grads = tape.backward(loss, {"x": x})
    np.testing.assert_array_equal(grads["x"][1], [0.0, 0.0])


def test_dropout_is_seeded_and_identity_at_inference():
    x = Tensor(np.ones((50, 20)))
    a = T.dropout(x, 0.5, True, [0, 1, 2])
    b = T.dropout(x, 0.5, True, [0, 1, 2])
    np.testing.assert_array_equal(a.data, b.data)
    assert set(np.unique(a.data)) <= {0.0, 2.0}
    assert 0.4 < (a.data > 0).mean() < 0.6
    assert T.dropout(x, 0.5, False, 0) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, 0)


def test_lr_step_decay():
    schedule = LrSchedule()
    assert lr_at_epoch(schedule, 0) == pytest.approx(0.0002)
    assert lr_at_epoch(schedule, 9) == pytest.approx(0.0002)
    assert lr_at_epoch(schedule, 10) == pytest.approx(0.00018)
    assert lr_at_epoch(schedule, 25) == pytest.approx(0.0002 * 0.81)
    with pytest.raises(ValueError):
        lr_at_epoch(schedule, -1)


def test_adam_first_step_moves_by_lr():
    param = f64([1.0, -1.0])
    params = {"p": param}
    state = AdamState.create(params)
    adam_step(params, {"p": np.array([0.5, -2.0])}, state, lr=0.1)
    np.testing.assert_allclose(param.data, [0.9, -0.9], atol=1e-6)
    assert state.t == 1


def test_adam_rejects_non_finite_gradient():
    params = {"p": f64([1.0])}
    state = AdamState.create(params)
    with pytest.raises(NonFiniteError):
        adam_step(params, {"p": np.array([np.nan])}, state, lr=0.1)


def test_clip_grad_norm():
    grads, norm = clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(grads["a"], [0.6, 0.8], atol=1e-6)
    unchanged, _ = clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)
    np.testing.assert_array_equal(unchanged["a"], [0.3, 0.4])


@pytest.mark.parametrize("op", ["sigmoid", "softmax", "layer_norm", "l2_normalize", "log"])
def test_single_op_gradients(op, rng):
    x = f64(rng.uniform(0.5, 1.5, size=(3, 4)))
    gamma = f64(rng.normal(size=4))
    beta = f64(rng.normal(size=4))
    weights = rng.normal(size=(3, 4))

    def fn():
        if op == "layer_norm":
            y = T.layer_norm(x, gamma, beta)
        elif op == "softmax":
            y = T.softmax(x, axis=-1)
        elif op == "l2_normalize":
            y = T.l2_normalize(x, axis=1)
        else:
            y = getattr(T, op)(x)
        return T.sum(T.mul(y, weights))

    params = {"x": x, "gamma": gamma, "beta": beta} if op == "layer_norm" else {"x": x}
    assert gradient_check(fn, params) < 1e-5


def test_attention_and_ffn_gradients(rng):
    d, heads = 8, 2
    params = {}
    layers.init_attention(params, "attn", d, rng, np.float64)
    layers.init_ffn(params, "ffn", d, 16, rng, np.float64)
    layers.init_layer_norm(params, "ln", d, np.float64)
    x = f64(rng.normal(size=(2, 5, d)))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    weights = rng.normal(size=(2, 5, d))

    def fn():
        h = T.add(x, layers.multi_head_attention(x, x, x, mask, params, "attn", heads))
        h = layers.layer_norm(h, params, "ln")
        out = layers.position_wise_ffn(h, params, "ffn")
        return T.sum(T.mul(out, weights))

    params["x"] = x
    assert gradient_check(fn, params) < 1e-4


def test_gradient_check_detects_wrong_gradient():
    x = f64([1.0, 2.0])

    @T.register("broken_square")
    def _broken(a):
        return a * a, lambda g: (g * a,)

    def fn():
        return T.sum(T.forward("broken_square", [x]))

    assert gradient_check(fn, {"x": x}) > 0.1
    assert math.isfinite(gradient_check(lambda: T.sum(T.mul(x, x)), {"x": x}))


def test_relu_and_constant_softmax_values():
    np.testing.assert_array_equal(T.relu(f64([-1.0, 0.0, 2.5])).data, [0.0, 0.0, 2.5])
    np.testing.assert_allclose(T.softmax(f64([[4.0, 4.0, 4.0]])).data, [[1 / 3, 1 / 3, 1 / 3]])


def test_matmul_with_identity(rng):
    X = f64(rng.normal(size=(5, 4)))
    np.testing.assert_array_equal(T.matmul(X, f64(np.eye(4))).data, X.data)


def test_sigmoid_gradient_at_zero():
    x = f64([0.0])
    with GradTape() as tape:
        tape.watch(x)
        loss = T.sum(T.sigmoid(x))
    assert tape.backward(loss, {"x": x})["x"][0] == pytest.approx(0.25)


def test_adam_zero_gradient_keeps_parameter():
    param = f64([1.5, -0.25])
    params = {"p": param}
    adam_step(params, {"p": np.zeros(2)}, AdamState.create(params), lr=0.0002)
    np.testing.assert_array_equal(param.data, [1.5, -0.25])


def test_adam_scalar_first_step():
    param = f64([1.0])
    params = {"p": param}
    adam_step(params, {"p": np.array([1.0])}, AdamState.create(params), lr=0.0002)
    assert param.data[0] == pytest.approx(1.0 - 0.0002, abs=1e-10)


def test_adam_identical_params_get_identical_updates(rng):
    grad = rng.normal(size=3)
    params = {"a": f64([0.1, 0.2, 0.3]), "b": f64([0.1, 0.2, 0.3])}
    state = AdamState.create(params)
    for _ in range(3):
        adam_step(params, {"a": grad, "b": grad}, state, lr=0.01)
    np.testing.assert_array_equal(params["a"].data, params["b"].data)


def test_dropout_preserves_mean():
    out = T.dropout(Tensor(np.ones(100_000)), 0.5, True, [7])
    assert out.data.mean() == pytest.approx(1.0, abs=0.01)
    x = Tensor(np.ones(4))
    assert T.dropout(x, 0.0, True, 0) is x
    assert T.dropout(x, 0.2, False, 0) is x


def test_linear_layer_gradient(rng):
    params = {}
    layers.init_linear(params, "lin", 3, 2, rng, np.float64)
    x = f64(rng.normal(size=(4, 3)))
    weights = rng.normal(size=(4, 2))
    params["x"] = x
    assert gradient_check(lambda: T.sum(T.mul(layers.linear(x, params, "lin"), weights)), params) < 1e-7


def test_constant_function_has_zero_error():
    x = f64([1.0, 2.0])
    assert gradient_check(lambda: T.scale(T.sum(x), 0.0), {"x": x}) == 0.0
