import numpy as np
import pytest

import autodiff_engine as ad
from autodiff_engine import AdamState, Tape, adam_step, grad_check, load_parameters, save_parameters, value_and_grad
from errors import ContractError, NumericError


def _weighted(tape, out, weights):
    """Scalar loss over an output: sum(out * weights)"""
    return ad.reduce_sum(ad.mul(out, tape.constant(weights)))


def _distinct(rng, shape, offset=0.05, step=0.1):
    """Values at least `step` apart and at least `offset` away from zero"""
    size = int(np.prod(shape))
    values = (rng.permutation(size) - size // 2) * step
    values = np.where(values >= 0, values + offset, values - offset)
    return values.reshape(shape)


def test_affine_tanh_softmax_log_chain(rng):
    x = rng.normal(size=(3, 4))
    weights = rng.normal(size=(3, 2))

    def loss_fn(tape, p):
        hidden = ad.tanh(ad.affine(tape.constant(x), p["W"], p["b"]))
        return _weighted(tape, ad.log(ad.softmax(hidden)), weights)

    params = {"W": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}
    assert grad_check(loss_fn, params, h=1e-5) < 1e-5


def test_conv1d_gradient(rng):
    weights = rng.normal(size=(4, 3))

    def loss_fn(tape, p):
        return _weighted(tape, ad.conv1d(p["x"], p["f"], p["bias"]), weights)

    params = {"x": rng.normal(size=(5, 2)), "f": rng.normal(size=(3, 2, 2)), "bias": rng.normal(size=3)}
    assert grad_check(loss_fn, params, h=1e-5) < 1e-5


def test_conv1d_matches_naive_loops(rng):
    x, filters = rng.normal(size=(6, 3)), rng.normal(size=(2, 3, 3))
    tape = Tape()
    out = ad.conv1d(tape.constant(x), tape.constant(filters)).data
    for t in range(4):
        for f in range(2):
            assert out[t, f] == pytest.approx(sum(x[t + k] @ filters[f, k] for k in range(3)), abs=1e-12)


@pytest.mark.parametrize("pad", [0, 1])
def test_conv2d_gradient(rng, pad):
    weights = rng.normal(size=(2, 5 + 2 * pad - 2, 6 + 2 * pad - 2))

    def loss_fn(tape, p):
        return _weighted(tape, ad.conv2d(p["x"], p["f"], p["bias"], pad=pad), weights)

    params = {"x": rng.normal(size=(2, 5, 6)), "f": rng.normal(size=(2, 2, 3, 3)), "bias": rng.normal(size=2)}
    assert grad_check(loss_fn, params, h=1e-5) < 1e-5


def test_conv2d_matches_naive_loops(rng):
    x, filters = rng.normal(size=(1, 4, 5)), rng.normal(size=(2, 1, 3, 3))
    tape = Tape()
    out = ad.conv2d(tape.constant(x), tape.constant(filters)).data
    assert out.shape == (2, 2, 3)
    for o in range(2):
        for i in range(2):
            for j in range(3):
                expected = np.sum(x[0, i:i + 3, j:j + 3] * filters[o, 0])
                assert out[o, i, j] == pytest.approx(expected, abs=1e-12)


def test_maxpool_and_relu_gradients(rng):
    x = _distinct(rng, (2, 5, 7))
    weights = rng.normal(size=(2, 2, 3))

    def loss_fn(tape, p):
        return _weighted(tape, ad.maxpool2d(ad.relu(p["x"]), (2, 2)), weights)

    assert grad_check(loss_fn, {"x": x}, h=1e-5) < 1e-5


def test_maxpool_matches_naive_loops(rng):
    x = rng.normal(size=(5, 6))
    out = ad.maxpool2d(Tape().constant(x)).data
    assert out.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            assert out[i, j] == x[2 * i:2 * i + 2, 2 * j:2 * j + 2].max()


def test_adaptive_maxpool_gradient_with_overlapping_bins(rng):
    x = _distinct(rng, (1, 3, 5))
    weights = rng.normal(size=(1, 4, 10))

    def loss_fn(tape, p):
        return _weighted(tape, ad.adaptive_maxpool2d(p["x"], (4, 10)), weights)

    assert grad_check(loss_fn, {"x": x}, h=1e-5) < 1e-5


def test_adaptive_maxpool_bins():
    x = np.arange(12.0).reshape(3, 4)
    out = ad.adaptive_maxpool2d(Tape().constant(x), (2, 2)).data
    # rows [0, 2) and [1, 3); cols [0, 2) and [2, 4)
    np.testing.assert_array_equal(out, [[5.0, 7.0], [9.0, 11.0]])


def test_cosine_matrix_and_kernels_gradient(rng):
    weights = rng.normal(size=(3, 3, 4))

    def loss_fn(tape, p):
        M = ad.cosine_matrix(p["q"], p["d"])
        return _weighted(tape, ad.rbf_kernels(M, [0.5, 0.0, -0.5], [0.3, 0.3, 0.3]), weights)

    params = {"q": rng.normal(size=(3, 5)), "d": rng.normal(size=(4, 5))}
    assert grad_check(loss_fn, params, h=1e-5) < 1e-5


def test_cosine_matrix_zero_row_gives_zero():
    tape = Tape()
    q = tape.parameter("q", np.array([[0.0, 0.0], [1.0, 0.0]]))
    d = tape.constant(np.array([[1.0, 1.0]]))
    M = ad.cosine_matrix(q, d)
    assert M.data[0, 0] == 0.0
    assert M.data[1, 0] == pytest.approx(1 / np.sqrt(2))
    grads = tape.backward(ad.reduce_sum(M))
    np.testing.assert_array_equal(grads["q"][0], [0.0, 0.0])


def test_concat_stack_reshape_pad_gradient(rng):
    weights = rng.normal(size=(6, 5))

    def loss_fn(tape, p):
        joined = ad.concat([p["a"], p["b"]])
        rows = ad.stack([joined, ad.exp(joined)])
        square = ad.reshape(rows, (2, 5))
        return _weighted(tape, ad.pad2d(square, (6, 5)), weights)

    params = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
    assert grad_check(loss_fn, params, h=1e-5) < 1e-5


def test_pad2d_crops_overflow():
    tape = Tape()
    out = ad.pad2d(tape.constant(np.ones((4, 5))), (3, 6)).data
    assert out.shape == (3, 6)
    assert out[:, :5].sum() == 15.0
    assert out[:, 5].sum() == 0.0


def test_tanh_at_zero_passes_gradient_through():
    tape = Tape()
    x = tape.parameter("x", 0.0)
    grads = tape.backward(ad.tanh(x))
    assert grads["x"] == pytest.approx(1.0)


def test_log_clamp_blocks_gradient():
    tape = Tape()
    x = tape.parameter("x", np.array([0.0, 2.0]))
    y = ad.log(x)
    assert y.data[0] == pytest.approx(np.log(1e-10))
    grads = tape.backward(ad.reduce_sum(y))
    np.testing.assert_allclose(grads["x"], [0.0, 0.5])


def test_shared_input_accumulates_gradient():
    tape = Tape()
    x = tape.parameter("x", np.array([3.0]))
    grads = tape.backward(ad.reduce_sum(ad.mul(x, x)))
    np.testing.assert_allclose(grads["x"], [6.0])


def test_backward_before_forward():
    tape = Tape()
    with pytest.raises(ContractError):
        tape.backward(tape.constant(1.0))


def test_non_scalar_loss_is_rejected():
    tape = Tape()
    x = tape.parameter("x", np.ones(2))
    with pytest.raises(ContractError):
        tape.backward(ad.scale(x, 2.0))


def test_non_finite_forward_is_reported():
    tape = Tape()
    x = tape.parameter("x", np.array([1000.0]))
    with pytest.raises(NumericError, match="exp"):
        ad.exp(x)


def test_parameter_names_are_unique():
    tape = Tape()
    tape.parameter("w", 1.0)
    with pytest.raises(ContractError):
        tape.parameter("w", 2.0)


def test_shape_mismatch_names_op():
    tape = Tape()
    with pytest.raises(ContractError, match="add"):
        ad.add(tape.constant(np.ones(2)), tape.constant(np.ones(3)))


def test_grad_check_is_tight_on_a_quadratic(rng):
    weights = rng.uniform(0.5, 2.0, size=(3, 4))

    def loss_fn(tape, p):
        return ad.reduce_sum(ad.mul(tape.constant(weights), ad.mul(p["x"], p["x"])))

    assert grad_check(loss_fn, {"x": rng.uniform(0.5, 2.0, size=(3, 4))}) < 1e-8


def test_softmax_sums_to_one_and_ignores_shifts(rng):
    x = rng.normal(size=(2, 6))
    tape = Tape()
    y = ad.softmax(tape.constant(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(2), rtol=0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(tape.constant(x + 100.0)).data, y, rtol=0, atol=1e-12)
    assert np.all(y > 0)


def test_first_adam_step_moves_by_lr(rng):
    params = {"w": rng.normal(size=4)}
    grads = {"w": rng.normal(size=4)}
    new_params, state = adam_step(params, grads, AdamState.zeros_like(params), lr=0.01)
    np.testing.assert_allclose(new_params["w"] - params["w"], -0.01 * np.sign(grads["w"]), atol=1e-6)
    assert state.t == 1


def test_adam_minimizes_a_quadratic():
    target = np.array([1.0, -2.0, 0.5])

    def loss_fn(tape, p):
        diff = ad.add(p["w"], tape.constant(-target))
        return ad.reduce_sum(ad.mul(diff, diff))

    params = {"w": np.zeros(3)}
    state = AdamState.zeros_like(params)
    for _ in range(2000):
        _, grads = value_and_grad(loss_fn, params)
        params, state = adam_step(params, grads, state, lr=0.01)
    np.testing.assert_allclose(params["w"], target, atol=1e-2)


def test_parameters_round_trip_bit_exact(rng, tmp_path):
    params = {"w": rng.normal(size=(3, 2)), "b": np.asarray(rng.normal())}
    path = str(tmp_path / "params.json")
    save_parameters(path, params, {"epoch": 3})
    loaded, metadata = load_parameters(path)
    assert metadata["epoch"] == 3
    for name, value in params.items():
        assert loaded[name].shape == value.shape
        assert np.array_equal(loaded[name], value)


def test_nan_parameters_cannot_be_saved(tmp_path):
    with pytest.raises(NumericError):
        save_parameters(str(tmp_path / "bad.json"), {"w": np.array([np.nan])})
