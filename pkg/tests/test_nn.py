"""
Tests for the reverse-mode tape, primitives, layers, Adam and checkpoints.
"""

import threading

import numpy as np
import pytest

from shapeflow.core.exceptions import CheckpointError, ShapeMismatchError
from shapeflow.nn import functional as F
from shapeflow.nn.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from shapeflow.nn.layers import AttentionGate, ConvBlock, Conv3d
from shapeflow.nn.optim import AdamState, adam_step
from shapeflow.nn.tensor import Tape, Tensor, default_dtype, precision


def tape_gradients(fn, arrays, weights):
    """Gradients of ``sum(fn(*inputs) * weights)`` with respect to every input."""
    with Tape() as tape:
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*inputs)
        loss = F.sum_all(F.mul(out, weights))
        return tape.gradients(loss, inputs)


def numeric_gradients(fn, arrays, weights, h=1e-6):
    grads = []
    for index, base in enumerate(arrays):
        grad = np.zeros_like(base)
        for flat in range(base.size):
            values = []
            for sign in (1.0, -1.0):
                shifted = [a.copy() for a in arrays]
                shifted[index].reshape(-1)[flat] += sign * h
                out = fn(*[Tensor(a) for a in shifted])
                values.append(float(np.sum(out.values * weights)))
            grad.reshape(-1)[flat] = (values[0] - values[1]) / (2 * h)
        grads.append(grad)
    return grads


def assert_gradients_match(fn, arrays, rng, rtol=1e-6, atol=1e-8):
    with precision(np.float64):
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        weights = rng.normal(size=out_shape)
        analytic = tape_gradients(fn, arrays, weights)
        numeric = numeric_gradients(fn, arrays, weights)
    for a, n in zip(analytic, numeric):
        assert a.shape == n.shape
        assert np.allclose(a, n, rtol=rtol, atol=atol), np.max(np.abs(a - n))


class TestPrimitiveGradients:
    def test_elementwise(self, rng):
        assert_gradients_match(F.gelu, [rng.normal(size=(2, 3, 4))], rng)
        assert_gradients_match(F.sigmoid, [rng.normal(size=(5,))], rng)
        assert_gradients_match(lambda a, b: F.mul(F.sub(a, b), a), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], rng)

    def test_broadcasting(self, rng):
        assert_gradients_match(F.add, [rng.normal(size=(2, 3)), rng.normal(size=(3,))], rng)
        assert_gradients_match(F.mul, [rng.normal(size=(2, 3, 1)), rng.normal(size=(1, 4))], rng)

    def test_conv3d(self, rng):
        arrays = [rng.normal(size=(2, 2, 4, 3, 3)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=(3,))]
        assert_gradients_match(F.conv3d, arrays, rng)

    def test_pointwise_conv3d(self, rng):
        assert_gradients_match(
            lambda x, w: F.conv3d(x, w), [rng.normal(size=(1, 3, 2, 2, 2)), rng.normal(size=(2, 3, 1, 1, 1))], rng
        )

    def test_layer_norm(self, rng):
        arrays = [rng.normal(size=(2, 4, 2, 2, 2)), rng.normal(size=(4,)), rng.normal(size=(4,))]
        assert_gradients_match(F.layer_norm, arrays, rng, rtol=1e-5, atol=1e-7)

    def test_resampling(self, rng):
        # distinct values keep every pooling window free of ties
        pooled = rng.permutation(64).reshape(1, 1, 4, 4, 4) / 7.0
        assert_gradients_match(F.maxpool3d, [pooled], rng)
        assert_gradients_match(F.upsample2, [rng.normal(size=(1, 2, 2, 1, 2))], rng)
        assert_gradients_match(
            lambda a, b: F.concat([a, b], axis=1),
            [rng.normal(size=(1, 2, 2, 2, 2)), rng.normal(size=(1, 3, 2, 2, 2))],
            rng,
        )

    def test_mse(self, rng):
        target = rng.normal(size=(3, 4))
        assert_gradients_match(lambda p: F.mse(p, target), [rng.normal(size=(3, 4))], rng)


class TestPrimitiveValues:
    def test_gelu_values(self):
        out = F.gelu(Tensor(np.array([0.0, 1.0, -1.0])))
        assert np.allclose(out.values, [0.0, 0.8413447, -0.1586553], atol=1e-6)

    def test_conv3d_identity_kernel(self, rng):
        with precision(np.float64):
            x = rng.normal(size=(1, 1, 3, 4, 5))
            kernel = np.zeros((1, 1, 3, 3, 3))
            kernel[0, 0, 1, 1, 1] = 1.0
            assert np.allclose(F.conv3d(Tensor(x), Tensor(kernel)).values, x)

    def test_conv3d_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 4)))
        with pytest.raises(ShapeMismatchError):
            F.conv3d(x, Tensor(np.zeros((1, 3, 3, 3, 3))))
        with pytest.raises(ShapeMismatchError):
            F.conv3d(x, Tensor(np.zeros((1, 2, 2, 2, 2))))
        with pytest.raises(ShapeMismatchError):
            F.conv3d(Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.zeros((1, 2, 3, 3, 3))))

    def test_maxpool_needs_even_dims(self):
        with pytest.raises(ShapeMismatchError):
            F.maxpool3d(Tensor(np.zeros((1, 1, 3, 4, 4))))

    def test_maxpool_ties_route_to_first_element(self):
        with Tape() as tape:
            x = Tensor(np.zeros((1, 1, 2, 2, 2)), requires_grad=True)
            (grad,) = tape.gradients(F.sum_all(F.maxpool3d(x)), [x])
        expected = np.zeros((1, 1, 2, 2, 2))
        expected[0, 0, 0, 0, 0] = 1.0
        assert np.array_equal(grad, expected)

    def test_maxpool_tie_prefers_x_offset(self):
        values = np.zeros((1, 1, 2, 2, 2))
        values[0, 0, 1, 0, 0] = 1.0
        values[0, 0, 0, 1, 0] = 1.0
        with Tape() as tape:
            x = Tensor(values, requires_grad=True)
            out = F.maxpool3d(x)
            (grad,) = tape.gradients(F.sum_all(out), [x])
        assert out.values.ravel()[0] == 1.0
        assert grad[0, 0, 1, 0, 0] == 1.0
        assert grad.sum() == 1.0

    def test_layer_norm_normalizes_channels(self, rng):
        with precision(np.float64):
            x = Tensor(rng.normal(2.0, 3.0, size=(2, 6, 2, 3, 2)))
            out = F.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.allclose(out.values.mean(axis=1), 0.0, atol=1e-10)
        assert np.allclose(out.values.var(axis=1), 1.0, atol=1e-4)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            F.mse(Tensor(np.zeros(3)), np.zeros(4))


class TestTape:
    def test_fan_out_accumulates(self):
        with precision(np.float64), Tape() as tape:
            x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
            y = x * x + x
            (grad,) = tape.gradients(F.sum_all(y), [x])
        assert np.allclose(grad, 2 * np.array([1.5, -2.0]) + 1)

    def test_intermediate_gradients(self):
        with precision(np.float64), Tape() as tape:
            x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
            hidden = x * 2.0
            loss = F.sum_all(hidden * hidden)
            grad_x, grad_hidden = tape.gradients(loss, [x, hidden])
        assert np.allclose(grad_hidden, 2 * hidden.values)
        assert np.allclose(grad_x, 8 * x.values)

    def test_seeded_cotangent(self):
        with precision(np.float64), Tape() as tape:
            x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
            y = x * 3.0
            (grad,) = tape.gradients(y, [x], seed=np.array([1.0, -1.0]))
        assert np.allclose(grad, [3.0, -3.0])

    def test_untracked_inputs_are_not_recorded(self):
        with Tape() as tape:
            F.gelu(Tensor(np.ones(3)))
        assert tape.nodes == []

    def test_unreachable_gives_zeros(self):
        with Tape() as tape:
            x = Tensor(np.ones(2), requires_grad=True)
            other = Tensor(np.ones(3), requires_grad=True)
            loss = F.sum_all(x * x)
            _, grad = tape.gradients(loss, [x, other])
        assert np.array_equal(grad, np.zeros(3))

    def test_backward_accumulates_into_leaves(self):
        with precision(np.float64), Tape():
            x = Tensor(np.array([2.0]), requires_grad=True)
            F.sum_all(x * x).backward()
        with precision(np.float64), Tape():
            F.sum_all(x * 3.0).backward()
        assert x.grad[0] == pytest.approx(7.0)

    def test_backward_requires_tape(self):
        with pytest.raises(RuntimeError):
            Tensor(np.ones(1)).backward()

    def test_precision_is_thread_local(self):
        seen = {}

        def worker():
            seen["dtype"] = Tensor(np.ones(1)).dtype

        with precision(np.float64):
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
            assert Tensor(np.ones(1)).dtype == np.float64
        assert seen["dtype"] == np.float32
        assert default_dtype() == np.float32


class TestLayers:
    def test_parameter_order(self, rng):
        block = ConvBlock(2, 3, rng)
        names = [name for name, _ in block.named_parameters()]
        assert names == ["conv.weight", "conv.bias", "norm.gamma", "norm.beta"]
        assert block.num_parameters() == 3 * 2 * 27 + 3 + 3 + 3

    def test_conv_initialization(self, rng):
        conv = Conv3d(4, 2, 3, rng)
        bound = np.sqrt(6.0 / (4 * 27))
        assert np.all(np.abs(conv.weight.values) <= bound * (1 + 1e-6))
        assert np.all(conv.bias.values == 0.0)

    def test_attention_gate(self, rng):
        gate = AttentionGate(skip_channels=2, gating_channels=4, inter_channels=3, rng=rng)
        skip = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
        gating = Tensor(rng.normal(size=(1, 4, 2, 2, 2)))
        alpha = gate.coefficients(gating, skip)
        assert alpha.shape == (1, 1, 4, 4, 4)
        assert np.all((alpha.values > 0) & (alpha.values < 1))
        assert gate(gating, skip).shape == skip.shape

    def test_state_dict_mismatch(self, rng):
        block = ConvBlock(2, 3, rng)
        state = block.state_dict()
        del state["norm.beta"]
        with pytest.raises(KeyError):
            block.load_state_dict(state)
        state = ConvBlock(2, 4, rng).state_dict()
        with pytest.raises(ValueError):
            block.load_state_dict(state)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        param = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        before = param.values.copy()
        state = AdamState.for_params([param], lr=0.01)
        adam_step([param], [np.array([3.0, -0.2, 1e-3])], state)
        assert np.allclose(param.values - before, [-0.01, 0.01, -0.01], atol=1e-6)
        assert state.t == 1

    def test_minimizes_quadratic(self):
        param = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        state = AdamState.for_params([param], lr=0.1)
        for _ in range(500):
            adam_step([param], [2.0 * param.values], state)
        assert np.allclose(param.values, 0.0, atol=0.05)

    def test_zero_gradient_keeps_parameters(self):
        start = np.array([0.5, -1.25, 3.0])
        param = Tensor(start.copy(), requires_grad=True)
        state = AdamState.for_params([param], lr=0.1)
        for _ in range(3):
            adam_step([param], [np.zeros(3)], state)
        assert np.array_equal(param.values, start)
        assert state.t == 3

    def test_mismatched_lists(self):
        param = Tensor(np.zeros(2), requires_grad=True)
        state = AdamState.for_params([param], lr=0.1)
        with pytest.raises(ValueError):
            adam_step([param], [], state)
        with pytest.raises(ValueError):
            adam_step([param], [np.zeros(3)], state)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        block = ConvBlock(2, 3, rng)
        config = {"channels": [2, 3], "v_max": 101.5}
        path = save_checkpoint(tmp_path / "model.unw", block.state_dict(), config)
        loaded_config, state = load_checkpoint(path)
        assert loaded_config == config
        assert list(state) == list(block.state_dict())
        for name, values in block.state_dict().items():
            assert state[name].dtype == np.float32
            assert np.array_equal(state[name], values.astype(np.float32))

        fresh = ConvBlock(2, 3, np.random.default_rng(99))
        fresh.load_state_dict(state)
        assert np.array_equal(fresh.conv.weight.values, block.conv.weight.values)

    def test_bad_magic(self):
        data = encode_checkpoint({"w": np.zeros(2)}, {})
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + data[4:])

    def test_truncated_blob(self):
        data = encode_checkpoint({"w": np.zeros(4)}, {})
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.unw")
