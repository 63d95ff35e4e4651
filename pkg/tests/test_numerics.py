"""
Tests for the tensor core: primitives, shape checks and reverse-mode gradients.
"""

import numpy as np
import pytest

import numerics as nx
from numerics import BatchNormState, ComputationRecord, NonFiniteError, ShapeError, Tensor


def numeric_gradient(fn, tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(tensor.values)
    for index in np.ndindex(tensor.shape):
        original = tensor.values[index]
        tensor.values[index] = original + step
        plus = fn().item()
        tensor.values[index] = original - step
        minus = fn().item()
        tensor.values[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def gradients_agree(analytic: np.ndarray, numeric: np.ndarray, tolerance: float) -> bool:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return bool(np.linalg.norm(analytic - numeric) <= tolerance * scale + 1e-8)


def check_gradients(fn, tensors: list[Tensor], tolerance: float = 1e-4):
    out = fn()
    nx.backward(ComputationRecord.trace(out), out, tensors)
    analytic = [t.grad.copy() for t in tensors]
    for tensor, grad in zip(tensors, analytic):
        assert gradients_agree(grad, numeric_gradient(fn, tensor), tolerance), tensor.name


class TestTensor:
    """Tests for the Tensor container."""

    def test_integer_input_becomes_float64(self):
        """Integer arrays are stored as 64-bit floats."""
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_float32_is_preserved(self):
        """32-bit inputs stay 32-bit."""
        assert Tensor(np.ones(3, dtype=np.float32)).dtype == np.float32

    def test_item_rejects_non_scalar(self):
        """item() needs exactly one value."""
        with pytest.raises(ShapeError):
            Tensor(np.ones(2)).item()

    def test_operators_route_through_primitives(self):
        """Arithmetic operators produce recorded nodes."""
        a = Tensor([1.0, 2.0], requires_grad=True)
        out = (a * 2.0 + 1.0 - a) / 2.0
        np.testing.assert_allclose(out.values, [1.0, 1.5])
        assert ComputationRecord.trace(out).ops() == ["mul", "add", "sub", "div"]


class TestMatmul:
    """Tests for matmul."""

    def test_identity(self):
        """Multiplying by the identity returns the input."""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(a, np.eye(2)).values, [[1, 2], [3, 4]])

    def test_hand_evaluated_product(self):
        """[[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]."""
        out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.values, [[19, 22], [43, 50]])

    def test_zeros(self):
        """A zero left operand gives a zero product."""
        out = nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(6.0).reshape(3, 2)))
        np.testing.assert_array_equal(out.values, np.zeros((2, 2)))

    def test_mismatch_reports_both_shapes(self):
        """Inner extent mismatch is rejected naming both shapes."""
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_gradient_of_sum_is_column_sums(self):
        """d sum(A @ B) / dA has every row equal to B's row sums."""
        a = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        b = Tensor(np.random.default_rng(1).standard_normal((4, 2)), requires_grad=True)
        out = nx.sum_all(nx.matmul(a, b))
        out.backward([a, b])
        expected = np.broadcast_to(b.values.sum(axis=1), (3, 4))
        np.testing.assert_allclose(a.grad, expected)

    def test_cost_counts_multiply_adds(self):
        """A [2x3] @ [3x4] product costs 24 multiply-adds."""
        out = nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        assert out.node.cost == 24


class TestSoftmax:
    """Tests for softmax."""

    def test_symmetric_pair(self):
        """[0, 0] -> [0.5, 0.5]."""
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).values, [0.5, 0.5])

    def test_known_values(self):
        """[1, 2, 3] -> [0.0900, 0.2447, 0.6652]."""
        np.testing.assert_allclose(nx.softmax(Tensor([1.0, 2.0, 3.0])).values, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_shift_invariance(self):
        """Adding a constant along the axis does not change the output."""
        x = np.random.default_rng(2).standard_normal((4, 5))
        shifted = x + np.random.default_rng(3).standard_normal((4, 1)) * 100
        np.testing.assert_allclose(nx.softmax(Tensor(x)).values, nx.softmax(Tensor(shifted)).values, atol=1e-9)

    def test_rows_sum_to_one(self):
        """Every row sums to 1 within 1e-9."""
        out = nx.softmax(Tensor(np.random.default_rng(4).standard_normal((6, 7)) * 10), axis=-1)
        np.testing.assert_allclose(out.values.sum(axis=-1), np.ones(6), atol=1e-9)

    def test_rejects_non_finite(self):
        """NaN or inf input is rejected."""
        with pytest.raises(NonFiniteError):
            nx.softmax(Tensor([0.0, np.inf]))

    def test_masked_entries_get_exact_zero(self):
        """Masked positions receive exactly 0 and the rest renormalise."""
        out = nx.softmax(Tensor([1.0, 5.0, 1.0]), mask=np.array([True, False, True]))
        assert out.values[1] == 0.0
        np.testing.assert_allclose(out.values, [0.5, 0.0, 0.5])

    def test_fully_masked_row_is_rejected(self):
        """A row with every position masked is an error."""
        with pytest.raises(ValueError):
            nx.softmax(Tensor([1.0, 2.0]), mask=np.array([False, False]))


class TestLayerNorm:
    """Tests for layer_norm."""

    def test_constant_row_maps_to_bias(self):
        """[5,5,5] normalises to zeros."""
        out = nx.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.values, np.zeros((1, 3)))

    def test_two_values(self):
        """[1,3] with epsilon -> 0 gives [-1, 1]."""
        out = nx.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), epsilon=1e-12)
        np.testing.assert_allclose(out.values, [[-1.0, 1.0]], atol=1e-9)

    def test_affine(self):
        """Gain and bias apply as g * z + b."""
        x = Tensor([[1.0, 3.0]])
        z = nx.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2))).values
        out = nx.layer_norm(x, Tensor([2.0, 3.0]), Tensor([0.5, -1.0])).values
        np.testing.assert_allclose(out, z * [2.0, 3.0] + [0.5, -1.0])

    def test_rows_are_standardised(self):
        """Non-constant rows have mean ~0 and variance ~1."""
        x = np.random.default_rng(5).standard_normal((8, 16)) * 3 + 2
        out = nx.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).values
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
        np.testing.assert_allclose(out.var(axis=-1), np.ones(8), atol=1e-5)

    def test_gain_shape_checked(self):
        """Gain must match the normalised extent."""
        with pytest.raises(ShapeError):
            nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestBatchNorm:
    """Tests for batch_norm_1d."""

    def test_train_mode_standardises_columns(self):
        """Column [1, 3] maps to [-1, 1] with epsilon -> 0."""
        state = BatchNormState.fresh(1)
        out = nx.batch_norm_1d(Tensor([[1.0], [3.0]]), Tensor([1.0]), Tensor([0.0]), state, "train", epsilon=1e-12)
        np.testing.assert_allclose(out.values, [[-1.0], [1.0]], atol=1e-9)

    def test_train_mode_updates_running_statistics(self):
        """Running stats move by momentum towards the batch stats."""
        state = BatchNormState.fresh(1)
        nx.batch_norm_1d(Tensor([[1.0], [3.0]]), Tensor([1.0]), Tensor([0.0]), state, "train", momentum=0.1)
        np.testing.assert_allclose(state.running_mean, [0.2])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 1.0])
        assert state.updates == 1

    def test_infer_with_unit_statistics_is_identity(self):
        """Running mean 0 / var 1 leave inputs unchanged (up to epsilon)."""
        state = BatchNormState(np.zeros(2), np.ones(2), updates=1)
        x = np.array([[0.5, -2.0], [3.0, 1.0]])
        out = nx.batch_norm_1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "infer", epsilon=0.0)
        np.testing.assert_allclose(out.values, x)

    def test_constant_column_gives_zeros(self):
        """Zero-variance columns normalise to zero."""
        state = BatchNormState.fresh(1)
        out = nx.batch_norm_1d(Tensor([[4.0], [4.0], [4.0]]), Tensor([1.0]), Tensor([0.0]), state, "train")
        np.testing.assert_allclose(out.values, np.zeros((3, 1)))

    def test_single_row_rejected_in_train_mode(self):
        """A batch of one has no variance to normalise by."""
        with pytest.raises(ValueError):
            nx.batch_norm_1d(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState.fresh(2), "train")

    def test_infer_before_training_rejected(self):
        """Uninitialised running statistics cannot be used for inference."""
        with pytest.raises(ValueError, match="uninitialized"):
            nx.batch_norm_1d(Tensor(np.ones((2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState.fresh(2), "infer")


class TestActivation:
    """Tests for activation kinds."""

    def test_relu(self):
        """relu(-2) = 0 and relu(3) = 3."""
        np.testing.assert_array_equal(nx.activation(Tensor([-2.0, 3.0]), "relu").values, [0.0, 3.0])

    def test_gelu_at_zero(self):
        """gelu(0) = 0."""
        assert nx.activation(Tensor([0.0]), "gelu").values[0] == 0.0

    def test_gelu_at_one(self):
        """gelu(1) = Phi(1) = 0.8413."""
        assert nx.activation(Tensor([1.0]), "gelu").values[0] == pytest.approx(0.8413, abs=1e-4)

    def test_mse_identity_passthrough(self):
        """mse-identity returns its input untouched."""
        x = Tensor([1.5, -2.0])
        assert nx.activation(x, "mse-identity") is x

    def test_unknown_kind(self):
        """Unknown activation kinds are rejected."""
        with pytest.raises(ValueError):
            nx.activation(Tensor([1.0]), "swish")


class TestBackward:
    """Tests for reverse-mode differentiation."""

    def test_square(self):
        """d(x^2)/dx at 3 is 6."""
        x = Tensor([3.0], requires_grad=True)
        out = nx.sum_all(nx.mul(x, x))
        out.backward([x])
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_seed_rejected(self):
        """Backward needs a scalar output."""
        x = Tensor(np.ones(3), requires_grad=True)
        out = nx.mul(x, 2.0)
        with pytest.raises(ShapeError):
            nx.backward(ComputationRecord.trace(out), out)

    def test_unreached_parameter_gets_zero(self):
        """Listed parameters the output ignores get zero gradients."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        out = nx.sum_all(x)
        grads = out.backward([x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))

    def test_shared_input_accumulates(self):
        """A tensor used twice gets the sum of both paths."""
        x = Tensor([2.0], requires_grad=True)
        out = nx.sum_all(nx.add(nx.mul(x, 3.0), nx.mul(x, x)))
        out.backward([x])
        np.testing.assert_allclose(x.grad, [3.0 + 4.0])

    def test_record_is_topological(self):
        """Every node's recorded inputs appear before it."""
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        out = nx.sum_all(nx.relu(nx.matmul(nx.add(a, 1.0), a)))
        record = ComputationRecord.trace(out)
        seen = set()
        for tensor in record.nodes:
            for parent in tensor.node.inputs:
                if parent.node is not None:
                    assert id(parent) in seen
            seen.add(id(tensor))

    def test_forward_is_deterministic(self):
        """Identical inputs give bitwise-identical outputs."""
        x = np.random.default_rng(9).standard_normal((3, 4))
        w = np.random.default_rng(10).standard_normal((4, 4))
        first = nx.gelu(nx.matmul(Tensor(x), Tensor(w))).values
        second = nx.gelu(nx.matmul(Tensor(x), Tensor(w))).values
        assert np.array_equal(first, second)


class TestPrimitiveGradients:
    """Finite-difference checks for every differentiable primitive."""

    rng = np.random.default_rng(11)

    def param(self, *shape, positive=False):
        values = self.rng.standard_normal(shape)
        if positive:
            values = np.abs(values) + 0.5
        return Tensor(values, requires_grad=True, name=f"p{shape}")

    def test_elementwise(self):
        """Add, sub, mul and div match finite differences."""
        a, b = self.param(3, 4), self.param(4, positive=True)
        check_gradients(lambda: nx.sum_all(nx.div(nx.mul(nx.sub(nx.add(a, b), 1.0), a), b)), [a, b])

    def test_power_log_exp(self):
        """Power, log and exp match finite differences."""
        a = self.param(5, positive=True)
        check_gradients(lambda: nx.sum_all(nx.add(nx.log(nx.power(a, 1.5)), nx.exp(nx.mul(a, 0.3)))), [a])

    def test_matmul_batched(self):
        """Batched matmul matches finite differences."""
        a, b = self.param(2, 3, 4), self.param(4, 5)
        check_gradients(lambda: nx.sum_all(nx.mul(nx.matmul(a, b), nx.matmul(a, b))), [a, b])

    def test_shape_ops(self):
        """Transpose and reshape route gradients back to their source."""
        a = self.param(2, 3, 4)
        weights = self.rng.standard_normal((4, 3, 2))
        check_gradients(
            lambda: nx.sum_all(nx.mul(nx.reshape(nx.transpose(a, (2, 1, 0)), (4, 3, 2)), weights)), [a]
        )

    def test_take_and_sum_axis(self):
        """Repeated indices accumulate gradient."""
        a = self.param(4, 3)
        index = (np.array([0, 2, 2, 3]), np.array([1, 0, 0, 2]))
        check_gradients(lambda: nx.sum_all(nx.mul(nx.take(a, index), nx.sum_axis(a, 0)[np.array([0, 1, 2, 0])])), [a])

    def test_softmax(self):
        """Masked softmax matches finite differences."""
        a = self.param(3, 5)
        weights = self.rng.standard_normal((3, 5))
        mask = np.array([True, True, False, True, True])
        check_gradients(lambda: nx.sum_all(nx.mul(nx.softmax(a, axis=-1, mask=mask), weights)), [a])

    def test_layer_norm(self):
        """Layer norm matches finite differences for input, gain and bias."""
        a, gain, bias = self.param(4, 6), self.param(6), self.param(6)
        weights = self.rng.standard_normal((4, 6))
        check_gradients(lambda: nx.sum_all(nx.mul(nx.layer_norm(a, gain, bias), weights)), [a, gain, bias])

    def test_batch_norm_train(self):
        """Train-mode batch norm differentiates through the batch statistics."""
        a, gain, bias = self.param(5, 3), self.param(3), self.param(3)
        weights = self.rng.standard_normal((5, 3))
        state = BatchNormState.fresh(3)
        check_gradients(
            lambda: nx.sum_all(nx.mul(nx.batch_norm_1d(a, gain, bias, state, "train"), weights)), [a, gain, bias]
        )

    def test_batch_norm_infer(self):
        """Infer-mode batch norm matches finite differences."""
        a, gain, bias = self.param(5, 3), self.param(3), self.param(3)
        state = BatchNormState(self.rng.standard_normal(3), np.abs(self.rng.standard_normal(3)) + 0.5, 1)
        weights = self.rng.standard_normal((5, 3))
        check_gradients(
            lambda: nx.sum_all(nx.mul(nx.batch_norm_1d(a, gain, bias, state, "infer"), weights)), [a, gain, bias]
        )

    def test_gelu_and_relu(self):
        """GELU and ReLU match finite differences away from 0."""
        a = Tensor(np.array([-1.7, -0.4, 0.3, 0.9, 2.2]), requires_grad=True, name="a")
        check_gradients(lambda: nx.sum_all(nx.add(nx.gelu(a), nx.mul(nx.relu(a), a))), [a])

    def test_clip_inside(self):
        """Clip passes gradient through inside its bounds."""
        a = Tensor(np.array([0.2, 0.5, 0.7]), requires_grad=True, name="a")
        check_gradients(lambda: nx.sum_all(nx.log(nx.clip(a, 1e-7, 1 - 1e-7))), [a])


class TestDropout:
    """Tests for inverted dropout."""

    def test_identity_without_generator(self):
        """No generator means no dropout."""
        x = Tensor(np.ones(4))
        assert nx.dropout(x, 0.5, None) is x

    def test_kept_values_are_rescaled(self):
        """Surviving entries are scaled by 1 / (1 - rate)."""
        out = nx.dropout(Tensor(np.ones(1000)), 0.25, np.random.default_rng(0)).values
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert 0.65 < np.mean(out > 0) < 0.85
