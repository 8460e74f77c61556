import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from looc.errors import ContractViolation, DimensionError, DomainError
from looc.tensor import (
    Tensor,
    add,
    backward,
    entropy,
    log,
    matmul,
    mean,
    mul,
    pick,
    relu,
    scale,
    softmax_temp,
    take_cols,
    total,
)
from oracles import entropy_direct, numerical_grad, rel_err, softmax_direct


def tape_grad(f, x):
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    f(xt).backward()
    return xt.grad


def check_grad(f, x, tol=1e-5):
    """Tape gradient of scalar f vs central differences."""
    analytic = tape_grad(f, x)
    numeric = numerical_grad(lambda v: f(Tensor(v)).item(), x)
    assert rel_err(analytic, numeric) < tol


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 3.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_values(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        check_grad(lambda t: total(matmul(t, Tensor(b))), a, 1e-6)
        check_grad(lambda t: total(matmul(Tensor(a), t)), b, 1e-6)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_negative_input_blocks_gradient(self):
        g = tape_grad(lambda t: total(relu(t)), -np.arange(1.0, 5.0))
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_subgradient_at_zero(self):
        np.testing.assert_array_equal(tape_grad(lambda t: total(relu(t)), [0.0]), [0.0])

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 1e-3] = 0.5
        check_grad(lambda t: total(mul(relu(t), Tensor(x))), x, 1e-6)


class TestSoftmax:
    def test_symmetric(self):
        for t in (0.1, 1.0, 50.0):
            np.testing.assert_allclose(softmax_temp(Tensor([[0.0, 0.0]]), t).data, [[0.5, 0.5]])

    def test_high_temperature_flattens(self):
        p = softmax_temp(Tensor([[10.0, 0.0]]), 1000.0).data
        assert np.all(np.abs(p - 0.5) < 0.01)

    def test_direct_formula(self):
        p = softmax_temp(Tensor([[2.0, 1.0, 0.0]]), 1.0).data
        ref = softmax_direct([2.0, 1.0, 0.0])
        assert np.max(np.abs(p[0] - ref) / ref) < 1e-12

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_temperature(self, t):
        with pytest.raises(DomainError):
            softmax_temp(Tensor([[1.0, 2.0]]), t)

    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-1e4, 1e4)),
        st.floats(0.01, 5000.0),
    )
    def test_rows_sum_to_one(self, z, t):
        p = softmax_temp(Tensor(z), t).data
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)

    @given(
        arrays(np.float64, (2, 5), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
        st.floats(0.1, 1000.0),
    )
    def test_shift_invariance(self, z, c, t):
        a = softmax_temp(Tensor(z), t).data
        b = softmax_temp(Tensor(z + c), t).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


class TestEntropy:
    def test_one_hot(self):
        assert entropy(Tensor([[0.0, 1.0, 0.0]])).data[0] == 0.0

    def test_uniform(self):
        assert entropy(Tensor([[0.25] * 4])).data[0] == pytest.approx(np.log(4), abs=1e-12)

    def test_hand_value(self):
        h = entropy(Tensor([[0.7, 0.2, 0.1]])).data[0]
        assert h == pytest.approx(0.801819, abs=1e-6)
        assert h == pytest.approx(entropy_direct([0.7, 0.2, 0.1]), rel=1e-12)

    def test_rejects_unnormalised(self):
        with pytest.raises(ContractViolation):
            entropy(Tensor([[0.5, 0.6]]))

    def test_zero_entries_have_zero_gradient(self):
        g = tape_grad(lambda t: total(entropy(t)), [[0.0, 0.5, 0.5]])
        assert g[0, 0] == 0.0 and np.isfinite(g).all()

    @given(arrays(np.float64, (4, 6), elements=st.floats(0, 1)))
    def test_bounded(self, raw):
        raw = raw + 1e-3
        p = raw / raw.sum(axis=1, keepdims=True)
        h = entropy(Tensor(p)).data
        assert np.all(h >= -1e-15) and np.all(h <= np.log(6) + 1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        np.testing.assert_array_equal(tape_grad(total, np.zeros((2, 3, 4))), np.ones((2, 3, 4)))

    def test_mean_relu_affine(self):
        rng = np.random.default_rng(2)
        w, x = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        check_grad(lambda t: mean(relu(matmul(t, Tensor(x)))), w)
        check_grad(lambda t: mean(relu(matmul(Tensor(w), t))), x)

    def test_second_call_doubles(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        loss = total(mul(x, x))
        loss.backward()
        once = x.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * once)

    def test_non_scalar_loss(self):
        with pytest.raises(ContractViolation):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_constants_get_no_grad(self):
        c = Tensor(np.ones(2))
        x = Tensor(np.ones(2), requires_grad=True)
        total(mul(x, c)).backward()
        assert c.grad is None and x.grad is not None

    def test_broadcast_add_gradient(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        check_grad(lambda t: total(mul(add(Tensor(a), t), add(Tensor(a), t))), b)

    def test_pick_and_take_cols(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 2))
        check_grad(lambda t: total(pick(t, [0, 4, 2, 2])), x)
        check_grad(lambda t: total(mul(take_cols(t, [1, 3]), Tensor(w))), x)

    def test_pick_shape_error(self):
        with pytest.raises(DimensionError):
            pick(Tensor(np.ones((2, 3))), [0])

    def test_operators(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 2))
        check_grad(lambda t: total((t * 3.0 - t * t + 1.0) @ Tensor(x)), x)
        check_grad(lambda t: total(scale(log(mul(t, t)), -0.5)), x + 3.0)

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        total(y).backward()
        assert x.grad[0] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 100.0))
def test_softmax_entropy_chain_gradient(seed, t):
    z = np.random.default_rng(seed).normal(size=(3, 4)) * 2
    check_grad(lambda v: mean(entropy(softmax_temp(v, t))), z)
