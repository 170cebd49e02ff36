import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mscon import autodiff as ad
from mscon.autodiff import Tape, Tensor, backward, grad_check
from mscon.errors import ContractViolation, DegenerateInputError

from oracles import central_difference


def grads_of(fn, *values):
    leaves = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        out = fn(*leaves)
        backward(tape, out)
    return [leaf.grad for leaf in leaves]


class TestForwardExamples:
    def test_log_sum_exp_is_overflow_free(self):
        out = ad.log_sum_exp(np.array([1000.0, 1000.0])).item()
        assert out == pytest.approx(1000.0 + math.log(2.0), abs=1e-10)

    def test_row_normalize_345(self):
        np.testing.assert_allclose(ad.row_normalize(np.array([[3.0, 4.0]])).values, [[0.6, 0.8]])

    def test_row_normalize_zero_row_raises(self):
        with pytest.raises(DegenerateInputError):
            ad.row_normalize(np.array([[0.0, 0.0]]))

    def test_row_normalize_tiny_row_raises(self):
        with pytest.raises(DegenerateInputError):
            ad.row_normalize(np.array([[1.0, 1.0], [1e-13, 0.0]]))

    def test_masked_log_sum_exp_ignores_masked(self):
        x = np.array([[1.0, 50.0, 2.0]])
        mask = np.array([[True, False, True]])
        out = ad.log_sum_exp(x, axis=1, mask=mask).values
        assert out[0] == pytest.approx(math.log(math.e + math.e**2))

    def test_masked_log_sum_exp_empty_row_raises(self):
        with pytest.raises(DegenerateInputError):
            ad.log_sum_exp(np.ones((2, 2)), axis=1, mask=np.array([[True, False], [False, False]]))

    @pytest.mark.parametrize(
        "kind,args",
        [
            ("add", (np.ones((2, 3)), np.ones((3, 2)))),
            ("matmul", (np.ones((2, 3)), np.ones((2, 3)))),
            ("elementwise_mul", (np.ones((2, 3)), np.ones(2))),
            ("concat_rows", ([np.ones((2, 3)), np.ones((2, 2))],)),
        ],
    )
    def test_shape_mismatch_is_contract_violation(self, kind, args):
        with pytest.raises(ContractViolation):
            ad.forward_op(kind, *args)

    def test_log_of_nonpositive_is_contract_violation(self):
        with pytest.raises(ContractViolation):
            ad.log(np.array([1.0, 0.0]))

    def test_unknown_kind(self):
        with pytest.raises(ContractViolation):
            ad.forward_op("softplus", np.ones(2))

    def test_all_forward_kinds_dispatch(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert set(ad.FORWARD_OPS) == {
            "add", "sub", "scalar_mul", "elementwise_mul", "matmul", "relu", "exp", "log",
            "row_normalize", "log_sum_exp", "masked_sum", "reduce_sum", "reduce_mean",
            "transpose", "concat_rows",
        }
        np.testing.assert_allclose(ad.forward_op("transpose", x).values, x.T)
        np.testing.assert_allclose(ad.forward_op("reduce_mean", x).values, 2.5)
        np.testing.assert_allclose(ad.forward_op("concat_rows", [x, x]).values, np.vstack([x, x]))

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.exp(x)
        assert y.is_leaf and not y.requires_grad


class TestBackwardExamples:
    def test_product_rule(self):
        ga, gb = grads_of(lambda a, b: a * b, 2.0, 3.0)
        assert ga == 3.0 and gb == 2.0

    def test_relu_gate(self):
        (g,) = grads_of(lambda x: ad.masked_sum(ad.relu(x), np.ones(2)), np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_row_normalize_vjp(self):
        (g,) = grads_of(lambda x: ad.masked_sum(ad.row_normalize(x), np.array([1.0, 0.0])), np.array([3.0, 4.0]))
        # frozen against central differences (step 1e-5) of x -> x0 / |x|
        f = lambda x: x[0] / math.hypot(*x)
        fd = central_difference(f, [3.0, 4.0])
        np.testing.assert_allclose(fd, [0.128, -0.096], atol=1e-9)
        np.testing.assert_allclose(g, [0.128, -0.096], atol=1e-12)

    def test_fan_out_accumulates_exactly(self):
        (g,) = grads_of(lambda x: x + x, 1.7)
        assert g == 2.0

    def test_backward_requires_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.exp(x)
            with pytest.raises(ContractViolation):
                backward(tape, y)

    def test_broadcast_bias_grad_sums_rows(self):
        _, gb = grads_of(lambda x, b: ad.reduce_sum(x + b), np.ones((4, 3)), np.zeros(3))
        np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.reduce_sum(ad.exp(ad.matmul(x, x)))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
            seen.add(id(node.output))
        assert tape.nodes[-1].output is y


class TestGradCheck:
    def test_quadratic(self):
        err = grad_check(lambda x: ad.reduce_sum(x * x), np.array([3.0]))
        assert err < 1e-8

    def test_log_sum_exp_softmax(self):
        (g,) = grads_of(lambda x: ad.log_sum_exp(x), np.array([0.0, 0.0]))
        np.testing.assert_allclose(g, [0.5, 0.5])
        assert grad_check(lambda x: ad.log_sum_exp(x), np.zeros(2)) < 1e-8

    def test_step_range(self):
        with pytest.raises(ContractViolation):
            grad_check(lambda x: ad.reduce_sum(x), np.ones(2), step=1e-2)

    def test_nonfinite_perturbation_raises(self):
        # exp overflows just above 709.7827
        with np.errstate(over="ignore"), pytest.raises(DegenerateInputError):
            grad_check(lambda x: ad.reduce_sum(ad.exp(x)), np.array([709.782]), step=1e-3)

    def test_detects_wrong_gradient(self):
        def bad_square(x):
            t = ad._record("bad", (x,), x.values**2, lambda g: (g * x.values,))  # missing factor 2
            return ad.reduce_sum(t)

        assert grad_check(bad_square, np.array([1.0, 2.0])) > 0.1


PRIMITIVES = {
    "add": lambda x, c: ad.add(x, c),
    "sub": lambda x, c: ad.sub(c, x),
    "scalar_mul": lambda x, c: ad.scalar_mul(x, -1.7),
    "elementwise_mul": lambda x, c: ad.mul(x, x),
    "matmul": lambda x, c: ad.matmul(x, ad.transpose(x)),
    "relu": lambda x, c: ad.relu(x),
    "exp": lambda x, c: ad.exp(x),
    "log": lambda x, c: ad.log(ad.exp(x) + 0.5),
    "row_normalize": lambda x, c: ad.row_normalize(x),
    "log_sum_exp": lambda x, c: ad.log_sum_exp(x, axis=1),
    "log_sum_exp_masked": lambda x, c: ad.log_sum_exp(x, axis=1, mask=c > 0),
    "masked_sum": lambda x, c: ad.masked_sum(x, c, axis=0),
    "reduce_sum": lambda x, c: ad.reduce_sum(x, axis=1),
    "reduce_mean": lambda x, c: ad.reduce_mean(x, axis=0),
    "transpose": lambda x, c: ad.transpose(x),
    "concat_rows": lambda x, c: ad.concat_rows([x, ad.exp(x)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_every_primitive_passes_grad_check_at_10_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        x0 = rng.normal(size=(3, 4))
        # keep relu away from its kink
        x0 = np.where(np.abs(x0) < 1e-3, 0.5, x0)
        c = rng.normal(size=(3, 4))
        c[:, 0] = 1.0
        weights = rng.normal(size=PRIMITIVES[name](Tensor(x0), c).shape)
        err = grad_check(lambda x: ad.masked_sum(PRIMITIVES[name](x, c), weights), x0)
        assert err < 1e-5, (name, err)


@settings(max_examples=50, deadline=None)
@given(
    x=arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
    c=st.floats(-1e3, 1e3),
)
def test_log_sum_exp_shift_equivariance(x, c):
    a = ad.log_sum_exp(x + c).item()
    b = ad.log_sum_exp(x).item() + c
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-6)
))
def test_row_normalize_unit_norm(x):
    v = ad.row_normalize(x).values
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9)


def test_determinism_forward_and_backward():
    rng = np.random.default_rng(7)
    x0, w0 = rng.normal(size=(6, 4)), rng.normal(size=(4, 3))

    def run():
        g = grads_of(lambda x, w: ad.log_sum_exp(ad.reduce_sum(ad.row_normalize(ad.matmul(x, w)), axis=1)), x0, w0)
        return [a.tobytes() for a in g]

    assert run() == run()
