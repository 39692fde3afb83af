"""Finite-difference oracle behavior and per-primitive gradient soundness."""

import numpy as np
import pytest

from iaunet import tensor as T
from iaunet.gradcheck import finite_diff_check, numerical_gradient
from iaunet.tensor import BatchNormStats, Tensor


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestFiniteDiffCheck:
    def test_quadratic_form_is_near_exact(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 4))
        q = Tensor(a @ a.T + 4 * np.eye(4))

        def fn(x):
            col = T.reshape(x, (4, 1))
            return T.sum_(T.mul(col, T.matmul(q, col)))

        x = _rand(rng, 4)
        assert finite_diff_check(fn, x, h=1e-5) < 1e-8

    def test_sigmoid_chain(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.standard_normal((5, 3)))

        def fn(x):
            return T.sum_(T.sigmoid(T.matmul(x, w)))

        assert finite_diff_check(fn, _rand(rng, (2, 5)), h=1e-6) < 1e-4

    def test_rejects_nonpositive_step(self):
        from iaunet.errors import ContractViolation
        with pytest.raises(ContractViolation):
            numerical_gradient(lambda x: T.sum_(x), Tensor(np.ones(2)), h=0.0)

    def test_numerical_side_matches_analytic_linear(self):
        w = np.array([2.0, -3.0, 0.5])

        def fn(x):
            return T.sum_(T.mul(x, Tensor(w)))

        g = numerical_gradient(fn, Tensor(np.zeros(3), requires_grad=True))
        np.testing.assert_allclose(g, w, atol=1e-8)


# Every differentiable primitive, finite-difference-checked on random
# float64 inputs. Trial counts here plus the acceptance sweep cover the
# soundness property.
PRIMITIVES = {
    "add": lambda x, c: T.sum_(T.sigmoid(T.add(x, c[0]))),
    "sub": lambda x, c: T.sum_(T.sigmoid(T.sub(c[0], x))),
    "mul": lambda x, c: T.sum_(T.sigmoid(T.mul(x, c[0]))),
    "div": lambda x, c: T.sum_(T.div(x, T.add(T.mul(c[0], c[0]), Tensor(np.float64(1.0))))),
    "div_denominator": lambda x, c: T.sum_(T.div(c[0], T.add(T.exp(x), Tensor(np.float64(0.5))))),
    "neg": lambda x, c: T.sum_(T.mul(T.neg(x), c[0])),
    "absolute": lambda x, c: T.sum_(T.mul(T.absolute(x), c[0])),
    "exp": lambda x, c: T.sum_(T.mul(T.exp(x), c[0])),
    "log": lambda x, c: T.sum_(T.mul(T.log(T.add(T.mul(x, x), Tensor(np.float64(0.7)))), c[0])),
    "sqrt": lambda x, c: T.sum_(T.sqrt(T.add(T.mul(x, x), Tensor(np.float64(0.3))))),
    "relu": lambda x, c: T.sum_(T.mul(T.relu(x), c[0])),
    "sigmoid": lambda x, c: T.sum_(T.mul(T.sigmoid(x), c[0])),
    "clip": lambda x, c: T.sum_(T.mul(T.clip(x, -0.8, 0.8), c[0])),
    "reshape": lambda x, c: T.sum_(T.mul(T.reshape(x, (6, 4)), T.reshape(c[0], (6, 4)))),
    "transpose": lambda x, c: T.sum_(T.mul(T.transpose(x, (1, 0)), T.transpose(c[0], (1, 0)))),
    "broadcast": lambda x, c: T.sum_(T.mul(T.broadcast_to(T.reshape(x, (4, 6, 1)), (4, 6, 5)), c[1])),
    "concat": lambda x, c: T.sum_(T.sigmoid(T.concat([x, c[0]], axis=1))),
    "sum_axis": lambda x, c: T.sum_(T.sigmoid(T.sum_(x, axis=0))),
    "mean_axis": lambda x, c: T.sum_(T.sigmoid(T.mean_(x, axis=1, keepdims=True))),
    "max": lambda x, c: T.sum_(T.mul(T.max_(x, axis=1), c[2])),
    "min": lambda x, c: T.sum_(T.mul(T.min_(x, axis=0), c[3])),
    "softmax": lambda x, c: T.sum_(T.mul(T.softmax(x, axis=1), c[0])),
    "gap": lambda x, c: T.sum_(T.sigmoid(T.global_average_pool(T.reshape(x, (2, 3, 4, 1))))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(3):
        x = _rand(rng, (4, 6))
        consts = (
            Tensor(rng.standard_normal((4, 6))),
            Tensor(rng.standard_normal((4, 6, 5))),
            Tensor(rng.standard_normal(4)),
            Tensor(rng.standard_normal(6)),
        )
        err = finite_diff_check(lambda t: PRIMITIVES[name](t, consts), x, h=1e-6)
        assert err < 1e-4, f"{name} trial {trial}: {err}"


class TestStructuredOpGradients:
    def test_matmul_both_sides(self):
        rng = np.random.default_rng(20)
        b = _rand(rng, (4, 3))
        a = _rand(rng, (2, 4))
        assert finite_diff_check(
            lambda t: T.sum_(T.sigmoid(T.matmul(t, b))), a, 1e-6) < 1e-4
        assert finite_diff_check(
            lambda t: T.sum_(T.sigmoid(T.matmul(a, t))), b, 1e-6) < 1e-4

    def test_batched_matmul(self):
        rng = np.random.default_rng(21)
        b = _rand(rng, (3, 4, 2))
        a = _rand(rng, (3, 2, 4))
        assert finite_diff_check(
            lambda t: T.sum_(T.sigmoid(T.matmul(t, b))), a, 1e-6) < 1e-4
        assert finite_diff_check(
            lambda t: T.sum_(T.sigmoid(T.matmul(a, t))), b, 1e-6) < 1e-4

    def test_conv1x1_all_inputs(self):
        rng = np.random.default_rng(22)
        x = _rand(rng, (2, 3, 3, 4))
        w = _rand(rng, (4, 5))
        b = _rand(rng, 5)
        head = lambda y: T.sum_(T.sigmoid(y))
        assert finite_diff_check(lambda t: head(T.conv1x1(t, w, b)), x, 1e-6) < 1e-4
        assert finite_diff_check(lambda t: head(T.conv1x1(x, t, b)), w, 1e-6) < 1e-4
        assert finite_diff_check(lambda t: head(T.conv1x1(x, w, t)), b, 1e-6) < 1e-4

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv3x3_all_inputs(self, stride):
        rng = np.random.default_rng(23 + stride)
        x = _rand(rng, (2, 4, 4, 3))
        w = _rand(rng, (3, 3, 3, 4))
        b = _rand(rng, 4)
        head = lambda y: T.sum_(T.sigmoid(y))
        assert finite_diff_check(
            lambda t: head(T.conv3x3(t, w, b, stride)), x, 1e-6) < 1e-4
        assert finite_diff_check(
            lambda t: head(T.conv3x3(x, t, b, stride)), w, 1e-6) < 1e-4
        assert finite_diff_check(
            lambda t: head(T.conv3x3(x, w, t, stride)), b, 1e-6) < 1e-4

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm_all_inputs(self, training):
        rng = np.random.default_rng(25)
        x = _rand(rng, (6, 4))
        # gammas away from 0: a vanishing channel scale makes true
        # gradients smaller than finite-difference noise
        gamma = Tensor(rng.uniform(0.5, 1.5, 4) * rng.choice([-1, 1], 4),
                       requires_grad=True)
        beta = Tensor(rng.standard_normal(4), requires_grad=True)
        stats = BatchNormStats(4, dtype=np.float64)
        stats.mean[:] = rng.standard_normal(4)
        stats.var[:] = rng.uniform(0.5, 2.0, 4)
        head = lambda y: T.sum_(T.sigmoid(T.mul(y, Tensor(np.float64(0.3)))))

        def bn(xx, gg, bb):
            return head(T.batch_norm(xx, gg, bb, stats, training=training))

        assert finite_diff_check(lambda t: bn(t, gamma, beta), x, 1e-6) < 1e-4
        assert finite_diff_check(lambda t: bn(x, t, beta), gamma, 1e-6) < 1e-4
        assert finite_diff_check(lambda t: bn(x, gamma, t), beta, 1e-6) < 1e-4

    def test_masked_softmax(self):
        rng = np.random.default_rng(26)
        mask = rng.random((4, 6)) < 0.6
        mask[0] = False  # one fully inactive row
        c = Tensor(rng.standard_normal((4, 6)))
        x = _rand(rng, (4, 6))
        assert finite_diff_check(
            lambda t: T.sum_(T.mul(T.masked_softmax(t, mask), c)), x, 1e-6) < 1e-4
