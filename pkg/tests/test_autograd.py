"""Tape recording, backward sweep, and the finite-difference oracle."""

import numpy as np
import pytest

from fakedet import autograd as ag
from fakedet import ops
from fakedet.autograd import Parameter, Tape
from fakedet.errors import ConfigError, StateError


class TestBackwardBasics:
    def test_square_gradient(self):
        p = Parameter("x", np.array([3.0]))
        t = Tape()
        v = t.bind(p)
        table = ag.backward(ag.mul(v, v))
        np.testing.assert_allclose(table["x"], [6.0])

    def test_sigmoid_at_zero(self):
        t = Tape()
        out = ag.sigmoid(t.constant(np.zeros((1, 1))))
        assert out.value.item() == 0.5

    def test_chained_conv_relu_on_zeros(self):
        t = Tape()
        x = t.constant(np.zeros((1, 3, 3, 2), dtype=np.float32))
        w = t.bind(Parameter("w", np.ones((2, 4), dtype=np.float32)))
        out = ag.relu(ag.conv1x1(x, w))
        assert not out.value.any()

    def test_h_swish_gradient_interior(self):
        p = Parameter("x", np.array([1.0]))
        t = Tape()
        table = ag.backward(ag.h_swish(t.bind(p)))
        np.testing.assert_allclose(table["x"], [5.0 / 6.0], atol=1e-15)

    def test_all_frozen_gives_zero_grads(self):
        p = Parameter("w", np.ones((2, 2)), trainable=False)
        t = Tape()
        v = t.bind(p)
        table = ag.backward(ag.mul(v, v))
        assert not table["w"].any()
        assert not p.grad.any()

    def test_shared_parameter_grads_sum(self):
        p = Parameter("w", np.array([2.0]))
        t = Tape()
        a = t.bind(p)
        b = t.bind(p)  # same leaf
        assert a is b
        out = ag.add(ag.mul(a, a), a)  # w^2 + w -> d/dw = 2w + 1
        np.testing.assert_allclose(ag.backward(out)["w"], [5.0])

    def test_backward_twice_is_a_state_error(self):
        p = Parameter("x", np.array([1.0]))
        t = Tape()
        out = ag.mul(t.bind(p), t.bind(p))
        ag.backward(out)
        with pytest.raises(StateError):
            ag.backward(out)

    def test_backward_on_empty_tape(self):
        t = Tape()
        with pytest.raises(StateError):
            ag.backward(ag.Var(t, -1, np.zeros(1), False))

    def test_mixed_tapes_rejected(self):
        a = Tape().constant(np.zeros(1))
        b = Tape().constant(np.zeros(1))
        with pytest.raises(StateError):
            ag.add(a, b)

    def test_frozen_subgraph_is_pruned(self):
        frozen = Parameter("frozen", np.ones((2, 2)), trainable=False)
        live = Parameter("live", np.ones((2, 2)))
        t = Tape()
        out = ag.mul(t.bind(live), ag.mul(t.bind(frozen), t.bind(frozen)))
        table = ag.backward(out)
        assert not table["frozen"].any()
        np.testing.assert_allclose(table["live"], np.ones((2, 2)))


class TestBatchLinearity:
    def test_sum_gradient_splits_over_examples(self):
        # BN in inference mode keeps examples independent, so the gradient of
        # a summed output over a 2-batch equals the sum of 1-batch gradients.
        rng = np.random.default_rng(0)
        x1 = rng.standard_normal((1, 4, 4, 3))
        x2 = rng.standard_normal((1, 4, 4, 3))
        pw = Parameter("w", rng.standard_normal((3, 4)))
        gamma = Parameter("gamma", rng.standard_normal(4))
        beta = Parameter("beta", rng.standard_normal(4))

        def grads(batch):
            t = Tape()
            out = ag.batch_norm_infer(
                ag.conv1x1(t.constant(batch), t.bind(pw)),
                t.bind(gamma),
                t.bind(beta),
                np.zeros(4),
                np.ones(4),
                1e-3,
            )
            return ag.backward(ag.h_swish(out))

        joint = grads(np.concatenate([x1, x2]))
        solo = grads(x1)
        solo2 = grads(x2)
        for name in joint:
            np.testing.assert_allclose(joint[name], solo[name] + solo2[name], atol=1e-12)


class TestHswishBoundaries:
    def test_backward_picks_interior_branch(self):
        # at x = -3 and x = 3 the implemented gradient equals the one-sided
        # finite difference taken from inside the linear-interior region
        for x0, inward in [(-3.0, 1e-7), (3.0, -1e-7)]:
            p = Parameter("x", np.array([x0]))
            t = Tape()
            table = ag.backward(ag.h_swish(t.bind(p)))
            interior = (ops.h_swish(np.array([x0 + inward])) - ops.h_swish(np.array([x0]))) / inward
            exterior = (ops.h_swish(np.array([x0 - inward])) - ops.h_swish(np.array([x0]))) / -inward
            np.testing.assert_allclose(table["x"], interior, atol=1e-6)
            assert abs(table["x"][0] - exterior[0]) > 0.4  # the two branches differ


class TestFiniteDiff:
    def test_dense_layer_tight(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 1, 1, 4))
        pw = Parameter("w", rng.standard_normal((4, 2)))
        pb = Parameter("b", rng.standard_normal(2))

        def build():
            t = Tape()
            return ag.dense(t.constant(x), t.bind(pw), t.bind(pb))

        assert ag.finite_diff_check(build) <= 1e-6

    def test_zero_parameter_graph(self):
        x = np.ones((1, 2, 2, 1))
        assert ag.finite_diff_check(lambda: ag.relu(Tape().constant(x))) == 0.0

    def test_requires_float64(self):
        p = Parameter("w", np.ones((2, 2), dtype=np.float32))

        def build():
            t = Tape()
            v = t.bind(p)
            return ag.mul(v, v)

        with pytest.raises(ConfigError):
            ag.finite_diff_check(build)

    def test_corrupted_gradient_is_detected(self, monkeypatch):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 3, 4))
        pk = Parameter("k", rng.standard_normal((3, 3, 4)))
        original = ops.depthwise3x3_vjp

        def skewed(*args, **kwargs):
            dx, dk = original(*args, **kwargs)
            return dx, dk * 1.02

        monkeypatch.setattr(ops, "depthwise3x3_vjp", skewed)

        def build():
            t = Tape()
            return ag.depthwise3x3(t.constant(x), t.bind(pk))

        assert ag.finite_diff_check(build) > 1e-3


class TestBceWithLogits:
    def test_logit_zero_is_ln2(self):
        t = Tape()
        logits = t.constant(np.zeros((4, 1)))
        loss = ag.bce_with_logits(logits, np.array([0, 1, 0, 1]).reshape(4, 1))
        np.testing.assert_allclose(loss.value, np.log(2), atol=1e-12)

    def test_confident_predictions_hit_clamp_floor(self):
        t = Tape()
        logits = t.constant(np.array([[40.0], [-40.0]]))
        loss = ag.bce_with_logits(logits, np.array([[1.0], [0.0]]))
        assert 0 < loss.value <= 1.7e-6

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((8, 1))
        labels = rng.integers(0, 2, (8, 1))
        perm = rng.permutation(8)
        a = ag.bce_with_logits(Tape().constant(logits), labels).value
        b = ag.bce_with_logits(Tape().constant(logits[perm]), labels[perm]).value
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_gradient_matches_probability_residual(self):
        rng = np.random.default_rng(4)
        p = Parameter("logits", rng.standard_normal((5, 1)))
        labels = rng.integers(0, 2, (5, 1))
        t = Tape()
        ag.backward(ag.bce_with_logits(t.bind(p), labels))
        expected = (ops.sigmoid(p.value) - labels) / 5
        np.testing.assert_allclose(p.grad, expected, atol=1e-12)
