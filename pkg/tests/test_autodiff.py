import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitcast import autodiff as ad


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=shape)


def gradcheck_unary(fn, x_data, seed=0, tol=1e-4):
    """Analytic vs central-difference gradients for scalar(mean(fn(x)))."""
    x = ad.Tensor(x_data.copy(), requires_grad=True)
    # random projection makes the scalarization exercise every output entry
    w = rand(np.asarray(fn(ad.constant(x_data)).data).shape, seed=seed + 7, lo=0.5, hi=1.5)

    def build():
        return ad.mean(ad.mul(fn(x), ad.constant(w)))

    worst, _ = ad.check_gradients(build, {"x": x})
    assert worst <= tol, f"gradient mismatch: {worst}"


class TestForward:
    def test_matmul_identity(self):
        a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, ad.constant(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_softmax_symmetry(self):
        out = ad.softmax_lastdim(ad.constant([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self):
        s = ad.softmax_lastdim(ad.constant(rand((3, 4, 5), seed=1, lo=-4, hi=4)))
        np.testing.assert_allclose(s.data.sum(axis=-1), np.ones((3, 4)), atol=1e-9)

    def test_softmax_stable_for_large_logits(self):
        s = ad.softmax_lastdim(ad.constant([1e4, 1e4 - 1.0]))
        assert np.all(np.isfinite(s.data))

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
            ad.add(ad.constant([1.0, 2.0]), ad.constant([1.0, 2.0, 3.0]))
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))

    def test_forward_deterministic(self):
        x = rand((4, 6), seed=3)
        a = ad.softmax_lastdim(ad.relu(ad.constant(x)))
        b = ad.softmax_lastdim(ad.relu(ad.constant(x)))
        np.testing.assert_array_equal(a.data, b.data)

    def test_finite_outputs_on_finite_inputs(self):
        x = ad.constant(rand((5, 8), seed=9, lo=-50, hi=50))
        g = ad.Tensor(np.ones(8), requires_grad=True)
        b = ad.Tensor(np.zeros(8), requires_grad=True)
        for t in (ad.softmax_lastdim(x), ad.layer_norm(x, g, b), ad.exp(ad.scale(x, 0.01))):
            assert np.all(np.isfinite(t.data))


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_(ad.mul(x, x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_abs_subgradient(self):
        # upstream [1, 1] through abs at [-2, 3] -> [-1, 1]
        x = ad.Tensor([-2.0, 3.0], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum_(ad.abs_(x)))
        np.testing.assert_array_equal(x.grad, [-1.0, 1.0])

    def test_abs_zero_has_zero_subgradient(self):
        x = ad.Tensor([0.0, -1.0], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum_(ad.abs_(x)))
        np.testing.assert_array_equal(x.grad, [0.0, -1.0])

    def test_mean_abs_error_grad(self):
        # d/dx mean(|x - y|) at x=[1,0], y=[0,0]: [0.5, 0] with abs'(0)=0
        x = ad.Tensor([1.0, 0.0], requires_grad=True)
        y = ad.constant([0.0, 0.0])
        with ad.Tape() as tape:
            tape.backward(ad.mean(ad.abs_(ad.sub(x, y))))
        np.testing.assert_allclose(x.grad, [0.5, 0.0])
        numeric = ad.finite_difference_grad(
            lambda: float(np.mean(np.abs(x.data - y.data))), x.data)
        # finite differences agree away from the kink; entry 1 sits on it
        assert abs(numeric[0] - 0.5) < 1e-9

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ad.ShapeError, match="scalar"):
                tape.backward(y)

    def test_repeated_backward_rejected(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_(x)
            tape.backward(loss)
            with pytest.raises(ad.TapeError):
                tape.backward(loss)
        tape.reset()
        with tape:
            tape.backward(ad.sum_(ad.mul(x, x)))
        # 1.0 from first backward still accumulated, plus 2.0 now
        np.testing.assert_allclose(x.grad, [3.0])

    def test_detached_loss_warns_and_zeroes(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            ad.sum_(ad.mul(x, x))  # recorded, but not the loss we pass
            detached = ad.constant(3.14)
            with pytest.warns(UserWarning, match="detached"):
                status = tape.backward(detached)
        assert status == "detached"
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_no_recording_without_tape(self):
        x = ad.Tensor([1.0], requires_grad=True)
        y = ad.mul(x, x)
        assert y.requires_grad
        with ad.Tape() as tape:
            pass
        assert len(tape) == 0

    def test_gradient_linearity(self):
        x = ad.Tensor(rand((3, 3), seed=5), requires_grad=True)
        a = ad.constant(rand((3, 3), seed=6))
        b = ad.constant(rand((3, 3), seed=7))

        def loss1():
            return ad.mean(ad.mul(ad.relu(x), a))

        def loss2():
            return ad.sum_(ad.mul(ad.softmax_lastdim(x), b))

        with ad.Tape() as tape:
            tape.backward(ad.add(loss1(), loss2()))
        combined = x.grad.copy()
        ad.zero_grads([x])
        with ad.Tape() as tape:
            tape.backward(loss1())
        g1 = x.grad.copy()
        ad.zero_grads([x])
        with ad.Tape() as tape:
            tape.backward(loss2())
        g2 = x.grad.copy()
        np.testing.assert_allclose(combined, g1 + g2, rtol=1e-12, atol=1e-14)


class TestGradcheckPrimitives:
    """Every primitive against central finite differences (rel err <= 1e-4)."""

    def test_matmul(self):
        a = ad.Tensor(rand((3, 4), seed=1), requires_grad=True)
        b = ad.Tensor(rand((4, 2), seed=2), requires_grad=True)
        worst, _ = ad.check_gradients(lambda: ad.mean(ad.matmul(a, b)), {"a": a, "b": b})
        assert worst <= 1e-4

    def test_matmul_batched(self):
        a = ad.Tensor(rand((2, 3, 4), seed=3), requires_grad=True)
        b = ad.Tensor(rand((2, 4, 5), seed=4), requires_grad=True)
        worst, _ = ad.check_gradients(lambda: ad.mean(ad.matmul(a, b)), {"a": a, "b": b})
        assert worst <= 1e-4

    def test_matmul_shared_weight(self):
        a = ad.Tensor(rand((2, 3, 4), seed=5), requires_grad=True)
        w = ad.Tensor(rand((4, 6), seed=6), requires_grad=True)
        worst, _ = ad.check_gradients(lambda: ad.mean(ad.matmul(a, w)), {"a": a, "w": w})
        assert worst <= 1e-4

    @pytest.mark.parametrize("fn", [ad.relu, ad.abs_, ad.exp, ad.softmax_lastdim],
                             ids=["relu", "abs", "exp", "softmax"])
    def test_elementwise(self, fn):
        # offset keeps relu/abs inputs away from their kink at 0
        x = rand((4, 5), seed=11, lo=0.2, hi=1.5) * np.where(rand((4, 5), seed=12) > 0, 1, -1)
        gradcheck_unary(fn, x, seed=13)

    def test_log(self):
        gradcheck_unary(ad.log, rand((3, 4), seed=14, lo=0.5, hi=3.0), seed=15)

    def test_layer_norm(self):
        x = ad.Tensor(rand((3, 4, 6), seed=16), requires_grad=True)
        g = ad.Tensor(rand((6,), seed=17, lo=0.5, hi=1.5), requires_grad=True)
        b = ad.Tensor(rand((6,), seed=18), requires_grad=True)
        proj = ad.constant(rand((3, 4, 6), seed=19))
        worst, _ = ad.check_gradients(
            lambda: ad.mean(ad.mul(ad.layer_norm(x, g, b), proj)), {"x": x, "g": g, "b": b})
        assert worst <= 1e-4

    def test_reductions_and_moves(self):
        x = ad.Tensor(rand((2, 3, 4), seed=20), requires_grad=True)
        proj2 = ad.constant(rand((3, 4, 2), seed=21))

        def build():
            t = ad.transpose(x, (1, 2, 0))
            t = ad.mul(t, proj2)
            t = ad.reshape(t, (3, 8))
            row = ad.slice_axis(t, 0, 1, 2)
            return ad.add(ad.mean(row), ad.mean(ad.sum_(t, axis=1)))

        worst, _ = ad.check_gradients(build, {"x": x})
        assert worst <= 1e-4

    def test_concat_and_slice(self):
        a = ad.Tensor(rand((2, 3), seed=22), requires_grad=True)
        b = ad.Tensor(rand((2, 3), seed=23), requires_grad=True)

        def build():
            cat = ad.concat([a, b, a], axis=0)
            return ad.mean(ad.mul(cat, ad.constant(rand((6, 3), seed=24))))

        worst, _ = ad.check_gradients(build, {"a": a, "b": b})
        assert worst <= 1e-4

    def test_bias_and_shared(self):
        x = ad.Tensor(rand((2, 3, 4), seed=25), requires_grad=True)
        bias = ad.Tensor(rand((4,), seed=26), requires_grad=True)
        tab = ad.Tensor(rand((3, 4), seed=27), requires_grad=True)

        def build():
            t = ad.add_shared(ad.add_bias(x, bias), tab)
            return ad.mean(ad.mul(t, ad.constant(rand((2, 3, 4), seed=28))))

        worst, _ = ad.check_gradients(build, {"x": x, "bias": bias, "tab": tab})
        assert worst <= 1e-4

    def test_gather_lastdim(self):
        x = ad.Tensor(rand((5, 4), seed=29), requires_grad=True)
        idx = np.array([0, 3, 1, 1, 2])

        def build():
            return ad.mean(ad.gather_lastdim(x, idx))

        worst, _ = ad.check_gradients(build, {"x": x})
        assert worst <= 1e-4
        with ad.Tape() as tape:
            tape.backward(ad.sum_(ad.gather_lastdim(x, idx)))
        assert x.grad.sum() == pytest.approx(5.0)

    def test_composite_chain(self):
        w1 = ad.Tensor(rand((4, 8), seed=30), requires_grad=True)
        w2 = ad.Tensor(rand((8, 3), seed=31), requires_grad=True)
        x = ad.constant(rand((6, 4), seed=32))

        def build():
            h = ad.relu(ad.matmul(x, w1))
            return ad.mean(ad.abs_(ad.matmul(h, w2)))

        worst, _ = ad.check_gradients(build, {"w1": w1, "w2": w2})
        assert worst <= 1e-4


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_softmax_rows_are_distributions(rows, cols, seed):
    x = ad.constant(rand((rows, cols), seed=seed, lo=-6, hi=6))
    s = ad.softmax_lastdim(x).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(rows), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mul_gradcheck_random(seed):
    x = ad.Tensor(rand((3, 3), seed=seed, lo=0.1, hi=2.0), requires_grad=True)
    y = ad.Tensor(rand((3, 3), seed=seed + 1, lo=0.1, hi=2.0), requires_grad=True)
    worst, _ = ad.check_gradients(lambda: ad.mean(ad.mul(x, y)), {"x": x, "y": y})
    assert worst <= 1e-4
