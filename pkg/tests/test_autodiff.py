"""Tensor engine tests: op semantics, adjoints, and gradient checks.

Gradient checks run in float64 mode (default_dtype context) against
central finite differences; forward semantics are checked in the float32
default the surrogate trains in.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticeflow import autodiff as ad
from latticeflow import nn
from latticeflow.errors import GraphError, NumericError, ShapeError

import oracles


class TestElementwise:
    def test_mul_by_ones_is_identity(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 3, 3, 2)))
        out = ad.mul(x, ad.Tensor(np.ones((2, 3, 3, 2))))
        assert np.array_equal(out.data, x.data)

    def test_add_of_negation_is_zero(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 4)))
        out = ad.add(x, ad.scale(x, -1.0))
        assert np.all(out.data == 0.0)

    def test_bias_broadcast_over_channels(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 4, 4, 3)))
        b = ad.Tensor(np.array([1.0, 2.0, 3.0]))
        out = ad.add(x, b)
        assert np.allclose(out.data, x.data + np.array([1, 2, 3], dtype=np.float32))

    def test_shape_mismatch_raises(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 3)))
        y = ad.Tensor(rng.normal(size=(3, 2)))
        for op in (ad.add, ad.sub, ad.mul):
            with pytest.raises(ShapeError):
                op(x, y)

    def test_gradients_match_finite_differences(self, rng):
        with ad.default_dtype(np.float64):
            a = ad.Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
            b = ad.Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
            bias = ad.Tensor(rng.normal(size=(2,)), requires_grad=True)

            def loss():
                t = ad.mul(a, b)
                t = ad.sub(t, ad.scale(a, 0.7))
                t = ad.add(t, bias)
                return ad.mean_all(t)

            oracles.finite_difference_check(loss, [a, b, bias], rng=rng)

    def test_leaky_relu_gradient(self, rng):
        with ad.default_dtype(np.float64):
            # keep inputs away from the kink at zero
            data = rng.normal(size=(3, 5))
            data = np.where(np.abs(data) < 0.1, 0.5, data)
            x = ad.Tensor(data, requires_grad=True)

            def loss():
                return ad.sum_all(ad.leaky_relu(x, 0.1))

            oracles.finite_difference_check(loss, [x], rng=rng)

    def test_reshape_and_channel_slice_gradients(self, rng):
        with ad.default_dtype(np.float64):
            x = ad.Tensor(rng.normal(size=(2, 2, 2, 6)), requires_grad=True)

            def loss():
                left = ad.channel_slice(x, 0, 3)
                right = ad.channel_slice(x, 3, 6)
                return ad.mean_all(ad.mul(left, right))

            oracles.finite_difference_check(loss, [x], rng=rng)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 5, 5, 3)))
        k = ad.Tensor(np.eye(3)[None, None])  # 1x1 kernel, channel identity
        out = ad.conv2d(x, k, stride=1)
        assert np.allclose(out.data, x.data)

    def test_overlap_counts_with_ones(self):
        x = ad.Tensor(np.ones((1, 4, 4, 1)))
        k = ad.Tensor(np.ones((3, 3, 1, 1)))
        out = ad.conv2d(x, k, stride=1)
        expected = np.array(
            [[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=np.float32
        )
        assert np.array_equal(out.data[0, :, :, 0], expected)

    def test_stride_two_output_shape(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 6, 6, 3)))
        k = ad.Tensor(rng.normal(size=(4, 4, 3, 5)))
        assert ad.conv2d(x, k, stride=2).data.shape == (2, 3, 3, 5)
        x_odd = ad.Tensor(rng.normal(size=(1, 5, 7, 3)))
        assert ad.conv2d(x_odd, k, stride=2).data.shape == (1, 3, 4, 5)

    def test_channel_mismatch_names_dims(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 4, 4, 3)))
        k = ad.Tensor(rng.normal(size=(3, 3, 2, 4)))
        with pytest.raises(ShapeError, match="channel"):
            ad.conv2d(x, k)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients_match_finite_differences(self, rng, stride):
        with ad.default_dtype(np.float64):
            x = ad.Tensor(rng.normal(size=(1, 5, 5, 2)), requires_grad=True)
            k = ad.Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)

            def loss():
                return ad.sum_all(ad.conv2d(x, k, stride=stride))

            oracles.finite_difference_check(loss, [x, k], rng=rng, rtol=1e-6)


class TestTransposeConv2d:
    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_adjoint_identity(self, seed):
        gen = np.random.default_rng(seed)
        with ad.default_dtype(np.float64):
            x = ad.Tensor(gen.normal(size=(1, 6, 6, 2)))
            k = ad.Tensor(gen.normal(size=(4, 4, 2, 3)))
            y = ad.Tensor(gen.normal(size=(1, 3, 3, 3)))
            lhs = float((ad.conv2d(x, k, 2).data * y.data).sum())
            rhs = float((x.data * ad.transpose_conv2d(y, k).data).sum())
            assert lhs == pytest.approx(rhs, abs=1e-10, rel=1e-10)

    def test_adjoint_identity_float32(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 8, 8, 2)))
        k = ad.Tensor(rng.normal(size=(4, 4, 2, 3)))
        y = ad.Tensor(rng.normal(size=(1, 4, 4, 3)))
        lhs = float((ad.conv2d(x, k, 2).data * y.data).sum())
        rhs = float((x.data * ad.transpose_conv2d(y, k).data).sum())
        assert lhs == pytest.approx(rhs, abs=1e-5 * max(1.0, abs(lhs)))

    def test_zero_input_gives_zero_output(self):
        y = ad.Tensor(np.zeros((1, 3, 3, 2)))
        k = ad.Tensor(np.random.default_rng(0).normal(size=(4, 4, 5, 2)))
        out = ad.transpose_conv2d(y, k)
        assert np.all(out.data == 0.0)

    def test_doubles_spatial_dims(self, rng):
        y = ad.Tensor(rng.normal(size=(2, 3, 5, 2)))
        k = ad.Tensor(rng.normal(size=(4, 4, 7, 2)))
        assert ad.transpose_conv2d(y, k).data.shape == (2, 6, 10, 7)

    def test_gradients_match_finite_differences(self, rng):
        with ad.default_dtype(np.float64):
            y = ad.Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
            k = ad.Tensor(rng.normal(size=(4, 4, 3, 2)), requires_grad=True)

            def loss():
                return ad.sum_all(ad.transpose_conv2d(y, k))

            oracles.finite_difference_check(loss, [y, k], rng=rng, rtol=1e-6)


class TestLosses:
    def test_mse_trivial_cases(self, rng):
        a = ad.Tensor(rng.normal(size=(3, 4)))
        assert ad.mse(a, a).item() == 0.0
        b = ad.Tensor(a.data + 1.0)
        assert ad.mse(a, b).item() == pytest.approx(1.0, rel=1e-6)

    def test_mse_matches_scalar_oracle(self, rng):
        with ad.default_dtype(np.float64):
            a = ad.Tensor(rng.normal(size=(2, 3, 3, 2)))
            b = ad.Tensor(rng.normal(size=(2, 3, 3, 2)))
            assert ad.mse(a, b).item() == pytest.approx(
                oracles.scalar_mse(a.data, b.data), abs=1e-12
            )

    def test_mse_gradient(self, rng):
        with ad.default_dtype(np.float64):
            a = ad.Tensor(rng.normal(size=(2, 4, 4, 3)), requires_grad=True)
            b = ad.Tensor(rng.normal(size=(2, 4, 4, 3)), requires_grad=True)
            oracles.finite_difference_check(lambda: ad.mse(a, b), [a, b], rng=rng)

    def test_gdl_zero_for_equal_and_for_constants(self, rng):
        a = ad.Tensor(rng.normal(size=(1, 4, 4, 2)))
        assert ad.gdl(a, a).item() == 0.0
        c1 = ad.Tensor(np.full((1, 4, 4, 2), 3.0))
        c2 = ad.Tensor(np.full((1, 4, 4, 2), -1.0))
        assert ad.gdl(c1, c2).item() == 0.0

    def test_gdl_matches_scalar_oracle(self, rng):
        with ad.default_dtype(np.float64):
            a = ad.Tensor(rng.normal(size=(2, 4, 3, 2)))
            b = ad.Tensor(rng.normal(size=(2, 4, 3, 2)))
            assert ad.gdl(a, b).item() == pytest.approx(
                oracles.scalar_gdl(a.data, b.data), abs=1e-12
            )

    def test_gdl_gradient_away_from_kinks(self, rng):
        with ad.default_dtype(np.float64):
            # spread values so no |.| argument sits within 1e-3 of zero
            a = ad.Tensor(np.cumsum(rng.uniform(0.05, 1.0, (1, 4, 4, 2)), axis=1),
                          requires_grad=True)
            b = ad.Tensor(np.cumsum(rng.uniform(0.05, 1.0, (1, 4, 4, 2)), axis=2),
                          requires_grad=True)
            oracles.finite_difference_check(lambda: ad.gdl(a, b), [a, b], rng=rng)

    def test_loss_nonnegative(self, rng):
        a = ad.Tensor(rng.normal(size=(1, 5, 5, 3)))
        b = ad.Tensor(rng.normal(size=(1, 5, 5, 3)))
        assert ad.mse(a, b).item() >= 0.0
        assert ad.gdl(a, b).item() >= 0.0


class TestResidualBlocks:
    def test_zero_initialized_branch_is_identity(self, rng):
        gen = np.random.default_rng(7)
        block = nn.ResidualBlock("blk", 4, gen)
        x = ad.Tensor(rng.normal(size=(2, 6, 6, 4)))
        out = block(x)
        assert np.array_equal(out.data, x.data)

    def test_down_block_shape_contract(self, rng):
        gen = np.random.default_rng(7)
        block = nn.DownResidualBlock("down", 4, 8, gen)
        x = ad.Tensor(rng.normal(size=(2, 8, 8, 4)))
        out = block(x)
        assert out.data.shape == (2, 4, 4, 8)

    def test_down_block_zero_branch_equals_projection(self, rng):
        gen = np.random.default_rng(7)
        block = nn.DownResidualBlock("down", 4, 8, gen)
        x = ad.Tensor(rng.normal(size=(1, 6, 6, 4)))
        assert np.array_equal(block(x).data, block.proj(x).data)

    @pytest.mark.parametrize("kind", ["res", "down"])
    def test_full_block_gradients(self, rng, kind):
        with ad.default_dtype(np.float64):
            gen = np.random.default_rng(3)
            if kind == "res":
                block = nn.ResidualBlock("blk", 3, gen)
            else:
                block = nn.DownResidualBlock("blk", 3, 6, gen)
            # zero-init branch has zero gradient signal through conv2's
            # kernel only at exactly zero output; nudge it off zero
            block.conv2.kernel.data += gen.normal(size=block.conv2.kernel.data.shape) * 0.1
            x = ad.Tensor(gen.normal(size=(1, 4, 4, 3)), requires_grad=True)
            params = block.params()

            def loss():
                return ad.mean_all(block(x))

            oracles.finite_difference_check(loss, [x] + params, rng=rng)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = nn.Parameter(np.array([1.0, -2.0]), "w")
        nn.adam_step([p], grads=[np.zeros(2)], lr=0.1)
        assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))
        assert p.t == 1

    def test_first_step_matches_scalar_oracle(self):
        with ad.default_dtype(np.float64):
            p = nn.Parameter(np.array([0.5]), "w")
            g = np.array([0.3])
            nn.adam_step([p], grads=[g], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
            expected, _, _ = oracles.scalar_adam(
                0.5, 0.3, 0.0, 0.0, t=1, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8
            )
            assert p.data[0] == pytest.approx(expected, abs=1e-12)

    def test_three_steps_match_scalar_oracle(self):
        with ad.default_dtype(np.float64):
            p = nn.Parameter(np.array([1.0]), "w")
            theta, m, v = 1.0, 0.0, 0.0
            for t in range(1, 4):
                g = 0.2 * t
                nn.adam_step([p], grads=[np.array([g])], lr=0.01)
                theta, m, v = oracles.scalar_adam(
                    theta, g, m, v, t=t, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8
                )
            assert p.data[0] == pytest.approx(theta, abs=1e-12)

    def test_converges_on_quadratic_bowl(self):
        # momentum overshoots the minimum near step 11, so the loss is not
        # strictly monotone; the run converges with a damped oscillation
        with ad.default_dtype(np.float64):
            p = nn.Parameter(np.array([1.0, 1.0]), "w")
            losses = []
            for _ in range(100):
                p.zero_grad()
                loss = ad.sum_all(ad.mul(p, p))
                loss.backward()
                losses.append(loss.item())
                nn.adam_step([p], lr=0.1)
            assert all(b < a for a, b in zip(losses[:10], losses[1:11]))
            assert losses[-1] < 1e-4 * losses[0]
            assert all(np.isfinite(losses))


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        ad.sum_all(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_unused_parameter_gets_no_gradient(self, rng):
        x = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
        unused = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
        ad.sum_all(x).backward()
        assert unused.grad is None  # adam treats missing gradients as zero

    def test_repeated_backward_idempotent_after_zeroing(self, rng):
        x = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)

        def run():
            x.zero_grad()
            loss = ad.mean_all(ad.mul(x, x))
            loss.backward()
            return x.grad.copy()

        assert np.array_equal(run(), run())

    def test_accumulation_over_shared_subgraph(self, rng):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        y = ad.mul(x, x)  # x used twice: dy/dx = 2x
        ad.sum_all(y).backward()
        assert x.grad[0] == pytest.approx(4.0)

    def test_non_scalar_loss_rejected(self, rng):
        x = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(GraphError):
            ad.mul(x, x).backward()

    def test_no_grad_suppresses_graph(self, rng):
        x = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
        with ad.no_grad():
            out = ad.mul(x, x)
        assert not out.requires_grad
        assert out._backward_fn is None

    def test_non_finite_forward_raises(self):
        x = ad.Tensor(np.array([1e30], dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            ad.mul(x, x)  # overflows float32 to inf

    def test_forward_determinism(self, rng):
        x = rng.normal(size=(2, 8, 8, 3))
        k = rng.normal(size=(3, 3, 3, 4))
        a = ad.conv2d(ad.Tensor(x), ad.Tensor(k), 2).data
        b = ad.conv2d(ad.Tensor(x), ad.Tensor(k), 2).data
        assert np.array_equal(a, b)
