import numpy as np
import pytest

from chanex.errors import ConfigurationError, DimensionError, ValidationError
from chanex.exchange import ExchangePlan
from chanex.norm import NormBank, NormParams, norm_forward, sparsity_penalty
from chanex.tensor import Tensor, backward, finite_diff_check, mean_all, mse_loss, mul

from oracles import l1_region_sum, norm_loop


def make_params(c, mode="batch", dtype=np.float64, **kw):
    return NormParams.create(c, mode=mode, dtype=dtype, **kw)


class TestNormForward:
    def test_standardized_input_passes_through(self):
        r = np.random.default_rng(0)
        x = r.uniform(-1.0, 1.0, size=(4, 3, 8, 8))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = norm_forward(Tensor.const(x), make_params(3), training=True)
        np.testing.assert_allclose(out.values, x, atol=1e-5)

    def test_two_value_channel_hand_case(self):
        # values (0, 2): mean 1, std 1 -> normalized (-1, +1); gamma=3, beta=1
        x = np.zeros((2, 1, 1, 1))
        x[1, 0, 0, 0] = 2.0
        params = make_params(1, eps=1e-30)
        params.gamma.values[:] = 3.0
        params.beta.values[:] = 1.0
        out = norm_forward(Tensor.const(x), params, training=True)
        np.testing.assert_allclose(out.values.reshape(2), [-2.0, 4.0], atol=1e-9)

    def test_gamma_zero_blocks_input_gradient(self):
        params = make_params(2)
        params.gamma.values[:] = 0.0
        params.beta.values[:] = 0.7
        x = Tensor.param(np.random.default_rng(1).normal(size=(2, 2, 3, 3)))
        out = norm_forward(x, params, training=True)
        assert np.all(out.values == 0.7)
        backward(mean_all(out))
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.values))

    @pytest.mark.parametrize("mode", ["batch", "instance"])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_direct_oracle(self, mode, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(3, 4, 5, 5))
        params = make_params(4, mode=mode)
        params.gamma.values[:] = r.normal(size=4)
        params.beta.values[:] = r.normal(size=4)
        got = norm_forward(Tensor.const(x), params, training=True)
        want = norm_loop(x, params.gamma.values, params.beta.values, params.eps, mode)
        np.testing.assert_allclose(got.values, want, atol=1e-12)

    def test_training_statistics_invariant(self):
        r = np.random.default_rng(5)
        x = r.normal(loc=3.0, scale=2.5, size=(6, 4, 8, 8))
        out = norm_forward(Tensor.const(x), make_params(4), training=True)
        mean = out.values.mean(axis=(0, 2, 3))
        var = out.values.var(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-5)
        assert np.all(np.abs(var - 1.0) < 1e-4)

    def test_inference_has_no_batch_coupling(self):
        r = np.random.default_rng(2)
        params = make_params(3)
        # move running stats away from init
        norm_forward(Tensor.const(r.normal(size=(4, 3, 6, 6))), params, training=True)
        x = r.normal(size=(4, 3, 6, 6))
        out = norm_forward(Tensor.const(x), params, training=False).values
        perm = np.array([2, 0, 3, 1])
        out_perm = norm_forward(Tensor.const(x[perm]), params, training=False).values
        np.testing.assert_array_equal(out_perm, out[perm])

    def test_running_stats_updated_only_when_asked(self):
        r = np.random.default_rng(3)
        params = make_params(2)
        before = params.running_mean.copy()
        x = Tensor.const(r.normal(loc=5.0, size=(4, 2, 4, 4)))
        norm_forward(x, params, training=True, update_stats=False)
        np.testing.assert_array_equal(params.running_mean, before)
        norm_forward(x, params, training=True)
        assert np.all(params.running_mean != before)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            norm_forward(Tensor.const(np.zeros((1, 3, 4, 4))), make_params(2), training=True)

    def test_instance_mode_rejects_degenerate_spatial(self):
        with pytest.raises(ValidationError):
            norm_forward(
                Tensor.const(np.zeros((2, 2, 1, 1))), make_params(2, mode="instance"),
                training=True,
            )

    def test_rejects_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            NormParams.create(2, mode="group")


class TestNormGradients:
    @pytest.mark.parametrize("mode", ["batch", "instance"])
    @pytest.mark.parametrize("seed", range(5))
    def test_gamma_beta_and_input_match_finite_differences(self, mode, seed):
        r = np.random.default_rng(seed)
        xv = r.normal(size=(2, 3, 4, 4))
        gv = r.normal(size=3) + 1.5
        bv = r.normal(size=3)
        target = Tensor.const(r.normal(size=(2, 3, 4, 4)))

        def run(x, g, b):
            params = make_params(3, mode=mode)
            params.gamma = g if isinstance(g, Tensor) else Tensor.const(g)
            params.beta = b if isinstance(b, Tensor) else Tensor.const(b)
            return mse_loss(norm_forward(x, params, training=True, update_stats=False), target)

        eps = 1e-4  # keeps central-difference truncation error below the bar
        assert finite_diff_check(lambda t: run(t, gv, bv), Tensor.const(xv), eps) < 1e-6
        assert finite_diff_check(lambda t: run(Tensor.const(xv), t, bv), Tensor.const(gv), eps) < 1e-6
        assert finite_diff_check(lambda t: run(Tensor.const(xv), gv, t), Tensor.const(bv), eps) < 1e-6

    def test_inference_gradients(self):
        r = np.random.default_rng(9)
        params = make_params(2)
        norm_forward(Tensor.const(r.normal(size=(4, 2, 4, 4))), params, training=True)
        xv = r.normal(size=(2, 2, 3, 3))
        target = Tensor.const(r.normal(size=(2, 2, 3, 3)))

        def f(t):
            return mse_loss(norm_forward(t, params, training=False), target)

        assert finite_diff_check(f, Tensor.const(xv)) < 1e-6


def single_layer_bank(key, gammas, dtype=np.float64):
    params = NormParams.create(len(gammas), dtype=dtype)
    params.gamma.values[:] = gammas
    return NormBank(key=key, layers=[params])


class TestSparsityPenalty:
    def test_lambda_zero(self):
        banks = [single_layer_bank((m, 0), [0.5, -9.0, 1.0, 2.0]) for m in range(2)]
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        assert sparsity_penalty(banks, plan, 0.0).item() == 0.0

    def test_worked_example(self):
        # C=4, M=2, stream 0 owns {0, 1}; lam=5e-3 is the segmentation default
        banks = [
            single_layer_bank((0, 0), [0.5, -0.25, 9.0, 9.0]),
            single_layer_bank((1, 0), [9.0, 9.0, 9.0, 9.0]),
        ]
        plan = ExchangePlan(num_streams=2, theta=2e-2)
        got = sparsity_penalty(banks[:1] + banks[1:], plan, 5e-3).item()
        # stream 0 region contributes 0.75, stream 1 region contributes 18
        assert got == pytest.approx(5e-3 * (0.75 + 18.0), abs=1e-15)

    def test_stream0_only_worked_value(self):
        banks = [
            single_layer_bank((0, 0), [0.5, -0.25, 9.0, 9.0]),
            single_layer_bank((1, 0), [0.0, 0.0, 0.0, 0.0]),
        ]
        plan = ExchangePlan(num_streams=2, theta=2e-2)
        assert sparsity_penalty(banks, plan, 5e-3).item() == pytest.approx(3.75e-3, abs=1e-18)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_summation_oracle(self, seed):
        r = np.random.default_rng(seed)
        banks = [
            NormBank(key=(m, 0), layers=[])
            for m in range(2)
        ]
        for m in range(2):
            for c in (4, 8):
                p = NormParams.create(c, dtype=np.float64)
                p.gamma.values[:] = r.normal(size=c)
                banks[m].layers.append(p)
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        lam = 3e-3
        got = sparsity_penalty(banks, plan, lam).item()
        want = l1_region_sum(
            [[p.gamma.values for p in b.layers] for b in banks],
            [[plan.regions_for(p.channels)[m] for p in b.layers] for m, b in enumerate(banks)],
            lam,
        )
        assert got == pytest.approx(want, rel=1e-12)

    def test_gradient_is_lambda_sign_in_region_zero_outside(self):
        banks = [
            single_layer_bank((0, 0), [0.5, -0.25, 0.0, 9.0]),
            single_layer_bank((1, 0), [1.0, 1.0, -2.0, 3.0]),
        ]
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        lam = 7e-3
        out = sparsity_penalty(banks, plan, lam)
        backward(out)
        g0 = banks[0].layers[0].gamma.grad
        g1 = banks[1].layers[0].gamma.grad
        np.testing.assert_array_equal(g0, [lam, -lam, 0.0, 0.0])  # sign(0) -> 0
        np.testing.assert_array_equal(g1, [0.0, 0.0, -lam, lam])

    def test_region_out_of_bounds(self):
        banks = [single_layer_bank((0, 0), [1.0, 1.0]), single_layer_bank((1, 0), [1.0, 1.0])]
        plan = ExchangePlan(num_streams=2, theta=0.0, regions=((0, 1), (2, 3)))
        with pytest.raises(ValidationError):
            sparsity_penalty(banks, plan, 1e-3)

    def test_negative_lambda_rejected(self):
        plan = ExchangePlan(num_streams=2, theta=0.0)
        with pytest.raises(ValidationError, match=">= 0"):
            sparsity_penalty([], plan, -1.0)
