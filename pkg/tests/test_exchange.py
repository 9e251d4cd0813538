import itertools

import numpy as np
import pytest

from chanex.errors import ConfigurationError, DimensionError, ValidationError
from chanex.exchange import (
    ExchangeMask,
    ExchangePlan,
    ExchangeVariant,
    channel_exchange,
    compute_exchange_mask,
    exchange_variant,
    variant_mask,
    zero_out,
)
from chanex.tensor import Tensor, backward, finite_diff_check, mean_all, mse_loss

from oracles import exchange_loop


def empty_mask(m, c):
    return ExchangeMask(replaced=np.zeros((m, c), dtype=bool), exchanged_fraction=0.0)


class TestExchangePlan:
    def test_default_regions_are_contiguous_blocks(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        assert plan.regions_for(4) == ((0, 1), (2, 3))

    def test_indivisible_channels_rejected(self):
        plan = ExchangePlan(num_streams=3, theta=1e-2)
        with pytest.raises(ConfigurationError, match="divide"):
            plan.regions_for(8)

    def test_all_channel_mode(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2, all_channel=True)
        assert plan.regions_for(4) == ((0, 1, 2, 3), (0, 1, 2, 3))

    def test_overlapping_explicit_regions_rejected(self):
        with pytest.raises(ValidationError):
            ExchangePlan(num_streams=2, theta=0.0, regions=((0, 1), (1, 2)))

    def test_negative_theta_rejected(self):
        with pytest.raises(ValidationError):
            ExchangePlan(num_streams=2, theta=-1e-3)


class TestComputeMask:
    def test_all_above_threshold(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        mask = compute_exchange_mask([np.ones(4), np.ones(4)], plan)
        assert not mask.any
        assert mask.exchanged_fraction == 0.0

    def test_directed_rule_worked_example(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        g0 = np.array([0.001, 0.5, 0.9, 0.9])
        g1 = np.array([0.9, 0.9, 0.005, 0.5])
        mask = compute_exchange_mask([g0, g1], plan)
        # stream 0 replaces only channel 0; its channels 2, 3 are never
        # eligible no matter how small the factors there are
        np.testing.assert_array_equal(mask.replaced[0], [True, False, False, False])
        np.testing.assert_array_equal(mask.replaced[1], [False, False, True, False])
        g0_small_outside = np.array([0.5, 0.5, 0.0, 0.0])
        mask2 = compute_exchange_mask([g0_small_outside, g1], plan)
        assert not mask2.replaced[0].any()

    def test_magnitude_rule_catches_negative_gamma(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        mask = compute_exchange_mask([np.array([-0.005, 1.0]), np.array([1.0, -5.0])], plan)
        assert mask.replaced[0, 0]
        assert not mask.replaced[1, 1]  # |gamma| large, stays

    def test_signed_rule_switch(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2, signed_rule=True)
        mask = compute_exchange_mask([np.array([-5.0, 1.0]), np.array([1.0, -5.0])], plan)
        assert mask.replaced[0, 0]  # gamma <= theta under the literal reading
        assert mask.replaced[1, 1]

    def test_fraction_accounts_only_eligible_slots(self):
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        mask = compute_exchange_mask([np.array([0.0, 1, 1, 1]), np.ones(4)], plan)
        assert mask.exchanged_fraction == pytest.approx(1 / 4)


class TestChannelExchange:
    def test_empty_mask_is_identity(self):
        r = np.random.default_rng(0)
        xs = [Tensor.const(r.normal(size=(2, 4, 3, 3))) for _ in range(2)]
        outs = channel_exchange(xs, empty_mask(2, 4))
        for x, o in zip(xs, outs):
            assert np.array_equal(o.values, x.values)

    def test_single_donor_m2(self):
        x0 = Tensor.const(np.zeros((1, 2, 1, 2)))
        x1 = Tensor.const(np.zeros((1, 2, 1, 2)))
        x1.values[0, 0, 0] = [4.0, 6.0]
        mask = empty_mask(2, 2)
        mask.replaced[0, 0] = True
        outs = channel_exchange([x0, x1], mask)
        np.testing.assert_array_equal(outs[0].values[0, 0, 0], [4.0, 6.0])
        np.testing.assert_array_equal(outs[1].values, x1.values)

    def test_three_stream_constant_donors(self):
        shape = (1, 2, 2, 2)
        x0 = Tensor.const(np.full(shape, 1.0))
        x1 = Tensor.const(np.full(shape, 3.0))
        x2 = Tensor.const(np.full(shape, 9.0))
        mask = empty_mask(3, 2)
        mask.replaced[0, 0] = True
        outs = channel_exchange([x0, x1, x2], mask)
        assert np.all(outs[0].values[:, 0] == 6.0)
        assert np.all(outs[0].values[:, 1] == 1.0)

    def test_rejects_single_stream(self):
        with pytest.raises(ConfigurationError):
            channel_exchange([Tensor.const(np.zeros((1, 2, 2, 2)))], empty_mask(1, 2))

    def test_rejects_shape_mismatch(self):
        xs = [Tensor.const(np.zeros((1, 2, 2, 2))), Tensor.const(np.zeros((1, 2, 3, 3)))]
        with pytest.raises(DimensionError):
            channel_exchange(xs, empty_mask(2, 2))

    @pytest.mark.parametrize("m", [2, 3, 4])
    @pytest.mark.parametrize("c", [4, 6, 8, 12])
    def test_matches_loop_oracle_exactly(self, m, c):
        if c % m:
            pytest.skip("channels must divide into sub-parts")
        for seed in range(3):
            r = np.random.default_rng(1000 * m + 10 * c + seed)
            plan = ExchangePlan(num_streams=m, theta=0.3)
            gammas = [r.normal(size=c) for _ in range(m)]
            mask = compute_exchange_mask(gammas, plan)
            xs = [r.normal(size=(2, c, 3, 3)) for _ in range(m)]
            outs = channel_exchange([Tensor.const(x) for x in xs], mask)
            want = exchange_loop(xs, mask.replaced)
            for o, w in zip(outs, want):
                assert np.array_equal(o.values, w)

    @pytest.mark.parametrize("seed", range(5))
    def test_directedness_property(self, seed):
        r = np.random.default_rng(seed)
        m, c = 3, 6
        plan = ExchangePlan(num_streams=m, theta=0.5)
        gammas = [r.normal(size=c) for _ in range(m)]
        mask = compute_exchange_mask(gammas, plan)
        xs = [r.normal(size=(1, c, 2, 2)) for _ in range(m)]
        outs = channel_exchange([Tensor.const(x) for x in xs], mask)
        regions = plan.regions_for(c)
        for mi in range(m):
            outside = [ci for ci in range(c) if ci not in regions[mi]]
            np.testing.assert_array_equal(
                outs[mi].values[:, outside], xs[mi][:, outside]
            )

    def test_identity_at_theta_zero_with_unit_gammas(self):
        plan = ExchangePlan(num_streams=2, theta=0.0)
        mask = compute_exchange_mask([np.ones(4), np.ones(4)], plan)
        assert not mask.any

    def test_symmetry_under_stream_relabelling(self):
        r = np.random.default_rng(3)
        c = 4
        gammas = [r.normal(size=c), r.normal(size=c)]
        xs = [r.normal(size=(1, c, 2, 2)) for _ in range(2)]
        plan = ExchangePlan(num_streams=2, theta=0.5)
        mask = compute_exchange_mask(gammas, plan)
        outs = channel_exchange([Tensor.const(x) for x in xs], mask)

        # swap stream labels together with their regions
        swapped_plan = ExchangePlan(num_streams=2, theta=0.5, regions=((2, 3), (0, 1)))
        mask_sw = compute_exchange_mask([gammas[1], gammas[0]], swapped_plan)
        outs_sw = channel_exchange([Tensor.const(xs[1]), Tensor.const(xs[0])], mask_sw)
        assert np.array_equal(outs_sw[0].values, outs[1].values)
        assert np.array_equal(outs_sw[1].values, outs[0].values)


class TestExchangeGradients:
    def test_replaced_channel_detached_donors_weighted(self):
        r = np.random.default_rng(0)
        shape = (1, 3, 2, 2)
        m = 3
        base = [r.normal(size=shape) for _ in range(m)]
        mask = empty_mask(m, 3)
        mask.replaced[0, 0] = True
        target = Tensor.const(r.normal(size=shape))

        def loss_for_stream0(streams):
            outs = channel_exchange(streams, mask)
            return mse_loss(outs[0], target)

        # analytic gradient routing
        streams = [Tensor.param(b.copy()) for b in base]
        backward(loss_for_stream0(streams))
        assert np.all(streams[0].grad[:, 0] == 0.0)
        np.testing.assert_allclose(streams[1].grad[:, 0], streams[2].grad[:, 0])

        # finite differences confirm 0 / 0.5 / 0.5 sensitivity on that channel
        def f_own(t):
            return loss_for_stream0([t, Tensor.const(base[1]), Tensor.const(base[2])])

        def f_donor(t):
            return loss_for_stream0([Tensor.const(base[0]), t, Tensor.const(base[2])])

        assert finite_diff_check(f_own, Tensor.const(base[0])) < 1e-6
        assert finite_diff_check(f_donor, Tensor.const(base[1])) < 1e-6

    def test_donor_weight_is_half_for_three_streams(self):
        # constant-gradient probe: loss = mean of stream 0 output channel 0
        shape = (1, 1, 1, 1)
        xs = [Tensor.param(np.full(shape, v)) for v in (1.0, 3.0, 9.0)]
        mask = empty_mask(3, 1)
        mask.replaced[0, 0] = True
        outs = channel_exchange(xs, mask)
        backward(mean_all(outs[0]))
        assert xs[0].grad[0, 0, 0, 0] == 0.0
        assert xs[1].grad[0, 0, 0, 0] == 0.5
        assert xs[2].grad[0, 0, 0, 0] == 0.5

    def test_donation_and_own_path_gradients_add(self):
        # stream 1 donates to stream 0 and still receives its own-path gradient
        shape = (1, 1, 1, 1)
        xs = [Tensor.param(np.ones(shape)), Tensor.param(np.ones(shape))]
        mask = empty_mask(2, 1)
        mask.replaced[0, 0] = True
        outs = channel_exchange(xs, mask)
        total = mean_all(Tensor.const(np.zeros(())))  # placeholder replaced below
        backward(mean_all(outs[0]))
        backward(mean_all(outs[1]))
        assert xs[0].grad[0, 0, 0, 0] == 0.0  # replaced own channel, dropped both times
        assert xs[1].grad[0, 0, 0, 0] == 2.0  # donor weight 1 plus own pass-through


class TestZeroOut:
    def test_empty_mask_identity(self):
        r = np.random.default_rng(0)
        xs = [Tensor.const(r.normal(size=(1, 2, 2, 2))) for _ in range(2)]
        outs = zero_out(xs, empty_mask(2, 2))
        for x, o in zip(xs, outs):
            assert np.array_equal(o.values, x.values)

    def test_zeroes_and_blocks_gradient(self):
        xs = [Tensor.param(np.ones((1, 2, 2, 2))), Tensor.param(np.ones((1, 2, 2, 2)))]
        mask = empty_mask(2, 2)
        mask.replaced[0, 1] = True
        outs = zero_out(xs, mask)
        assert np.all(outs[0].values[:, 1] == 0.0)
        backward(mean_all(outs[0]))
        assert np.all(xs[0].grad[:, 1] == 0.0)
        assert xs[1].grad is None  # zero-out never touches other streams


class TestVariants:
    def test_fixed_fraction_picks_smallest_gammas(self):
        gam = np.array([0.9, 0.09, 0.5, 0.03, 0.7, 0.31, 0.11, 0.92, 0.55, 0.04], dtype=float)
        plan = ExchangePlan(num_streams=1, theta=0.0, regions=(tuple(range(10)),))
        # single-stream plan is fine for mask computation
        v = ExchangeVariant(kind="fixed_fraction", fraction=0.3)
        mask = variant_mask([gam], plan, v)
        want = np.zeros(10, dtype=bool)
        want[[3, 9, 1]] = True  # the three smallest magnitudes
        np.testing.assert_array_equal(mask.replaced[0], want)

    def test_random_fraction_is_seed_deterministic(self):
        r = np.random.default_rng(1)
        gammas = [r.normal(size=8), r.normal(size=8)]
        plan = ExchangePlan(num_streams=2, theta=0.0)
        v = ExchangeVariant(kind="random_fraction", fraction=0.5, seed=11)
        m1 = variant_mask(gammas, plan, v)
        m2 = variant_mask(gammas, plan, v)
        np.testing.assert_array_equal(m1.replaced, m2.replaced)
        assert m1.replaced[0].sum() == 2  # half of a 4-channel region
        v2 = ExchangeVariant(kind="random_fraction", fraction=0.5, seed=12)
        m3 = variant_mask(gammas, plan, v2)
        assert not np.array_equal(m1.replaced, m3.replaced)

    def test_no_divide_widens_eligibility(self):
        gammas = [np.array([1.0, 1.0, 0.001, 1.0]), np.ones(4)]
        plan = ExchangePlan(num_streams=2, theta=1e-2)
        v = ExchangeVariant(kind="no_divide")
        mask = variant_mask(gammas, plan, v)
        assert mask.replaced[0, 2]  # outside stream 0's half, still replaced

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown exchange variant"):
            ExchangeVariant(kind="swap_everything")

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValidationError):
            ExchangeVariant(kind="fixed_fraction", fraction=1.5)

    def test_exchange_variant_none_returns_inputs(self):
        xs = [Tensor.const(np.ones((1, 2, 1, 1))), Tensor.const(np.ones((1, 2, 1, 1)))]
        outs, mask = exchange_variant(xs, [np.zeros(2), np.zeros(2)],
                                      ExchangePlan(num_streams=2, theta=1.0),
                                      ExchangeVariant(kind="none"))
        assert outs[0] is xs[0] and outs[1] is xs[1]
        assert not mask.any

    def test_zero_out_variant_applies(self):
        xs = [Tensor.const(np.ones((1, 2, 1, 1))), Tensor.const(np.ones((1, 2, 1, 1)))]
        outs, mask = exchange_variant(xs, [np.array([0.0, 1.0]), np.ones(2)],
                                      ExchangePlan(num_streams=2, theta=1e-2),
                                      ExchangeVariant(kind="zero_out"))
        assert outs[0].values[0, 0, 0, 0] == 0.0
        assert mask.replaced[0, 0]
