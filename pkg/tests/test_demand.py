import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import DESK_R_MIN, GAP, SYMBOL_RATE, desk
from oracles import prefix_tone_count

from gfast_demand.demand import (DemandSettings, InfeasibleDemandError, PriorityPartition,
                                 compare_solvers, heuristic_allocation, min_rate_violations,
                                 slackness_residual, solve_alternating, solve_heuristic,
                                 step_size, subgradient_update)
from gfast_demand.precoding import make_order
from gfast_demand.spectrum import solve_srop


def test_multiplier_update_example():
    assert subgradient_update(0.5, 0.1, 10.0, 12.0) == pytest.approx(0.3)
    # projection onto lambda >= 0
    assert subgradient_update(0.1, 1.0, 10.0, 12.0) == 0.0
    np.testing.assert_allclose(subgradient_update([0.0, 1.0], 0.5, [4.0, 2.0], [2.0, 2.0]),
                               [1.0, 1.0])


def test_step_size_diminishes_and_is_bounded():
    g = np.array([3.0, -4.0])
    steps = [float(step_size(1.0, t, g, 1.0)) for t in (1, 4, 16)]
    assert steps == pytest.approx([0.2, 0.1, 0.05])
    assert float(step_size(1.0, 1, g * 1e-3, 1.0)) == pytest.approx(1.0)
    np.testing.assert_allclose(step_size(1.0, 1, g, 1.0, scale=[1.0, 0.5]), [0.2, 0.1])


def test_heuristic_allocation_examples():
    bits = np.array([3, 3, 2, 1, 1], float)[:, None]
    assert heuristic_allocation(bits, [7.0], [0]).tolist() == [3]
    assert heuristic_allocation(bits, [6.0], [0]).tolist() == [2]
    assert heuristic_allocation(bits, [0.0], [0]).tolist() == [0]
    assert heuristic_allocation(bits, [10.0], [0]).tolist() == [5]
    # users outside the list are left at 0
    two = np.hstack([bits, bits])
    assert heuristic_allocation(two, [7.0, 7.0], [1]).tolist() == [0, 3]


@settings(max_examples=200, deadline=None)
@given(bits=st.lists(st.integers(0, 12), min_size=1, max_size=40), frac=st.floats(0, 1))
def test_heuristic_allocation_matches_prefix_loop(bits, frac):
    b = np.array(bits, float)
    target = frac * b.sum()
    n = heuristic_allocation(b[:, None], [target], [0])[0]
    assert n == prefix_tone_count(b, target)
    assert b[:n].sum() >= target * (1 - 1e-12)
    if n > 0:
        # prefix-minimal: one tone fewer misses the target
        assert b[:n - 1].sum() < target * (1 - 1e-12)


@settings(max_examples=100, deadline=None)
@given(bits=st.lists(st.integers(0, 12), min_size=1, max_size=30),
       a=st.floats(0, 1), b=st.floats(0, 1))
def test_heuristic_allocation_monotone_in_target(bits, a, b):
    x = np.array(bits, float)[:, None]
    lo, hi = sorted((a, b))
    total = x.sum()
    assert (heuristic_allocation(x, [lo * total], [0])[0]
            <= heuristic_allocation(x, [hi * total], [0])[0])


def test_partition_validation():
    p = PriorityPartition((3, 1), 5, 100.0)
    assert p.prioritized == (1, 3)
    assert p.r_min.tolist() == [100.0, 0.0, 100.0, 0.0, 100.0]
    assert p.constrained.tolist() == [0, 2, 4]
    with pytest.raises(ValueError, match="duplicate"):
        PriorityPartition((1, 1), 3)
    with pytest.raises(ValueError, match="range"):
        PriorityPartition((3,), 3)
    with pytest.raises(ValueError, match="r_min"):
        PriorityPartition((0,), 3, [0.0, -1.0, 1.0])


def test_violation_and_slackness_measures():
    p = PriorityPartition((0,), 3, [0.0, 100.0, 0.0])
    R = np.array([5.0, 90.0, 40.0])
    np.testing.assert_allclose(min_rate_violations(R, p), [0.0, 0.1, 0.0])
    np.testing.assert_allclose(slackness_residual([2.0, 0.5], R, p, 20.0), [-0.2, 1.0])


@pytest.fixture(scope="module")
def desk_case():
    ch, cons = desk(seed=11, L=6, N=128, fext=1e-7)
    part = PriorityPartition((0, 1), 6, DESK_R_MIN)
    order = make_order(ch.line_lengths, part.prioritized)
    srop = solve_srop(ch, "ZF_THP", cons, GAP, order)
    return ch, cons, part, order, srop


def test_alternating_meets_min_rates(desk_case):
    ch, cons, part, order, srop = desk_case
    rep = solve_alternating(ch, "ZF_THP", cons, GAP, part, order, srop=srop)
    assert rep.converged
    assert min_rate_violations(rep.user_rates, part).max() <= 0.005
    # every logged step follows the projected update rule
    for s in rep.lambda_trajectory:
        if not s.restored:
            ref = subgradient_update(s.lam, s.alpha, part.r_min[part.constrained], s.rates)
            np.testing.assert_allclose(s.lam_next, ref, rtol=1e-12, atol=0)
    np.testing.assert_allclose(rep.srop_rates, srop.user_rates(SYMBOL_RATE))


def test_zero_min_rate_drives_multipliers_to_zero(desk_case):
    ch, cons, _, order, srop = desk_case
    part = PriorityPartition((0, 1), 6, 0.0)
    rep = solve_alternating(ch, "ZF_THP", cons, GAP, part, order, srop=srop)
    assert rep.converged
    assert np.max(rep.lam) <= 1e-3


def test_heuristic_on_desk(desk_case):
    ch, cons, part, order, srop = desk_case
    rep = solve_heuristic(ch, "ZF_THP", cons, GAP, part, order, srop=srop)
    assert rep.wsr_solves == 1
    assert rep.n_max[list(part.prioritized)].tolist() == [0, 0]
    for l in part.constrained:
        n = rep.n_max[l]
        assert n == prefix_tone_count(srop.rates[:, l], DESK_R_MIN / SYMBOL_RATE)
        assert rep.solution.disabled[n:, l].all()
    short = [l for l in part.constrained if rep.user_rates[l] < DESK_R_MIN * (1 - 1e-9)]
    assert bool(short) == any("below r_min" in f for f in rep.flags)


def test_infeasible_demand_raises(desk_case):
    ch, cons, _, order, srop = desk_case
    part = PriorityPartition((0,), 6, 1e12)
    with pytest.raises(InfeasibleDemandError, match="line 1"):
        solve_alternating(ch, "ZF_THP", cons, GAP, part, order, srop=srop)
    with pytest.raises(InfeasibleDemandError):
        solve_heuristic(ch, "ZF_THP", cons, GAP, part, order, srop=srop)


def test_partition_size_mismatch(desk_case):
    ch, cons, _, order, srop = desk_case
    with pytest.raises(ValueError, match="partition covers"):
        solve_heuristic(ch, "ZF_THP", cons, GAP, PriorityPartition((0,), 5), order, srop=srop)


def test_compare_solvers_shares_srop():
    ch, cons = desk(seed=12, L=4, N=64, fext=1e-7)
    part = PriorityPartition((0,), 4, DESK_R_MIN / 4)
    rec = compare_solvers(ch, "ZF_LINEAR", cons, GAP, part,
                          settings=DemandSettings(max_iter=100))
    assert set(rec.rates) == {"alternating", "heuristic"}
    srop = rec.reports["alternating"].srop
    assert rec.reports["heuristic"].srop is srop
    assert rec.meets_r_min["alternating"]
    assert rec.wsr_solves["heuristic"] == 1
    assert rec.prioritized_gain("alternating") == pytest.approx(
        rec.normalized["alternating"][0])


def test_monotone_hardening(desk_case):
    ch, cons, _, order, srop = desk_case
    srop_R = srop.user_rates(SYMBOL_RATE)
    prio_sum = []
    for frac in (0.2, 0.5, 0.8):
        part = PriorityPartition((0, 1), 6, frac * srop_R)
        rep = solve_alternating(ch, "ZF_THP", cons, GAP, part, order, srop=srop)
        assert rep.converged
        prio_sum.append(rep.user_rates[[0, 1]].sum())
        # a prioritized user below its SROP rate is always reported
        below = [l for l in (0, 1) if rep.user_rates[l] < srop_R[l] * (1 - 1e-9)]
        assert below == rep.prioritized_below_srop
    tol = 0.005 * prio_sum[0]
    assert prio_sum[0] + tol >= prio_sum[1] and prio_sum[1] + tol >= prio_sum[2]


def test_diagonal_channel_returns_srop_at_full_demand():
    ch, cons = desk(seed=13, L=3, N=32, fext=0.0)
    srop = solve_srop(ch, "ZF_LINEAR", cons, GAP, make_order(ch.line_lengths, (0,)))
    part = PriorityPartition((0,), 3, srop.user_rates(SYMBOL_RATE))
    rec = compare_solvers(ch, "ZF_LINEAR", cons, GAP, part)
    for solver in ("alternating", "heuristic"):
        np.testing.assert_allclose(rec.normalized[solver], 1.0, rtol=0.005)
        assert rec.meets_r_min[solver]
