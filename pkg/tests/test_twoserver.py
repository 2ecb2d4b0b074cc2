import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetroute.exact import stationary_distribution
from hetroute.mdp import StateSpace, SystemConfig
from hetroute.policy import SoftThresholdParams
from hetroute.twoserver import (
    VerifierRow,
    bellman_residual,
    check_unimodality,
    discounted_policy_eval,
    discounted_threshold,
    discounted_value_iteration,
    h_reconstructed,
    h_sequence,
    hard_pi_objective,
    is_unimodal,
    sign_structure,
    verify_point,
    weighted_pi_objective,
    write_verifier_report,
)

CFG = SystemConfig.from_load(0.4, [100, 25], 30)
ACTOR = SoftThresholdParams((1.0,), 10.0)


def test_tiny_gamma_gives_immediate_cost():
    ev = discounted_policy_eval(ACTOR, CFG, 1e-9)
    np.testing.assert_allclose(ev.values, ev.space.cost, atol=1e-6)


def test_constant_cost_gives_geometric_sum():
    space = StateSpace(CFG)
    ev = discounted_policy_eval(ACTOR, space, 0.9, cost=np.ones(space.n))
    np.testing.assert_allclose(ev.values, 10.0, rtol=1e-10)


@pytest.mark.parametrize("gamma", [0.9, 0.99, 0.999])
def test_bellman_residual_small(gamma):
    ev = discounted_policy_eval(ACTOR, CFG, gamma)
    assert bellman_residual(ev, ACTOR) < 1e-9 * max(1.0, np.abs(ev.values).max())


def test_gamma_validation_and_k_check():
    with pytest.raises(ValueError):
        discounted_policy_eval(ACTOR, CFG, 1.0)
    with pytest.raises(ValueError):
        discounted_policy_eval(ACTOR, CFG, 0.0)
    with pytest.raises(ValueError):
        discounted_policy_eval(ACTOR, SystemConfig.from_load(0.4, [3, 2, 1], 5), 0.9)
    with pytest.raises(ValueError):
        discounted_value_iteration(CFG, 1.5)


def test_symmetric_servers_always_routing_gives_zero_h0():
    # relabelling the servers maps (0, 1, 0) onto (0, 0, 1) when both rates match
    # and the actor routes whenever a server is free
    cfg = SystemConfig.from_load(0.4, [10, 10], 20)
    actor = SoftThresholdParams((-50.0,), 10.0)
    h = h_sequence(actor, cfg, 0.95)
    assert h[0] == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("gamma", [0.9, 0.99])
@pytest.mark.parametrize("theta", [0.5, 2.0, 6.0])
def test_h_reconstruction_identity(gamma, theta):
    actor = SoftThresholdParams((theta,), 5.0)
    ev = discounted_policy_eval(actor, CFG, gamma)
    h = h_sequence(actor, CFG, gamma, ev)
    r = h_reconstructed(actor, CFG, gamma, ev)
    sl = slice(2, CFG.buffer_capacity)
    np.testing.assert_allclose(r[sl], h[sl], atol=1e-9 * max(1.0, np.abs(ev.values).max()))
    assert np.isnan(r[:2]).all() and np.isnan(r[CFG.buffer_capacity:]).all()


def test_sign_structure_helper():
    rep = sign_structure(np.array([-3.0, -2.0, -0.5, 0.1, 2.0]))
    assert rep.single_sign_change and rep.increasing_prefix and rep.l_star == 2
    rep = sign_structure(np.array([-1.0, 1.0, -1.0, 2.0]))
    assert not rep.single_sign_change
    rep = sign_structure(np.array([-1.0, -2.0, 1.0]))
    assert rep.single_sign_change and not rep.increasing_prefix
    assert sign_structure(np.array([1.0, 2.0])).l_star == -1
    assert sign_structure(np.array([-1.0, 1.0, -1.0]), upto=1).single_sign_change


@pytest.mark.parametrize("gamma", [0.9, 0.99, 0.999])
def test_sign_structure_at_sharp_actor(gamma):
    l_star = discounted_threshold(CFG, gamma)
    actor = SoftThresholdParams((float(l_star),), 10.0)
    rep = sign_structure(h_sequence(actor, CFG, gamma), upto=int(0.9 * CFG.buffer_capacity))
    assert rep.single_sign_change and rep.increasing_prefix


def test_discounted_threshold_reference_values():
    cfg = SystemConfig.from_load(0.3, [100, 25], 100)
    assert [discounted_threshold(cfg, g) for g in (0.9, 0.99, 0.999)] == [1, 2, 2]


def test_self_evaluation_identity():
    # sum_a pi(a|s) Q(s, a) = V(s), so the objective at the base threshold is nu . V
    space = StateSpace(CFG)
    ev = discounted_policy_eval(ACTOR, space, 0.99)
    nu = stationary_distribution(ACTOR, space)
    got = weighted_pi_objective(ACTOR.thresholds[0], ACTOR, space, 0.99, nu=nu, ev=ev)
    assert got == pytest.approx(float(nu @ ev.values), rel=1e-12)


def test_sharp_candidate_approaches_hard_objective():
    space = StateSpace(CFG)
    ev = discounted_policy_eval(ACTOR, space, 0.99)
    nu = stationary_distribution(ACTOR, space)
    soft = weighted_pi_objective(3.5, ACTOR, space, 0.99, sigma=1e4, nu=nu, ev=ev)
    hard = hard_pi_objective(3.5, ACTOR, space, 0.99, nu=nu, ev=ev)
    assert soft == pytest.approx(hard, rel=1e-10)


def test_is_unimodal_synthetic():
    x = np.linspace(-3, 3, 31)
    assert is_unimodal(x**2)
    assert is_unimodal(np.maximum(np.abs(x) - 1, 0))  # flat bottom
    assert is_unimodal(x)  # monotone counts
    assert not is_unimodal(np.cos(2 * x))
    assert not is_unimodal([0.0, 1.0, 0.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        is_unimodal([1.0, 2.0])


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(0.1, 10))
def test_is_unimodal_on_shifted_parabolas(c, a):
    x = np.linspace(-10, 10, 41)
    assert is_unimodal(a * (x - c) ** 2)


@pytest.mark.parametrize("gamma", [0.9, 0.99])
@pytest.mark.parametrize("sigma", [10.0, 50.0])
def test_weighted_objective_unimodal_on_grid(gamma, sigma):
    grid = np.arange(0.0, 30.0 + 1e-9, 0.5)
    uni, arg, vals = check_unimodality(SoftThresholdParams((1.0,), sigma), CFG, gamma, grid)
    assert uni
    assert arg == grid[int(np.argmin(vals))]


def test_check_unimodality_grid_validation():
    with pytest.raises(ValueError):
        check_unimodality(ACTOR, CFG, 0.9, [0.0, 1.0])
    with pytest.raises(ValueError):
        check_unimodality(ACTOR, CFG, 0.9, [0.0, 2.0, 1.0])


def test_verify_point_and_report(tmp_path):
    row = verify_point([100, 25], 0.4, 0.99, 10.0, 1.0, buffer_capacity=30)
    assert isinstance(row, VerifierRow)
    assert row.single_sign_change and row.unimodal
    assert row.l_star == 1
    write_verifier_report(tmp_path / "r.csv", [row])
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["gamma", "sigma", "theta_base", "l_star", "single_sign_change", "unimodal", "argmin"]
    assert len(rows) == 2
