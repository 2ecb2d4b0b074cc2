import csv
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hetroute.achq import (
    CriticState,
    HyperParams,
    Schedules,
    StepSchedule,
    achq_step,
    default_radius,
    features,
    initial_actor,
    project,
    run_reference,
    step_value,
    td_error,
    train,
    train_discounted,
)
from hetroute.exact import exact_average_cost, stationary_distribution
from hetroute.mdp import State, StateSpace, SystemConfig
from hetroute.policy import SoftThresholdParams

SMALL = SystemConfig.from_load(0.5, [3, 2, 1], 10)
TWO = SystemConfig.from_load(0.4, [100, 25], 100)


def busy(s):
    return tuple(c == "1" for c in s)


def frozen(beta, zeta=1e-3, alpha=1e-9):
    return Schedules(StepSchedule.constant(alpha), StepSchedule.constant(beta), StepSchedule.constant(zeta))


# -- pieces ------------------------------------------------------------------

def test_features():
    cfg = SystemConfig.from_load(0.4, [100, 25, 5, 1], 100)
    np.testing.assert_allclose(features(State(3, busy("1010")), cfg), np.array([3, 1, 0, 1, 0]) / 104)
    np.testing.assert_array_equal(features(State.empty(4), cfg), np.zeros(5))
    assert np.linalg.norm(features(State(100, busy("1111")), cfg)) < 1


def test_td_error_examples():
    w = np.array([1.0, 2.0])
    assert td_error(4.0, 4.0, np.zeros(2), np.zeros(2), np.zeros(2)) == 0.0
    assert td_error(5.0, 3.0, np.array([0.3, 0.1]), np.array([0.3, 0.1]), w) == pytest.approx(2.0)
    # phi_next . w = 1.2, phi_now . w = 0.7
    assert td_error(5.0, 3.0, np.array([0.0, 0.6]), np.array([0.7, 0.0]), w) == pytest.approx(2.5)


def test_projection():
    w = np.array([3.0, 4.0])
    np.testing.assert_allclose(project(w, 2.5), [1.5, 2.0])
    assert np.linalg.norm(project(w, 2.5)) == pytest.approx(2.5)
    np.testing.assert_array_equal(project(w, 10.0), w)


def test_step_value():
    assert step_value(StepSchedule.decay(1.0, 0.6), 0) == 1.0
    assert step_value(StepSchedule.decay(1.0, 0.6), 31) == pytest.approx(0.125)
    assert step_value(StepSchedule.constant(1e-3), 12345) == 1e-3
    with pytest.raises(ValueError):
        step_value(StepSchedule.constant(1.0), -1)
    with pytest.raises(ValueError):
        StepSchedule(0.0)
    with pytest.raises(ValueError):
        StepSchedule(1.0, 1.0, "decay")
    with pytest.raises(ValueError):
        StepSchedule(1.0, 0.5, "linear")


def test_decaying_schedule_is_two_timescale():
    s = Schedules.decaying()
    assert s.actor.exponent == 0.6 and s.critic.exponent == 0.4
    assert step_value(s.actor, 10**6) < step_value(s.critic, 10**6)


# -- single step -------------------------------------------------------------

def test_zero_td_error_leaves_parameters():
    actor = SoftThresholdParams((2.0,), 1.0)
    s = State(2, busy("10"))
    critic = CriticState(np.zeros(3), 100.0, avg_cost_estimate=3.0)
    r = achq_step(actor, critic, s, TWO, Schedules(), np.random.default_rng(0))
    assert r.delta == 0.0
    assert r.actor == actor
    np.testing.assert_array_equal(r.critic.weights, critic.weights)
    assert r.critic.avg_cost_estimate == 3.0
    assert r.critic.step == 1


def test_forced_fast_route_keeps_theta():
    actor = SoftThresholdParams((2.0,), 1.0)
    critic = CriticState(np.array([5.0, -1.0, 2.0]), 100.0, avg_cost_estimate=0.2)
    r = achq_step(actor, critic, State(3, busy("01")), TWO, Schedules(), np.random.default_rng(1))
    assert r.action == 1
    assert r.delta != 0
    assert r.actor == actor


def test_step_projects_onto_ball():
    actor = SoftThresholdParams((2.0,), 1.0)
    critic = CriticState(np.array([2.0, 0.0, 0.0]), 1.0)
    r = achq_step(actor, critic, State(4, busy("10")), TWO, Schedules(), np.random.default_rng(2))
    assert np.linalg.norm(r.critic.weights) == pytest.approx(1.0)


def test_step_consumes_action_then_event():
    actor = SoftThresholdParams((2.0,), 1.0)
    critic = CriticState(np.zeros(3), 100.0)
    rng = np.random.default_rng(3)
    achq_step(actor, critic, State(2, busy("10")), TWO, Schedules(), rng)
    ref = np.random.default_rng(3)
    ref.random(2)
    assert rng.random() == ref.random()


# -- compiled loop vs reference ---------------------------------------------

@pytest.mark.parametrize("gamma,pod,mask", [(None, None, True), (0.95, None, True), (None, 2, True), (None, 2, False)])
def test_compiled_loop_matches_reference(gamma, pod, mask):
    hp = HyperParams(sigma=1.5, schedules=Schedules(StepSchedule.constant(0.05), StepSchedule.decay(0.5, 0.4),
                                                    StepSchedule.constant(0.05)),
                     horizon=3000, seed=4, log_interval=0, gamma=gamma, pod_d=pod, mask_critic=mask, radius=30.0)
    a0 = SoftThresholdParams((1.0, 2.5), 1.5)
    fast, rec = train(SMALL, a0, hp)
    slow, critic, state = run_reference(SMALL, a0, hp, hp.horizon)
    np.testing.assert_allclose(fast.thresholds, slow.thresholds, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(rec.final_critic.weights, critic.weights, rtol=1e-12, atol=1e-12)
    assert rec.final_critic.avg_cost_estimate == pytest.approx(critic.avg_cost_estimate, rel=1e-12)
    assert rec.final_state == state


def test_deterministic_and_log_interval_independent():
    hp = HyperParams(horizon=50_000, seed=9, log_interval=1000)
    a, r1 = train(SMALL, None, hp)
    b, r2 = train(SMALL, None, hp)
    c, _ = train(SMALL, None, replace(hp, log_interval=777))
    assert a == b == c
    np.testing.assert_array_equal(r1.thetas, r2.thetas)
    np.testing.assert_array_equal(r1.eta, r2.eta)
    assert np.all(np.diff(r1.steps) > 0)


def test_zero_horizon_returns_initial_actor():
    a0 = SoftThresholdParams((1.0, 2.0), 1.0)
    a, rec = train(SMALL, a0, HyperParams(horizon=0))
    assert a == a0
    assert len(rec.steps) == 0


def test_train_validation():
    with pytest.raises(ValueError):
        train(SMALL, SoftThresholdParams((1.0,), 1.0), HyperParams(horizon=10))
    with pytest.raises(ValueError):
        train(SMALL, None, HyperParams(horizon=10, pod_d=4))
    with pytest.raises(ValueError):
        train_discounted(SMALL, None, HyperParams(horizon=10), gamma=1.0)


def test_critic_norm_bounded_and_eta_tracks_costs():
    hp = HyperParams(horizon=200_000, seed=1, log_interval=100, radius=0.5,
                     schedules=frozen(beta=5.0, zeta=1e-2, alpha=1e-3))
    _, rec = train(SMALL, None, hp)
    assert np.all(rec.omega_norm <= 0.5 + 1e-12)
    late = rec.eta[len(rec.eta) // 10:]
    assert late.min() >= 0 and late.max() <= SMALL.buffer_capacity + SMALL.k


def test_initial_actor():
    cfg = SystemConfig.from_load(0.4, [100, 25, 5, 1], 100)
    assert initial_actor(cfg).thresholds == (4.0, 25.0, 100.0)
    assert initial_actor(cfg, init="zero").thresholds == (0.0, 0.0, 0.0)
    r = initial_actor(cfg, init="random", seed=3).thresholds
    assert all(0 <= t <= 100 for t in r)
    with pytest.raises(ValueError):
        initial_actor(cfg, init="bogus")
    assert default_radius(cfg) == 1040.0


def test_hyperparams_json():
    hp = HyperParams.from_dict({"sigma": 2.0, "alpha": 1e-4, "beta": 1e-2, "zeta": 1e-1, "radius": 50,
                                "horizon": 1000, "seed": 7, "gamma": 0.9, "schedule": "decay"})
    assert hp.schedules.actor.mode == "decay" and hp.schedules.critic.base == 1e-2
    d = hp.to_dict()
    assert d["gamma"] == 0.9 and d["schedule"] == "decay" and d["seed"] == 7
    assert HyperParams.from_dict(d).to_dict() == d
    with pytest.raises(ValueError):
        HyperParams.from_dict({"schedule": "cosine"})
    with pytest.raises(ValueError):
        HyperParams.from_dict({"gamma": 1.5})


def test_train_record_csv(tmp_path):
    _, rec = train(SMALL, None, HyperParams(horizon=5000, log_interval=1000))
    rec.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["step", "avg_cost_running", "eta", "theta_2", "theta_3", "omega_norm"]
    assert [r[0] for r in rows[1:]] == ["1000", "2000", "3000", "4000", "5000"]


# -- statistical behaviour ---------------------------------------------------

def differential_values(actor, space):
    table = actor.action_table(space)
    nu = stationary_distribution(table, space)
    P = space.transition_matrix(table)
    c = space.cost.astype(float)
    eta = float(nu @ c)
    M = (sp.eye(space.n) - P).tocsr()[1:, 1:].tocsc()
    return np.concatenate([[0.0], spla.spsolve(M, (c - eta)[1:])]), nu, eta


def test_frozen_actor_critic_converges():
    space = StateSpace(SMALL)
    actor = SoftThresholdParams((1.0, 3.0), 1.0)
    hp = HyperParams(horizon=2_000_000, seed=0, log_interval=0, schedules=frozen(beta=0.1))
    _, rec = train(SMALL, actor, hp)
    V, nu, eta = differential_values(actor, space)
    assert rec.final_critic.avg_cost_estimate == pytest.approx(eta, rel=0.02)
    phi = np.column_stack([space.queue_len, space.busy]) / (SMALL.buffer_capacity + SMALL.k)
    live = nu > 0
    r = np.corrcoef(phi[live] @ rec.final_critic.weights, V[live])[0, 1]
    assert r * r >= 0.9


def test_discounted_critic_near_zero_gamma_fits_immediate_cost():
    space = StateSpace(SMALL)
    actor = SoftThresholdParams((1.0, 3.0), 1.0)
    nu = stationary_distribution(actor, space)
    phi = np.column_stack([space.queue_len, space.busy]) / (SMALL.buffer_capacity + SMALL.k)
    target = np.linalg.solve(phi.T @ (nu[:, None] * phi), phi.T @ (nu * space.cost))
    hp = HyperParams(horizon=500_000, seed=0, log_interval=0, gamma=1e-9, schedules=frozen(beta=1.0))
    _, rec = train(SMALL, actor, hp)
    np.testing.assert_allclose(rec.final_critic.weights, target, rtol=1e-6)


@pytest.mark.parametrize("theta", [1.0, 5.0])
@pytest.mark.parametrize("beta", [5.0, 50.0])
def test_update_direction_agrees_with_exact_gradient(theta, beta):
    # with a tiny actor step the mean of -delta * grad log pi is recovered from the parameter change
    alpha, n = 1e-9, 1_000_000
    actor = SoftThresholdParams((theta,), 1.0)
    hp = HyperParams(horizon=n, seed=0, log_interval=0, schedules=frozen(beta=beta, alpha=alpha))
    moved, _ = train(TWO, actor, hp)
    direction = (moved.thresholds[0] - theta) / (alpha * n)
    space = StateSpace(TWO)
    J = lambda t: exact_average_cost(SoftThresholdParams((t,), 1.0), space)  # noqa: E731
    descent = -(J(theta + 0.5) - J(theta - 0.5))
    assert np.sign(direction) == np.sign(descent)
