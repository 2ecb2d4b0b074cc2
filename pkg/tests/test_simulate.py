import csv

import numpy as np
import pytest

from hetroute.exact import exact_average_cost, relative_value_iteration, stationary_distribution
from hetroute.mdp import State, StateSpace, SystemConfig, cost, sample_next
from hetroute.policy import (
    FASPolicy,
    HardThresholdPolicy,
    PowerOfD,
    SoftThresholdParams,
    mask_state,
    pod_sample,
    sample_from,
)
from hetroute.simulate import (
    batch_means_ci,
    compare,
    simulate,
    total_variation,
    write_comparison,
)

CFG = SystemConfig.from_load(0.5, [3, 2, 1], 10)


def reference_simulation(policy, config, horizon, burn_in, seed, d=0):
    """Plain-Python epoch loop over the same uniform layout as the compiled kernel."""
    rng = np.random.default_rng(seed)
    u = rng.random((horizon, d + 2))
    s = State.empty(config.k)
    total = 0
    for t in range(horizon):
        view = mask_state(s, pod_sample(config.k, d, u[t, :d])) if d else s
        a = sample_from(policy.dist(view, config), u[t, d])
        if t >= burn_in:
            total += cost(s)
        s = sample_next(s, a, config, _Fixed(u[t, d + 1]))
    return total / (horizon - burn_in)


class _Fixed:
    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u


@pytest.mark.parametrize("policy,d", [(FASPolicy(), 0), (SoftThresholdParams((1.0, 2.5), 1.0), 0),
                                      (PowerOfD(HardThresholdPolicy([0, 1, 3]), 2), 2)])
def test_kernel_matches_python_loop(policy, d):
    got = simulate(policy, CFG, 20_000, 2_000, seed=3)
    base = policy.base if d else policy
    assert got.avg_jobs == pytest.approx(reference_simulation(base, CFG, 20_000, 2_000, 3, d), rel=1e-12)


@pytest.mark.parametrize("policy", [FASPolicy(), HardThresholdPolicy.rsrt(CFG), SoftThresholdParams((1.0, 2.5), 0.8),
                                    PowerOfD(FASPolicy(), 2)])
def test_agrees_with_exact_average_cost(policy):
    stats = simulate(policy, CFG, 1_000_000, seed=11)
    exact = exact_average_cost(policy, CFG)
    assert abs(stats.avg_jobs - exact) <= 3 * stats.ci_halfwidth * CFG.arrival_rate
    assert stats.response_time == pytest.approx(stats.avg_jobs / CFG.arrival_rate)
    assert 0 <= stats.avg_jobs <= CFG.buffer_capacity + CFG.k


def test_occupancy_converges_to_stationary_distribution():
    pol = SoftThresholdParams((1.0, 2.5), 1.0)
    stats = simulate(pol, CFG, 10_000_000, seed=5)
    assert total_variation(stats.occupancy, stationary_distribution(pol, CFG)) < 0.01


def test_degenerate_window_counts_one_state():
    stats = simulate(FASPolicy(), CFG, 5, burn_in=4, seed=0)
    rng = np.random.default_rng(0)
    u = rng.random((5, 2))
    s = State.empty(3)
    for t in range(4):
        a = sample_from(FASPolicy().dist(s, CFG), u[t, 0])
        s = sample_next(s, a, CFG, _Fixed(u[t, 1]))
    assert stats.avg_jobs == cost(s)
    assert stats.ci_halfwidth == 0.0


def test_horizon_validation_and_default_burn_in():
    with pytest.raises(ValueError):
        simulate(FASPolicy(), CFG, 10, burn_in=10)
    with pytest.raises(ValueError):
        simulate(FASPolicy(), CFG, 10, burn_in=-1)
    a = simulate(FASPolicy(), CFG, 100_000, seed=1)
    b = simulate(FASPolicy(), CFG, 100_000, burn_in=10_000, seed=1)
    assert a.avg_jobs == b.avg_jobs


def test_deterministic_per_seed():
    a = simulate(FASPolicy(), CFG, 50_000, seed=8)
    b = simulate(FASPolicy(), CFG, 50_000, seed=8)
    c = simulate(FASPolicy(), CFG, 50_000, seed=9)
    assert a.avg_jobs == b.avg_jobs and a.ci_halfwidth == b.ci_halfwidth
    assert a.avg_jobs != c.avg_jobs


def test_doubling_horizon_is_consistent():
    a = simulate(FASPolicy(), CFG, 500_000, seed=2)
    b = simulate(FASPolicy(), CFG, 1_000_000, seed=2)
    assert abs(a.avg_jobs - b.avg_jobs) <= 3 * (a.ci_halfwidth + b.ci_halfwidth) * CFG.arrival_rate


def test_batch_means_ci():
    sums = np.array([10.0, 12.0, 14.0])
    counts = np.array([10.0, 10.0, 10.0])
    mean, half = batch_means_ci(sums, counts)
    assert mean == pytest.approx(1.2)
    # t quantile with 2 dof times the standard error of (1.0, 1.2, 1.4)
    assert half == pytest.approx(4.302652729911275 * 0.2 / np.sqrt(3))


def test_compare_table(tmp_path):
    cfg = SystemConfig.from_load(0.4, [100, 100, 1, 1], 100)
    rvi = relative_value_iteration(cfg).policy
    rows = compare([("RVI", rvi), ("FAS", FASPolicy()), ("RSRT", HardThresholdPolicy.rsrt(cfg)),
                    ("FAS again", FASPolicy())], cfg, 400_000, seeds=[0, 1, 2], reference="FAS")
    by = {r.policy_name: r for r in rows}
    assert by["FAS"].improvement_vs_reference_pct == 0.0
    assert by["RVI"].response_time_mean < 0.7 * by["FAS"].response_time_mean
    assert by["RSRT"].response_time_mean < 0.7 * by["FAS"].response_time_mean
    assert by["RVI"].response_time_mean <= by["RSRT"].response_time_mean + 3 * by["RSRT"].response_time_se
    assert [r.avg_jobs for r in by["FAS"].runs] == [r.avg_jobs for r in by["FAS again"].runs]
    write_comparison(tmp_path / "c.csv", rows)
    head = next(csv.reader(open(tmp_path / "c.csv")))
    assert head == ["policy_name", "seed_count", "response_time_mean", "response_time_se",
                    "improvement_vs_reference_pct"]
    with pytest.raises(ValueError):
        compare([], cfg, 10, [0])
    with pytest.raises(ValueError):
        compare([FASPolicy()], cfg, 10, [0], reference="nope")


def test_pod_rejects_bad_d():
    with pytest.raises(ValueError):
        simulate(PowerOfD(FASPolicy(), 4), CFG, 100)


def test_space_reuse():
    space = StateSpace(CFG)
    assert simulate(FASPolicy(), CFG, 10_000, seed=1, space=space).avg_jobs == \
        simulate(FASPolicy(), CFG, 10_000, seed=1).avg_jobs
