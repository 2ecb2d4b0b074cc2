"""Monte Carlo evaluation of routing policies on the uniformized chain.

The simulator tabulates the policy once (``action_table``) and runs a compiled
epoch loop. Time-averages over uniformized epochs equal continuous-time
averages, so Little's law turns mean occupancy into a response time.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _kernels
from .mdp import StateSpace, SystemConfig
from .policy import PowerOfD, policy_name

N_BATCHES = 30
CHUNK = 1 << 18


@dataclass
class TrajectoryStats:
    epochs: int
    avg_jobs: float
    response_time: float
    ci_halfwidth: float
    seed: int
    occupancy: np.ndarray | None = None

    @property
    def response_time_ci(self) -> float:
        """95% halfwidth on the response-time scale."""
        return self.ci_halfwidth


def _policy_table(policy, space: StateSpace) -> tuple[np.ndarray, int]:
    """Base action table plus the PoD sample size (0 when the policy sees every server)."""
    if isinstance(policy, PowerOfD):
        if not 1 <= policy.d <= space.k:
            raise ValueError(f"d must lie in [1, {space.k}], got {policy.d}")
        return policy.base.action_table(space), policy.d
    return policy.action_table(space), 0


def batch_means_ci(batch_sums: np.ndarray, batch_counts: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Point estimate and t-based halfwidth from per-batch totals."""
    counts = batch_counts[batch_counts > 0]
    means = batch_sums[batch_counts > 0] / counts
    total = float(batch_sums.sum() / batch_counts.sum())
    if means.size < 2:
        return total, 0.0
    se = means.std(ddof=1) / math.sqrt(means.size)
    return total, float(stats.t.ppf(0.5 + level / 2, means.size - 1) * se)


def simulate(policy, config: SystemConfig, horizon: int, burn_in: int | None = None, seed: int = 0,
             space: StateSpace | None = None) -> TrajectoryStats:
    """Run ``horizon`` epochs from the empty state and average jobs after ``burn_in``.

    ``burn_in`` defaults to 10% of the horizon. The confidence interval is a 95%
    batch-means interval over 30 equal batches of the counted window.
    """
    if burn_in is None:
        burn_in = horizon // 10
    if not horizon > burn_in >= 0:
        raise ValueError(f"need horizon > burn_in >= 0, got horizon={horizon}, burn_in={burn_in}")
    space = space or StateSpace(config)
    table, d = _policy_table(policy, space)
    cum = np.cumsum(table, axis=1)
    last = np.array([np.nonzero(row > 0)[0].max() for row in table], dtype=np.int64)
    mu = np.asarray(config.service_rates, dtype=float)

    window = horizon - burn_in
    n_batches = min(N_BATCHES, window)
    batch_size = window // n_batches
    batch_sums = np.zeros(n_batches)
    occupancy = np.zeros(space.n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    L, bits = 0, 0
    done = 0
    while done < horizon:
        m = min(CHUNK, horizon - done)
        u = rng.random((m, d + 2))
        L, bits = _kernels.simulate_run(cum, last, mu, config.arrival_rate, config.buffer_capacity,
                                        L, bits, u, d, done, burn_in, batch_size, n_batches,
                                        batch_sums, occupancy)
        done += m
    counts = np.full(n_batches, batch_size, dtype=float)
    counts[-1] += window - batch_size * n_batches
    avg, half = batch_means_ci(batch_sums, counts)
    lam = config.arrival_rate
    return TrajectoryStats(horizon, avg, avg / lam, half / lam, seed, occupancy / window)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass
class ComparisonRow:
    policy_name: str
    seed_count: int
    response_time_mean: float
    response_time_se: float
    improvement_vs_reference_pct: float
    runs: list[TrajectoryStats]


def _workers() -> int:
    import os

    env = os.environ.get("HETROUTE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


def compare(policies, config: SystemConfig, horizon: int, seeds, reference: str | None = None,
            burn_in: int | None = None) -> list[ComparisonRow]:
    """Simulate every policy under every seed and summarize response times.

    ``policies`` is a list of ``(name, policy)`` pairs or of policies carrying a
    ``name``. Improvement is ``100 * (ref - T) / ref`` against ``reference``
    (default: the first policy). Replications run on a thread pool; the compiled
    kernel releases no shared state, so results do not depend on scheduling.
    """
    named = [(p if isinstance(p, tuple) else (policy_name(p), p)) for p in policies]
    seeds = list(seeds)
    if not named or not seeds:
        raise ValueError("need at least one policy and one seed")
    space = StateSpace(config)
    jobs = [(i, s) for i in range(len(named)) for s in seeds]
    with ThreadPoolExecutor(_workers()) as pool:
        runs = list(pool.map(lambda js: simulate(named[js[0]][1], config, horizon, burn_in, js[1], space), jobs))
    by_policy: list[list[TrajectoryStats]] = [[] for _ in named]
    for (i, _), r in zip(jobs, runs):
        by_policy[i].append(r)
    means = [float(np.mean([r.response_time for r in rs])) for rs in by_policy]
    ref_name = reference or named[0][0]
    names = [n for n, _ in named]
    if ref_name not in names:
        raise ValueError(f"reference policy {ref_name!r} not among {names}")
    ref = means[names.index(ref_name)]
    rows = []
    for (name, _), rs, m in zip(named, by_policy, means):
        t = np.array([r.response_time for r in rs])
        se = float(t.std(ddof=1) / math.sqrt(t.size)) if t.size > 1 else rs[0].ci_halfwidth / 1.96
        rows.append(ComparisonRow(name, len(rs), m, se, 100.0 * (ref - m) / ref, rs))
    return rows


def write_comparison(path, rows: list[ComparisonRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy_name", "seed_count", "response_time_mean", "response_time_se",
                    "improvement_vs_reference_pct"])
        for r in rows:
            w.writerow([r.policy_name, r.seed_count, repr(r.response_time_mean), repr(r.response_time_se),
                        repr(r.improvement_vs_reference_pct)])
