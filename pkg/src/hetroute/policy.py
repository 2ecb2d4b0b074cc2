"""Routing policies.

Every policy here can produce an action distribution for a single state
(``dist``) and a dense ``(n, k+1)`` action-probability table over the whole
state space (``action_table``); column 0 is Wait and column i is Route(i).
The exact solvers and the compiled simulator consume the tables.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .mdp import WAIT, State, StateSpace, SystemConfig, fastest_available, valid_actions


@dataclass(frozen=True)
class SoftThresholdParams:
    """Thresholds for servers 2..k (server 1 never waits) and the sigmoid sharpness."""

    thresholds: tuple[float, ...]
    sharpness: float = 1.0

    def __post_init__(self):
        th = tuple(float(t) for t in np.ravel(self.thresholds))
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "sharpness", float(self.sharpness))
        if not self.sharpness > 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if not all(np.isfinite(th)):
            raise ValueError("thresholds must be finite")

    name = "soft-threshold"

    @property
    def full_thresholds(self) -> np.ndarray:
        """Length-k vector with the implicit zero for server 1 prepended."""
        return np.concatenate([[0.0], self.thresholds])

    def with_thresholds(self, thresholds) -> "SoftThresholdParams":
        return SoftThresholdParams(tuple(thresholds), self.sharpness)

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "sharpness": self.sharpness}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftThresholdParams":
        return cls(tuple(d["thresholds"]), d.get("sharpness", 1.0))

    def dist(self, state: State, config: SystemConfig) -> dict[int, float]:
        return soft_threshold_dist(self, state, config)

    def action_table(self, space: StateSpace) -> np.ndarray:
        if len(self.thresholds) != space.k - 1:
            raise ValueError(f"expected {space.k - 1} thresholds, got {len(self.thresholds)}")
        table = np.zeros((space.n, space.k + 1))
        f = space.fastest_idle
        can_route = (space.queue_len > 0) & (f >= 0)
        table[~can_route, 0] = 1.0
        th = self.full_thresholds
        rows = np.nonzero(can_route)[0]
        fr = f[rows]
        p = expit(self.sharpness * (space.queue_len[rows] - th[fr]))
        p[fr == 0] = 1.0
        table[rows, fr + 1] = p
        table[rows, 0] = 1.0 - p
        return table


def route_probability(params: SoftThresholdParams, queue_len: int, server: int) -> float:
    """Sigmoid routing probability toward ``server`` (1-based, >= 2)."""
    theta = params.thresholds[server - 2]
    return float(expit(params.sharpness * (queue_len - theta)))


def soft_threshold_dist(params: SoftThresholdParams, state: State, config: SystemConfig) -> dict[int, float]:
    f = fastest_available(state, config)
    if state.queue_len == 0 or f is None:
        return {WAIT: 1.0}
    if f == 1:
        return {1: 1.0}
    p = route_probability(params, state.queue_len, f)
    dist = {}
    if p > 0:
        dist[f] = p
    if p < 1:
        dist[WAIT] = 1.0 - p
    return dist


def grad_log_pi(params: SoftThresholdParams, state: State, action: int, config: SystemConfig) -> np.ndarray:
    """Score function of the soft-threshold policy w.r.t. the k-1 thresholds."""
    grad = np.zeros(len(params.thresholds))
    f = fastest_available(state, config)
    if state.queue_len == 0 or f is None or f == 1:
        if action != _forced_action(state, f):
            raise ValueError(f"action {action} has zero probability in {state!r}")
        return grad
    p = route_probability(params, state.queue_len, f)
    sigma = params.sharpness
    if action == f and p > 0:
        grad[f - 2] = -sigma * (1.0 - p)
    elif action == WAIT and p < 1:
        grad[f - 2] = sigma * p
    else:
        raise ValueError(f"action {action} has zero probability in {state!r}")
    return grad


def _forced_action(state: State, f: int | None) -> int:
    if state.queue_len == 0 or f is None:
        return WAIT
    return 1


def fas_action(state: State, config: SystemConfig | None = None) -> int:
    f = fastest_available(state, config)
    if state.queue_len > 0 and f is not None:
        return f
    return WAIT


def rsrt_thresholds(config: SystemConfig) -> np.ndarray:
    """Light-traffic break-even thresholds ``sum(mu_1..mu_{f-1}) / mu_f``."""
    mu = np.asarray(config.service_rates)
    return np.concatenate([[0.0], np.cumsum(mu)[:-1] / mu[1:]])


def hard_threshold_action(thresholds: Sequence[float], state: State, config: SystemConfig | None = None) -> int:
    f = fastest_available(state, config)
    if state.queue_len > 0 and f is not None and state.queue_len > thresholds[f - 1]:
        return f
    return WAIT


def sample_from(dist: dict[int, float], u: float) -> int:
    """Map a uniform variate to an action, scanning Wait first then servers ascending."""
    acc = 0.0
    chosen = None
    for a in sorted(dist):
        acc += dist[a]
        chosen = a
        if u < acc:
            return a
    return chosen


class FASPolicy:
    name = "FAS"

    def dist(self, state: State, config: SystemConfig) -> dict[int, float]:
        return {fas_action(state, config): 1.0}

    def action_table(self, space: StateSpace) -> np.ndarray:
        return HardThresholdPolicy(np.zeros(space.k)).action_table(space)


class HardThresholdPolicy:
    """Deterministic rule: route to the fastest idle server f iff ``L > thresholds[f]``."""

    def __init__(self, thresholds: Sequence[float], name: str = "threshold"):
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.name = name

    @classmethod
    def rsrt(cls, config: SystemConfig) -> "HardThresholdPolicy":
        return cls(rsrt_thresholds(config), name="RSRT")

    def dist(self, state: State, config: SystemConfig) -> dict[int, float]:
        return {hard_threshold_action(self.thresholds, state, config): 1.0}

    def action_table(self, space: StateSpace) -> np.ndarray:
        if len(self.thresholds) != space.k:
            raise ValueError(f"expected {space.k} thresholds, got {len(self.thresholds)}")
        table = np.zeros((space.n, space.k + 1))
        f = space.fastest_idle
        route = (space.queue_len > 0) & (f >= 0)
        route[route] = space.queue_len[route] > self.thresholds[f[route]]
        table[~route, 0] = 1.0
        rows = np.nonzero(route)[0]
        table[rows, f[rows] + 1] = 1.0
        return table


class TabularPolicy:
    """One deterministic action per enumerated state."""

    def __init__(self, actions: np.ndarray, name: str = "tabular"):
        self.actions = np.asarray(actions, dtype=np.int64)
        self.name = name

    def dist(self, state: State, config: SystemConfig) -> dict[int, float]:
        space = StateSpace(config)
        return {int(self.actions[space.index_of(state)]): 1.0}

    def action_table(self, space: StateSpace) -> np.ndarray:
        if self.actions.shape != (space.n,):
            raise ValueError("tabular policy does not match the state space")
        table = np.zeros((space.n, space.k + 1))
        table[np.arange(space.n), self.actions] = 1.0
        return table

    @classmethod
    def from_policy(cls, policy, space: StateSpace, name: str | None = None) -> "TabularPolicy":
        table = policy.action_table(space)
        if not np.all((table == 0) | (table == 1)):
            raise ValueError("policy is randomized; cannot tabulate deterministically")
        return cls(table.argmax(axis=1), name or getattr(policy, "name", "tabular"))


def pod_sample(k: int, d: int, uniforms: Sequence[float]) -> list[int]:
    """0-based server indices chosen by a partial Fisher-Yates shuffle (one uniform per pick)."""
    idx = list(range(k))
    for i in range(d):
        j = i + min(int(uniforms[i] * (k - i)), k - i - 1)
        idx[i], idx[j] = idx[j], idx[i]
    return sorted(idx[:d])


def mask_state(state: State, sampled: Sequence[int]) -> State:
    keep = set(sampled)
    return State(state.queue_len, tuple(b or (i not in keep) for i, b in enumerate(state.busy)))


def pod_restrict(state: State, d: int, rng: np.random.Generator) -> State:
    """View of ``state`` where only ``d`` uniformly sampled servers are visible.

    Unsampled servers appear busy, so any policy applied to the view routes only
    among sampled idle servers. Consumes exactly ``d`` uniforms.
    """
    k = len(state.busy)
    if not 1 <= d <= k:
        raise ValueError(f"d must lie in [1, {k}], got {d}")
    return mask_state(state, pod_sample(k, d, rng.random(d)))


class PowerOfD:
    """Wraps a base policy so it only observes ``d`` servers sampled per epoch."""

    def __init__(self, base, d: int, name: str | None = None):
        self.base = base
        self.d = int(d)
        self.name = name or f"{getattr(base, 'name', 'policy')}-PoD{d}"

    def dist(self, state: State, config: SystemConfig) -> dict[int, float]:
        k = config.k
        subsets = list(itertools.combinations(range(k), self.d))
        out: dict[int, float] = {}
        for sub in subsets:
            for a, p in self.base.dist(mask_state(state, sub), config).items():
                out[a] = out.get(a, 0.0) + p / len(subsets)
        return out

    def action_table(self, space: StateSpace) -> np.ndarray:
        """Exact action distribution averaged over all equally likely sampled subsets."""
        k = space.k
        if not 1 <= self.d <= k:
            raise ValueError(f"d must lie in [1, {k}], got {self.d}")
        base = self.base.action_table(space)
        table = np.zeros_like(base)
        subsets = list(itertools.combinations(range(k), self.d))
        for sub in subsets:
            hidden = ((1 << k) - 1) & ~sum(1 << j for j in sub)
            masked = (space.queue_len << k) | (space.bits | hidden)
            table += base[masked]
        return table / len(subsets)


def policy_name(policy) -> str:
    return getattr(policy, "name", type(policy).__name__)


def check_distribution(dist: dict[int, float], state: State, tol: float = 1e-12) -> None:
    if abs(sum(dist.values()) - 1.0) > tol:
        raise AssertionError(f"distribution sums to {sum(dist.values())}")
    if not set(a for a, p in dist.items() if p > 0) <= valid_actions(state):
        raise AssertionError("distribution supported outside the feasible actions")
