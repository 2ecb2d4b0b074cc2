"""Uniformized discrete-time MDP for a central queue feeding k heterogeneous servers.

A state is ``(L, B_1..B_k)``: ``L`` jobs waiting in the queue and one busy flag
per server. Servers are indexed 1..k in non-increasing order of service rate.
Actions are plain integers: ``0`` waits, ``i >= 1`` routes the head-of-line job
to server ``i``.

Each epoch the action is applied first, then exactly one event is drawn: an
arrival with probability ``lam / Lam`` or a (possibly fictitious) departure at
server ``j`` with probability ``mu_j / Lam``, where ``Lam = lam + sum(mu)``.
Arrivals to a full buffer are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

WAIT = 0


class InfeasibleAction(ValueError):
    """Raised when an action is not available in the given state."""


@dataclass(frozen=True)
class SystemConfig:
    arrival_rate: float
    service_rates: tuple[float, ...]
    buffer_capacity: int

    def __post_init__(self):
        rates = tuple(float(m) for m in self.service_rates)
        object.__setattr__(self, "service_rates", rates)
        object.__setattr__(self, "arrival_rate", float(self.arrival_rate))
        if len(rates) < 1:
            raise ValueError("need at least one server")
        if not self.arrival_rate > 0:
            raise ValueError(f"arrival_rate must be positive, got {self.arrival_rate}")
        if any(not m > 0 for m in rates):
            raise ValueError(f"service rates must be positive, got {rates}")
        if any(a < b for a, b in zip(rates, rates[1:])):
            raise ValueError(f"service rates must be sorted non-increasing, got {rates}")
        if self.arrival_rate >= sum(rates):
            raise ValueError(
                f"unstable system: arrival_rate {self.arrival_rate} >= total service {sum(rates)}"
            )
        if int(self.buffer_capacity) != self.buffer_capacity or self.buffer_capacity < 1:
            raise ValueError(f"buffer_capacity must be an integer >= 1, got {self.buffer_capacity}")
        object.__setattr__(self, "buffer_capacity", int(self.buffer_capacity))

    @classmethod
    def from_load(cls, load: float, service_rates: Sequence[float], buffer_capacity: int = 100):
        """Build a config with ``arrival_rate = load * sum(service_rates)``."""
        rates = tuple(float(m) for m in service_rates)
        return cls(load * sum(rates), rates, buffer_capacity)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        if "service_rates" not in d:
            raise ValueError("config needs 'service_rates'")
        cap = d.get("buffer_capacity", 100)
        if "arrival_rate" in d:
            return cls(d["arrival_rate"], tuple(d["service_rates"]), cap)
        if "load" in d:
            return cls.from_load(d["load"], d["service_rates"], cap)
        raise ValueError("config needs 'arrival_rate' or 'load'")

    def to_dict(self) -> dict:
        return {
            "arrival_rate": self.arrival_rate,
            "service_rates": list(self.service_rates),
            "buffer_capacity": self.buffer_capacity,
        }

    @property
    def k(self) -> int:
        return len(self.service_rates)

    @property
    def total_service_rate(self) -> float:
        return sum(self.service_rates)

    @property
    def load(self) -> float:
        return self.arrival_rate / self.total_service_rate

    @property
    def uniform_rate(self) -> float:
        return self.arrival_rate + self.total_service_rate

    @property
    def num_states(self) -> int:
        return (self.buffer_capacity + 1) * 2**self.k


@dataclass(frozen=True)
class State:
    queue_len: int
    busy: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "busy", tuple(bool(b) for b in self.busy))
        if self.queue_len < 0:
            raise ValueError("queue_len must be non-negative")

    @classmethod
    def empty(cls, k: int) -> "State":
        return cls(0, (False,) * k)

    def as_vector(self) -> np.ndarray:
        return np.array((self.queue_len, *self.busy), dtype=float)

    def __repr__(self):
        return f"State({self.queue_len}, {''.join('1' if b else '0' for b in self.busy)})"


def check_state(state: State, config: SystemConfig) -> None:
    if len(state.busy) != config.k:
        raise ValueError(f"state has {len(state.busy)} busy flags, config has k={config.k}")
    if not 0 <= state.queue_len <= config.buffer_capacity:
        raise ValueError(f"queue_len {state.queue_len} outside [0, {config.buffer_capacity}]")


def event_probs(config: SystemConfig) -> tuple[float, np.ndarray]:
    """Per-epoch probabilities of an arrival and of a departure at each server."""
    total = config.uniform_rate
    return config.arrival_rate / total, np.asarray(config.service_rates) / total


def fastest_available(state: State, config: SystemConfig | None = None) -> int | None:
    """1-based index of the fastest idle server, or None when every server is busy.

    Rates are sorted non-increasing, so this is the first idle index; equal rates
    resolve toward the smaller index.
    """
    for i, b in enumerate(state.busy):
        if not b:
            return i + 1
    return None


def valid_actions(state: State) -> set[int]:
    acts = {WAIT}
    if state.queue_len > 0:
        acts.update(i + 1 for i, b in enumerate(state.busy) if not b)
    return acts


def cost(state: State) -> int:
    """Jobs in the system: queue length plus busy servers."""
    return state.queue_len + sum(state.busy)


def apply_action(state: State, action: int) -> State:
    if action == WAIT:
        return state
    if action not in valid_actions(state):
        raise InfeasibleAction(f"action {action} infeasible in {state!r}")
    busy = list(state.busy)
    busy[action - 1] = True
    return State(state.queue_len - 1, tuple(busy))


def _event_outcomes(post: State, config: SystemConfig):
    """Yield (probability, successor) for the arrival and each departure event."""
    p_arr, p_dep = event_probs(config)
    yield p_arr, State(min(post.queue_len + 1, config.buffer_capacity), post.busy)
    for j in range(config.k):
        if post.busy[j]:
            busy = list(post.busy)
            busy[j] = False
            yield p_dep[j], State(post.queue_len, tuple(busy))
        else:
            yield p_dep[j], post


def transition(state: State, action: int, config: SystemConfig) -> dict[State, float]:
    """Exact successor distribution after applying ``action`` and one event."""
    check_state(state, config)
    post = apply_action(state, action)
    dist: dict[State, float] = {}
    for p, nxt in _event_outcomes(post, config):
        dist[nxt] = dist.get(nxt, 0.0) + p
    return dist


def sample_next(state: State, action: int, config: SystemConfig, rng: np.random.Generator) -> State:
    """Draw one successor; consumes exactly one uniform variate from ``rng``."""
    check_state(state, config)
    post = apply_action(state, action)
    u = rng.random()
    acc = 0.0
    last = None
    for p, nxt in _event_outcomes(post, config):
        acc += p
        last = nxt
        if u < acc:
            return nxt
    # u landed in the rounding gap above the cumulative sum
    return last


class StateSpace:
    """Enumeration of all ``(L_max + 1) * 2**k`` states plus vectorized lookups.

    State index is ``L * 2**k + bits`` where bit ``i-1`` of ``bits`` is ``B_i``.
    """

    def __init__(self, config: SystemConfig):
        self.config = config
        self.k = config.k
        self.n = config.num_states
        idx = np.arange(self.n)
        self.queue_len = idx >> self.k
        self.bits = idx & ((1 << self.k) - 1)
        self.busy = ((self.bits[:, None] >> np.arange(self.k)) & 1).astype(bool)
        self.cost = self.queue_len + self.busy.sum(axis=1)

    def index_of(self, state: State) -> int:
        check_state(state, self.config)
        bits = sum(1 << i for i, b in enumerate(state.busy) if b)
        return (state.queue_len << self.k) | bits

    def state_of(self, index: int) -> State:
        if not 0 <= index < self.n:
            raise IndexError(f"state index {index} out of range [0, {self.n})")
        return State(int(index) >> self.k, tuple(bool((index >> i) & 1) for i in range(self.k)))

    def states(self) -> list[State]:
        return [self.state_of(i) for i in range(self.n)]

    def __len__(self):
        return self.n

    @cached_property
    def arrival_next(self) -> np.ndarray:
        """Index reached from each (post-action) state by an arrival."""
        lm = self.config.buffer_capacity
        return (np.minimum(self.queue_len + 1, lm) << self.k) | self.bits

    @cached_property
    def departure_next(self) -> np.ndarray:
        """``(n, k)`` array: index reached by a departure at server j (j 0-based)."""
        cleared = self.bits[:, None] & ~(1 << np.arange(self.k))[None, :]
        return (self.queue_len[:, None] << self.k) | cleared

    @cached_property
    def route_next(self) -> np.ndarray:
        """``(n, k)`` post-action index for routing to server j, -1 where infeasible."""
        out = np.full((self.n, self.k), -1, dtype=np.int64)
        for j in range(self.k):
            ok = (self.queue_len > 0) & ~self.busy[:, j]
            out[ok, j] = ((self.queue_len[ok] - 1) << self.k) | (self.bits[ok] | (1 << j))
        return out

    @cached_property
    def fastest_idle(self) -> np.ndarray:
        """0-based fastest idle server per state, -1 if none."""
        idle = ~self.busy
        return np.where(idle.any(axis=1), idle.argmax(axis=1), -1)

    @cached_property
    def post_action_next(self) -> np.ndarray:
        """``(n, k+1)`` post-action indices; column 0 is Wait, column i routes to server i."""
        out = np.empty((self.n, self.k + 1), dtype=np.int64)
        out[:, 0] = np.arange(self.n)
        out[:, 1:] = self.route_next
        return out

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """For every post-action state u, the expectation of ``values`` after one event."""
        p_arr, p_dep = event_probs(self.config)
        out = p_arr * values[self.arrival_next]
        for j in range(self.k):
            out = out + p_dep[j] * values[self.departure_next[:, j]]
        return out

    def transition_matrix(self, action_probs: np.ndarray):
        """Sparse ``P_pi`` for a stationary randomized policy.

        ``action_probs`` is ``(n, k+1)``; column 0 is Wait, column i is Route(i).
        """
        import scipy.sparse as sp

        p_arr, p_dep = event_probs(self.config)
        rows, cols, vals = [], [], []
        post = self.post_action_next
        for a in range(self.k + 1):
            w = action_probs[:, a]
            src = np.nonzero(w > 0)[0]
            if src.size == 0:
                continue
            u = post[src, a]
            if np.any(u < 0):
                raise InfeasibleAction(f"policy puts mass on infeasible action {a}")
            rows.append(src)
            cols.append(self.arrival_next[u])
            vals.append(w[src] * p_arr)
            for j in range(self.k):
                rows.append(src)
                cols.append(self.departure_next[u, j])
                vals.append(w[src] * p_dep[j])
        P = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.n),
        )
        P.sum_duplicates()
        return P


def enumerate_states(config: SystemConfig) -> list[State]:
    return StateSpace(config).states()


def feasibility_mask(space: StateSpace) -> np.ndarray:
    """``(n, k+1)`` boolean mask of feasible actions."""
    mask = np.ones((space.n, space.k + 1), dtype=bool)
    mask[:, 1:] = space.route_next >= 0
    return mask


def reachable_from(space: StateSpace, action_probs: np.ndarray, start: int = 0) -> np.ndarray:
    """Boolean mask of states reachable from ``start`` under the policy."""
    from scipy.sparse.csgraph import breadth_first_order

    P = space.transition_matrix(action_probs)
    order = breadth_first_order(P, start, directed=True, return_predecessors=False)
    mask = np.zeros(space.n, dtype=bool)
    mask[order] = True
    return mask


def parse_rates(text: str | Iterable[float]) -> tuple[float, ...]:
    if isinstance(text, str):
        return tuple(float(x) for x in text.replace(",", " ").split())
    return tuple(float(x) for x in text)
