"""Discounted-cost checks for the two-server system.

Values here follow the post-decision convention: ``U(u)`` is the discounted
cost of a state ``u`` in which the routing decision has already been taken,
``U(u) = c(u) + gamma * E[V(event(u))]``. Routing never changes the number of
jobs, so ``Q(s, a) = U(post(s, a))`` and the soft-threshold comparisons reduce
to differences of ``U`` between neighbouring post-decision states.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exact import greedy_actions, q_values, stationary_distribution
from .mdp import StateSpace, SystemConfig
from .policy import SoftThresholdParams


@dataclass
class DiscountedEval:
    gamma: float
    values: np.ndarray
    q_values: np.ndarray
    space: StateSpace

    def post_value(self, queue_len: int, b1: int, b2: int) -> float:
        """``U`` at the post-decision state ``(queue_len, b1, b2)``."""
        return float(self.q_values[(queue_len << 2) | b1 | (b2 << 1), 0])


def _two_server_space(config) -> StateSpace:
    space = config if isinstance(config, StateSpace) else StateSpace(config)
    if space.k != 2:
        raise ValueError(f"two-server checks need k = 2, got k = {space.k}")
    return space


def discounted_policy_eval(actor, config, gamma: float, cost: np.ndarray | None = None) -> DiscountedEval:
    """Solve ``(I - gamma P_pi) V = c`` and derive ``Q(s, a) = c(s) + gamma E[V(s')]``."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    space = _two_server_space(config)
    table = actor if isinstance(actor, np.ndarray) else actor.action_table(space)
    c = space.cost.astype(float) if cost is None else np.asarray(cost, dtype=float)
    P = space.transition_matrix(table)
    A = (sp.eye(space.n, format="csc") - gamma * P).tocsc()
    V = spla.spsolve(A, c)
    if not np.all(np.isfinite(V)):
        raise np.linalg.LinAlgError("discounted evaluation failed")
    W = space.expected_next(V)
    post = space.post_action_next
    Q = np.where(post >= 0, c[:, None] + gamma * W[np.maximum(post, 0)], np.inf)
    if cost is not None:
        # the post-decision identity needs c(s) = c(post(s, a)); a synthetic cost may break it
        Q = np.where(post >= 0, c[np.maximum(post, 0)] + gamma * W[np.maximum(post, 0)], np.inf)
    return DiscountedEval(gamma, V, Q, space)


def bellman_residual(ev: DiscountedEval, actor, cost: np.ndarray | None = None) -> float:
    table = actor if isinstance(actor, np.ndarray) else actor.action_table(ev.space)
    c = ev.space.cost if cost is None else cost
    P = ev.space.transition_matrix(table)
    return float(np.abs(ev.values - (c + ev.gamma * (P @ ev.values))).max())


def h_sequence(actor, config, gamma: float, ev: DiscountedEval | None = None) -> np.ndarray:
    """``h_0 = U(0,1,0) - U(0,0,1)`` and ``h_l = U(l,1,0) - U(l-1,1,1)`` for ``l = 1..l_M``."""
    ev = ev or discounted_policy_eval(actor, config, gamma)
    lm = ev.space.config.buffer_capacity
    U = ev.post_value
    h = np.empty(lm + 1)
    h[0] = U(0, 1, 0) - U(0, 0, 1)
    for l in range(1, lm + 1):
        h[l] = U(l, 1, 0) - U(l - 1, 1, 1)
    return h


def h_reconstructed(actor: SoftThresholdParams, config, gamma: float, ev: DiscountedEval | None = None) -> np.ndarray:
    """``h_l`` rebuilt from the one-step expansion of both post-decision values.

    Entry ``l`` is filled for ``2 <= l <= l_M - 1`` (away from the empty queue
    and the buffer edge); other entries are nan.
    """
    ev = ev or discounted_policy_eval(actor, config, gamma)
    cfg = ev.space.config
    lam, (mu1, mu2) = cfg.arrival_rate / cfg.uniform_rate, np.asarray(cfg.service_rates) / cfg.uniform_rate
    theta, sigma = actor.thresholds[0], actor.sharpness
    U = ev.post_value

    def p(x):  # route probability at queue length x
        return 1.0 / (1.0 + np.exp(-sigma * (x - theta)))

    lm = cfg.buffer_capacity
    out = np.full(lm + 1, np.nan)
    for l in range(2, lm):
        arrival = (1 - p(l + 1)) * (U(l + 1, 1, 0) - U(l, 1, 1))
        fast = U(l - 1, 1, 0) - U(l - 2, 1, 1)
        slow = (p(l) * U(l - 1, 1, 1) + (1 - p(l)) * U(l, 1, 0)
                - p(l - 1) * U(l - 2, 1, 1) - (1 - p(l - 1)) * U(l - 1, 1, 0))
        out[l] = gamma * (lam * arrival + mu1 * fast + mu2 * slow)
    return out


@dataclass
class SignReport:
    single_sign_change: bool
    increasing_prefix: bool
    l_star: int


def sign_structure(h: np.ndarray, upto: int | None = None) -> SignReport:
    """Check ``h`` is negative up to some ``l*`` and non-negative after it.

    ``l_star`` is the last negative index (-1 if none). ``upto`` limits the scan
    to ``h[:upto+1]``.
    """
    h = np.asarray(h if upto is None else h[: upto + 1])
    neg = h < 0
    l_star = int(np.nonzero(neg)[0].max()) if neg.any() else -1
    single = bool(neg[: l_star + 1].all() and not neg[l_star + 1:].any())
    prefix = h[: l_star + 1]
    increasing = bool(np.all(np.diff(prefix) > 0)) if single else False
    return SignReport(single, increasing, l_star)


def discounted_value_iteration(config, gamma: float, tol: float = 1e-10, max_iterations: int = 1_000_000):
    """Optimal discounted values and a greedy action per state (ties to Wait)."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    space = config if isinstance(config, StateSpace) else StateSpace(config)
    c = space.cost.astype(float)
    V = np.zeros(space.n)
    W_next = lambda v: space.expected_next(v)  # noqa: E731
    post = space.post_action_next
    for _ in range(max_iterations):
        W = W_next(V)
        Q = np.where(post >= 0, c[:, None] + gamma * W[np.maximum(post, 0)], np.inf)
        V_new = Q.min(axis=1)
        if np.abs(V_new - V).max() * gamma / (1 - gamma) < tol:
            V = V_new
            break
        V = V_new
    W = W_next(V)
    Q = np.where(post >= 0, c[:, None] + gamma * W[np.maximum(post, 0)], np.inf)
    return V, greedy_actions(Q)


def discounted_threshold(config, gamma: float, max_queue: int | None = None) -> int:
    """Last queue length at which the discounted-optimal policy waits in pattern (., 1, 0).

    The optimal rule routes to server 2 exactly when ``L > threshold``.
    """
    space = _two_server_space(config)
    _, acts = discounted_value_iteration(space, gamma)
    lm = space.config.buffer_capacity
    top = max_queue or max(1, int(0.9 * lm))
    a = acts[(np.arange(1, top + 1) << 2) | 1]
    routes = np.nonzero(a == 2)[0]
    if routes.size == 0:
        return top
    first = int(routes[0]) + 1
    return first - 1


def weighted_pi_objective(candidate_theta: float, base_actor: SoftThresholdParams, config, gamma: float,
                          sigma: float | None = None, nu: np.ndarray | None = None,
                          ev: DiscountedEval | None = None) -> float:
    """``sum_s nu(s) sum_a pi_cand(a|s) Q(s, a)`` under the base actor's ``nu`` and ``Q``."""
    space = _two_server_space(config)
    ev = ev or discounted_policy_eval(base_actor, space, gamma)
    if nu is None:
        nu = stationary_distribution(base_actor, space)
    sig = base_actor.sharpness if sigma is None else sigma
    cand = SoftThresholdParams((candidate_theta,), sig).action_table(space)
    Q = np.where(np.isfinite(ev.q_values), ev.q_values, 0.0)
    return float(nu @ (cand * Q).sum(axis=1))


def hard_pi_objective(threshold: float, base_actor, config, gamma: float, nu=None, ev=None) -> float:
    """Weighted PI objective of the hard threshold rule ``route iff L > threshold``."""
    from .policy import HardThresholdPolicy

    space = _two_server_space(config)
    ev = ev or discounted_policy_eval(base_actor, space, gamma)
    if nu is None:
        nu = stationary_distribution(base_actor, space)
    cand = HardThresholdPolicy([0.0, threshold]).action_table(space)
    Q = np.where(np.isfinite(ev.q_values), ev.q_values, 0.0)
    return float(nu @ (cand * Q).sum(axis=1))


def is_unimodal(values, rtol: float = 1e-12) -> bool:
    """Weakly decreasing then weakly increasing, with one minimal plateau.

    Differences smaller than ``rtol`` times the magnitude count as flat, so
    rounding noise on a plateau does not register as a second valley.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        raise ValueError("need at least 3 points")
    tol = rtol * max(1.0, float(np.abs(v).max()))
    d = np.diff(v)
    sign = np.where(d > tol, 1, np.where(d < -tol, -1, 0))
    nz = sign[sign != 0]
    # once it starts rising it must never fall again
    if nz.size and np.any(np.diff(nz) < 0):
        return False
    # a single minimal plateau: the flat run at the bottom must be contiguous
    lo = v.min()
    at_min = np.nonzero(v <= lo + tol)[0]
    return bool(at_min.size == 0 or at_min[-1] - at_min[0] + 1 == at_min.size)


def check_unimodality(base_actor: SoftThresholdParams, config, gamma: float, grid) -> tuple[bool, float, np.ndarray]:
    """Evaluate the weighted PI objective over ``grid``; return (unimodal, argmin, values)."""
    grid = np.asarray(grid, dtype=float)
    if grid.size < 3 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be sorted with at least 3 points")
    space = _two_server_space(config)
    ev = discounted_policy_eval(base_actor, space, gamma)
    nu = stationary_distribution(base_actor, space)
    vals = np.array([weighted_pi_objective(t, base_actor, space, gamma, nu=nu, ev=ev) for t in grid])
    return is_unimodal(vals), float(grid[int(np.argmin(vals))]), vals


def default_grid(threshold: float, step: float = 0.25) -> np.ndarray:
    top = max(3 * threshold, 3.0)
    return np.arange(0.0, top + step / 2, step)


@dataclass
class VerifierRow:
    gamma: float
    sigma: float
    load: float
    theta_base: float
    l_star: int
    single_sign_change: bool
    increasing_prefix: bool
    unimodal: bool
    argmin: float


def verify_point(rates, load: float, gamma: float, sigma: float, theta_base: float,
                 buffer_capacity: int = 100, grid=None) -> VerifierRow:
    config = SystemConfig.from_load(load, rates, buffer_capacity)
    space = StateSpace(config)
    actor = SoftThresholdParams((theta_base,), sigma)
    ev = discounted_policy_eval(actor, space, gamma)
    rep = sign_structure(h_sequence(actor, space, gamma, ev), upto=max(1, int(0.9 * buffer_capacity)))
    grid = np.arange(0.0, 30.0 + 1e-9, 0.5) if grid is None else grid
    uni, arg, _ = check_unimodality(actor, space, gamma, grid)
    return VerifierRow(gamma, sigma, load, theta_base, rep.l_star, rep.single_sign_change,
                       rep.increasing_prefix, uni, arg)


def write_verifier_report(path, rows: list[VerifierRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "sigma", "theta_base", "l_star", "single_sign_change", "unimodal", "argmin"])
        for r in rows:
            w.writerow([r.gamma, r.sigma, r.theta_base, r.l_star, r.single_sign_change, r.unimodal, r.argmin])


__all__ = [
    "DiscountedEval", "discounted_policy_eval", "bellman_residual", "h_sequence", "h_reconstructed",
    "SignReport", "sign_structure", "discounted_value_iteration", "discounted_threshold",
    "weighted_pi_objective", "hard_pi_objective", "is_unimodal", "check_unimodality", "default_grid",
    "VerifierRow", "verify_point", "write_verifier_report", "q_values",
]
