"""Tabular exact methods: relative value iteration, threshold analysis,
stationary distributions and the linear fit of the value function."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mdp import StateSpace, SystemConfig, reachable_from
from .policy import TabularPolicy

log = logging.getLogger(__name__)


class NotConverged(RuntimeError):
    pass


class SingularSystem(RuntimeError):
    pass


@dataclass
class ValueTable:
    values: np.ndarray
    reference_state: int = 0


@dataclass
class RVIResult:
    values: ValueTable
    policy: TabularPolicy
    iterations: int
    average_cost: float
    spans: list[float] = field(default_factory=list)


def _space(config_or_space) -> StateSpace:
    if isinstance(config_or_space, StateSpace):
        return config_or_space
    return StateSpace(config_or_space)


def q_values(V: np.ndarray, space: StateSpace) -> np.ndarray:
    """``(n, k+1)`` one-step lookahead ``c(s) + E[V(s')]``; infeasible actions get +inf."""
    W = space.expected_next(V)
    post = space.post_action_next
    Q = np.where(post >= 0, W[np.maximum(post, 0)], np.inf)
    return space.cost[:, None] + Q


TIE_TOL = 1e-9


def greedy_actions(Q: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """First column within ``tie_tol`` (relative) of the row minimum.

    Column order is Wait, then servers ascending, so near-ties caused by
    rounding resolve toward Wait and then the smaller index.
    """
    best = Q.min(axis=1, keepdims=True)
    near = Q <= best + tie_tol * np.maximum(1.0, np.abs(best))
    return near.argmax(axis=1)


def bellman_backup(V, config) -> tuple[ValueTable, TabularPolicy]:
    """One application of the average-cost Bellman operator.

    Ties go to Wait, then to the smallest server index.
    """
    space = _space(config)
    vals = V.values if isinstance(V, ValueTable) else np.asarray(V, dtype=float)
    Q = q_values(vals, space)
    greedy = greedy_actions(Q)
    ref = V.reference_state if isinstance(V, ValueTable) else 0
    return ValueTable(Q[np.arange(space.n), greedy], ref), TabularPolicy(greedy, name="RVI")


def span(x: np.ndarray) -> float:
    return float(x.max() - x.min())


def relative_value_iteration(config, tolerance: float = 1e-9, reference_state: int = 0,
                             max_iterations: int = 1_000_000) -> RVIResult:
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    space = _space(config)
    V = np.zeros(space.n)
    spans = []
    for it in range(1, max_iterations + 1):
        T = q_values(V, space).min(axis=1)
        V_new = T - T[reference_state]
        sp_diff = span(V_new - V)
        spans.append(sp_diff)
        V = V_new
        if sp_diff <= tolerance:
            break
    else:
        raise NotConverged(f"RVI did not reach span {tolerance} in {max_iterations} sweeps")
    Q = q_values(V, space)
    greedy = greedy_actions(Q)
    gain = float(Q[reference_state].min() - V[reference_state])
    log.debug("RVI converged in %d sweeps, gain %.6g", it, gain)
    return RVIResult(ValueTable(V, reference_state), TabularPolicy(greedy, name="RVI"), it, gain, spans)


def greedy_policy(V: np.ndarray, space: StateSpace) -> TabularPolicy:
    return TabularPolicy(greedy_actions(q_values(V, space)), name="greedy")


@dataclass
class ThresholdRow:
    busy_pattern: str
    fastest_idle: int
    threshold: float
    is_threshold: bool


@dataclass
class ThresholdReport:
    rows: list[ThresholdRow]

    @property
    def is_threshold_type(self) -> bool:
        return all(r.is_threshold for r in self.rows)

    def threshold(self, pattern: str) -> float:
        for r in self.rows:
            if r.busy_pattern == pattern:
                return r.threshold
        raise KeyError(pattern)

    def as_dict(self) -> dict[str, float]:
        return {r.busy_pattern: r.threshold for r in self.rows}


def pattern_string(bits: int, k: int) -> str:
    return "".join("1" if (bits >> i) & 1 else "0" for i in range(k))


def default_scan_limit(buffer_capacity: int) -> int:
    # near a full buffer, waiting lets arrivals drop, which truncation rewards
    return max(1, int(0.9 * buffer_capacity))


def extract_thresholds(policy, config, max_queue: int | None = None) -> ThresholdReport:
    """Per busy pattern with an idle server, the queue length above which it routes.

    A pattern is threshold-type when, over ``L = 1..max_queue``, the action is
    Wait up to some L and Route(fastest idle) beyond it. Patterns that never
    route report ``inf``; patterns that always route report 0; non-threshold
    patterns report ``nan``. ``max_queue`` defaults to 90% of the buffer.
    """
    space = _space(config)
    k = space.k
    lm = default_scan_limit(space.config.buffer_capacity) if max_queue is None else max_queue
    if isinstance(policy, TabularPolicy):
        actions = policy.actions
    else:
        actions = TabularPolicy.from_policy(policy, space).actions
    rows = []
    for bits in range(1 << k):
        if bits == (1 << k) - 1:
            continue
        f = next(i for i in range(k) if not (bits >> i) & 1) + 1
        acts = actions[(np.arange(1, lm + 1) << k) | bits]
        routes = acts == f
        ok = bool(np.all((acts == 0) | routes))
        if ok and routes.any():
            first = int(np.argmax(routes))
            ok = bool(routes[first:].all())
            thr = float(first)  # L = first + 1 is the first routing queue length
        else:
            thr = float("inf")
        if not ok:
            thr = float("nan")
        rows.append(ThresholdRow(pattern_string(bits, k), f, thr, ok))
    return ThresholdReport(rows)


def symmetric_threshold_pairs(report: ThresholdReport, config: SystemConfig):
    """Yield (pattern, mirrored pattern, thr, mirrored thr) for equal-rate server swaps.

    Swapping two servers of equal rate maps the model onto itself, so a pattern
    whose fastest idle server is one of them must share its threshold with the
    mirrored pattern.
    """
    mu = config.service_rates
    thr = report.as_dict()
    k = config.k
    for i in range(k):
        for j in range(i + 1, k):
            if mu[i] != mu[j]:
                continue
            for p, t in thr.items():
                b = list(p)
                if b[j] == "0" and b[i] == "1" and "0" not in b[:j]:
                    b[i], b[j] = b[j], b[i]
                    q = "".join(b)
                    yield p, q, t, thr[q]


def nested_threshold_pairs(report: ThresholdReport):
    """Yield (pattern, slower pattern, thr, slower thr) where the slower pattern
    additionally marks the fastest idle server busy."""
    thr = {r.busy_pattern: r for r in report.rows}
    for r in report.rows:
        b = list(r.busy_pattern)
        b[r.fastest_idle - 1] = "1"
        q = "".join(b)
        if q in thr:
            yield r.busy_pattern, q, r.threshold, thr[q].threshold


def _solve_pinned(Pr: sp.csr_matrix) -> np.ndarray | None:
    """Balance equations with nu[0] pinned to 1, via ILU-preconditioned GMRES."""
    m = Pr.shape[0]
    M = (sp.eye(m, format="csr") - Pr.T).tocsr()
    Mr = M[1:, 1:].tocsc()
    rhs = -M[1:, 0].toarray().ravel()
    try:
        ilu = spla.spilu(Mr, drop_tol=1e-6, fill_factor=20)
    except RuntimeError:
        return None
    pre = spla.LinearOperator(Mr.shape, ilu.solve)
    y, info = spla.gmres(Mr, rhs, M=pre, rtol=1e-14, atol=0.0, restart=50, maxiter=200)
    if info != 0:
        return None
    return np.concatenate([[1.0], y])


def _solve_direct(Pr: sp.csr_matrix) -> np.ndarray:
    m = Pr.shape[0]
    A = (Pr.T - sp.eye(m, format="csr")).tocsr()
    A = sp.vstack([sp.csr_matrix(np.ones((1, m))), A[1:]]).tocsc()
    b = np.zeros(m)
    b[0] = 1.0
    with np.errstate(all="ignore"):
        return spla.spsolve(A, b)


def stationary_distribution(policy, config, tol: float = 1e-10) -> np.ndarray:
    """Stationary distribution of the chain induced by ``policy``.

    Solved on the set reachable from the empty state; unreachable states get
    probability 0. Small systems use a direct solve with one balance equation
    replaced by normalization; large ones pin the empty state and use
    preconditioned GMRES, falling back to the direct solve.
    """
    space = _space(config)
    table = policy if isinstance(policy, np.ndarray) else policy.action_table(space)
    P = space.transition_matrix(table)
    reach = reachable_from(space, table, 0)
    idx = np.nonzero(reach)[0]
    Pr = P[idx][:, idx].tocsr()
    nu = np.zeros(space.n)
    for solver in ((_solve_pinned, _solve_direct) if idx.size > 2000 else (_solve_direct,)):
        x = solver(Pr)
        if x is None or not np.all(np.isfinite(x)) or x.sum() <= 0:
            continue
        x = np.where(x < 0, 0.0, x)
        nu[:] = 0.0
        nu[idx] = x / x.sum()
        resid = np.abs(P.T @ nu - nu).sum()
        if resid <= tol:
            return nu
    raise SingularSystem("could not solve the stationary balance equations to tolerance")


def exact_average_cost(policy, config) -> float:
    space = _space(config)
    nu = stationary_distribution(policy, space)
    return float(nu @ space.cost)


def expected_response_time(avg_jobs: float, config: SystemConfig) -> float:
    """Little's law: mean response time = mean jobs in system / arrival rate."""
    if avg_jobs < 0:
        raise ValueError("avg_jobs must be non-negative")
    cfg = config.config if isinstance(config, StateSpace) else config
    return avg_jobs / cfg.arrival_rate


@dataclass
class LinearFit:
    weights: np.ndarray
    intercept: float
    r_squared: float


def state_matrix(space: StateSpace) -> np.ndarray:
    """Raw state vectors ``(L, B_1..B_k)`` for every enumerated state."""
    return np.column_stack([space.queue_len, space.busy]).astype(float)


def linear_fit_value(V, config) -> LinearFit:
    """Least-squares fit of the value table on the raw state vector plus intercept."""
    space = _space(config)
    y = V.values if isinstance(V, ValueTable) else np.asarray(V, dtype=float)
    X = np.column_stack([state_matrix(space), np.ones(space.n)])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 0.0 if ss_tot == 0 else 1.0 - float(resid @ resid) / ss_tot
    return LinearFit(coef[:-1], float(coef[-1]), r2)


def write_value_table(path, values: ValueTable, policy: TabularPolicy, config) -> None:
    space = _space(config)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_index", "queue_len", "busy_bits", "value", "greedy_action"])
        for i in range(space.n):
            w.writerow([i, int(space.queue_len[i]), pattern_string(int(space.bits[i]), space.k),
                        repr(float(values.values[i])), int(policy.actions[i])])


def write_threshold_report(path, report: ThresholdReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["busy_pattern", "fastest_idle", "threshold"])
        for r in report.rows:
            w.writerow([r.busy_pattern, r.fastest_idle, r.threshold])
