"""Two-timescale average-cost actor-critic with a soft-threshold actor and a
linear critic on normalized state features.

``achq_step`` is the readable single-epoch update; ``train`` runs the same
update in a compiled loop over pre-drawn uniforms, so both paths produce the
same trajectory for the same seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .mdp import State, SystemConfig, cost, fastest_available, sample_next
from .policy import (
    SoftThresholdParams,
    grad_log_pi,
    mask_state,
    pod_sample,
    rsrt_thresholds,
    sample_from,
    soft_threshold_dist,
)

CHUNK = 1 << 16


@dataclass(frozen=True)
class StepSchedule:
    """Constant step, or ``base / (1 + t) ** exponent``."""

    base: float
    exponent: float = 0.0
    mode: str = "constant"

    def __post_init__(self):
        if self.mode not in ("constant", "decay"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not self.base > 0:
            raise ValueError("step size base must be positive")
        if not 0 <= self.exponent < 1:
            raise ValueError("decay exponent must lie in [0, 1)")

    @classmethod
    def constant(cls, value: float) -> "StepSchedule":
        return cls(value, 0.0, "constant")

    @classmethod
    def decay(cls, base: float, exponent: float) -> "StepSchedule":
        return cls(base, exponent, "decay")

    @property
    def code(self) -> int:
        return _kernels.CONSTANT if self.mode == "constant" else _kernels.DECAY


def step_value(schedule: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.mode == "constant":
        return schedule.base
    return schedule.base / (1.0 + t) ** schedule.exponent


@dataclass
class Schedules:
    actor: StepSchedule = field(default_factory=lambda: StepSchedule.constant(1e-3))
    critic: StepSchedule = field(default_factory=lambda: StepSchedule.constant(1e-3))
    avg_cost: StepSchedule = field(default_factory=lambda: StepSchedule.constant(1e-2))

    @classmethod
    def decaying(cls, alpha: float = 1e-3, beta: float = 1e-3, zeta: float = 1e-2) -> "Schedules":
        # actor slower than critic: r_alpha = 3/5 > r_beta = 2/5
        return cls(StepSchedule.decay(alpha, 0.6), StepSchedule.decay(beta, 0.4),
                   StepSchedule.decay(zeta, 0.4))

    def as_arrays(self):
        scheds = (self.actor, self.critic, self.avg_cost)
        return (np.array([s.code for s in scheds], dtype=np.int64),
                np.array([s.base for s in scheds]),
                np.array([s.exponent for s in scheds]))


@dataclass
class CriticState:
    weights: np.ndarray
    projection_radius: float
    avg_cost_estimate: float = 0.0
    step: int = 0

    @classmethod
    def initial(cls, config: SystemConfig, radius: float | None = None) -> "CriticState":
        return cls(np.zeros(config.k + 1), default_radius(config) if radius is None else radius)

    def copy(self) -> "CriticState":
        return replace(self, weights=self.weights.copy())


def default_radius(config: SystemConfig) -> float:
    return 10.0 * (config.buffer_capacity + config.k)


def features(state: State, config: SystemConfig) -> np.ndarray:
    """State vector scaled by ``1 / (L_max + k)`` so its norm stays below 1."""
    return state.as_vector() / (config.buffer_capacity + config.k)


def td_error(cost: float, eta: float, phi_next, phi_now, weights) -> float:
    return cost - eta + float(np.dot(phi_next, weights)) - float(np.dot(phi_now, weights))


def project(weights: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(weights))
    if norm > radius:
        return weights * (radius / norm)
    return weights


@dataclass
class StepResult:
    actor: SoftThresholdParams
    critic: CriticState
    next_state: State
    cost: float
    delta: float
    action: int


def achq_step(actor: SoftThresholdParams, critic: CriticState, state: State, config: SystemConfig,
              schedules: Schedules, rng: np.random.Generator, gamma: float | None = None,
              pod_d: int | None = None, mask_critic: bool = True) -> StepResult:
    """One epoch: act, observe cost, sample the next state, update eta, omega and theta.

    With ``gamma`` set the discounted TD error ``c + gamma*V(s') - V(s)`` is used
    and the average-cost estimate is frozen. With ``pod_d`` the actor (and, if
    ``mask_critic``, the critic) sees only ``pod_d`` sampled servers.
    """
    t = critic.step
    seen = state
    hidden = ()
    if pod_d:
        sampled = pod_sample(config.k, pod_d, rng.random(pod_d))
        seen = mask_state(state, sampled)
        hidden = tuple(i not in sampled for i in range(config.k))
    action = sample_from(soft_threshold_dist(actor, seen, config), rng.random())
    c = cost(state)
    nxt = sample_next(state, action, config, rng)
    critic_now = seen if (pod_d and mask_critic) else state
    critic_next = nxt
    if pod_d and mask_critic:
        critic_next = State(nxt.queue_len, tuple(b or h for b, h in zip(nxt.busy, hidden)))
    phi = features(critic_now, config)
    phi_next = features(critic_next, config)
    w = critic.weights
    if gamma is None:
        delta = td_error(c, critic.avg_cost_estimate, phi_next, phi, w)
        eta = critic.avg_cost_estimate + step_value(schedules.avg_cost, t) * (c - critic.avg_cost_estimate)
    else:
        delta = c + gamma * float(phi_next @ w) - float(phi @ w)
        eta = critic.avg_cost_estimate
    w_new = project(w + step_value(schedules.critic, t) * delta * phi, critic.projection_radius)
    grad = grad_log_pi(actor, seen, action, config)
    theta = np.asarray(actor.thresholds) - step_value(schedules.actor, t) * delta * grad
    new_critic = CriticState(w_new, critic.projection_radius, eta, t + 1)
    return StepResult(actor.with_thresholds(theta), new_critic, nxt, c, delta, action)


@dataclass
class HyperParams:
    sigma: float = 1.0
    schedules: Schedules = field(default_factory=Schedules)
    radius: float | None = None
    horizon: int = 10_000_000
    seed: int = 0
    log_interval: int = 10_000
    gamma: float | None = None
    pod_d: int | None = None
    mask_critic: bool = True
    init: str = "rsrt"

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        alpha = d.get("alpha", 1e-3)
        beta = d.get("beta", 1e-3)
        zeta = d.get("zeta", 1e-2)
        mode = d.get("schedule", "constant")
        if mode == "constant":
            sch = Schedules(StepSchedule.constant(alpha), StepSchedule.constant(beta), StepSchedule.constant(zeta))
        elif mode == "decay":
            sch = Schedules.decaying(alpha, beta, zeta)
        else:
            raise ValueError(f"schedule must be 'constant' or 'decay', got {mode!r}")
        gamma = d.get("gamma")
        if gamma is not None and not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        return cls(sigma=d.get("sigma", 1.0), schedules=sch, radius=d.get("radius"),
                   horizon=int(d.get("horizon", 10_000_000)), seed=int(d.get("seed", 0)),
                   log_interval=int(d.get("log_interval", 10_000)), gamma=gamma,
                   pod_d=d.get("pod_d"), mask_critic=bool(d.get("mask_critic", True)),
                   init=d.get("init", "rsrt"))

    def to_dict(self) -> dict:
        s = self.schedules
        return {
            "sigma": self.sigma, "alpha": s.actor.base, "beta": s.critic.base, "zeta": s.avg_cost.base,
            "schedule": s.actor.mode, "radius": self.radius, "horizon": self.horizon, "seed": self.seed,
            "log_interval": self.log_interval, "gamma": self.gamma, "pod_d": self.pod_d,
            "mask_critic": self.mask_critic, "init": self.init,
        }


def initial_actor(config: SystemConfig, sigma: float = 1.0, init: str = "rsrt", seed: int = 0) -> SoftThresholdParams:
    """Warm-start thresholds: RSRT clipped to the buffer, zeros, or uniform random."""
    lm = config.buffer_capacity
    if init == "rsrt":
        th = np.clip(rsrt_thresholds(config)[1:], 0, lm)
    elif init == "zero":
        th = np.zeros(config.k - 1)
    elif init == "random":
        th = np.random.default_rng(seed).uniform(0, lm, config.k - 1)
    else:
        raise ValueError(f"unknown init {init!r}")
    return SoftThresholdParams(tuple(th), sigma)


@dataclass
class TrainRecord:
    steps: np.ndarray
    avg_cost_running: np.ndarray
    eta: np.ndarray
    thetas: np.ndarray
    omega_norm: np.ndarray
    final_critic: CriticState | None = None
    final_state: State | None = None

    def to_csv(self, path) -> None:
        k1 = self.thetas.shape[1] if self.thetas.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "avg_cost_running", "eta", *[f"theta_{i + 2}" for i in range(k1)], "omega_norm"])
            for r in range(len(self.steps)):
                w.writerow([int(self.steps[r]), repr(float(self.avg_cost_running[r])), repr(float(self.eta[r])),
                            *[repr(float(x)) for x in self.thetas[r]], repr(float(self.omega_norm[r]))])


def train(config: SystemConfig, actor0: SoftThresholdParams | None = None,
          hp: HyperParams | None = None, initial_state: State | None = None) -> tuple[SoftThresholdParams, TrainRecord]:
    """Run the actor-critic for ``hp.horizon`` epochs; deterministic given ``hp.seed``."""
    hp = hp or HyperParams()
    if actor0 is None:
        actor0 = initial_actor(config, hp.sigma, hp.init, hp.seed)
    if actor0.sharpness != hp.sigma:
        actor0 = SoftThresholdParams(actor0.thresholds, hp.sigma)
    k = config.k
    if len(actor0.thresholds) != k - 1:
        raise ValueError(f"actor needs {k - 1} thresholds")
    d = int(hp.pod_d or 0)
    if d and not 1 <= d <= k:
        raise ValueError(f"pod_d must lie in [1, {k}]")
    radius = default_radius(config) if hp.radius is None else float(hp.radius)
    gamma = -1.0 if hp.gamma is None else float(hp.gamma)

    state = initial_state or State.empty(k)
    L, bits = state.queue_len, sum(1 << i for i, b in enumerate(state.busy) if b)
    theta = np.concatenate([[0.0], actor0.thresholds])
    omega = np.zeros(k + 1)
    eta = 0.0
    modes, bases, exps = hp.schedules.as_arrays()
    mu = np.asarray(config.service_rates, dtype=float)

    log_every = max(int(hp.log_interval), 0)
    n_log = hp.horizon // log_every if log_every else 0
    log_step = np.zeros(n_log, dtype=np.int64)
    log_cost = np.zeros(n_log)
    log_eta = np.zeros(n_log)
    log_theta = np.zeros((n_log, k - 1))
    log_wnorm = np.zeros(n_log)
    n_logged = 0
    cost_sum = 0.0

    rng = np.random.default_rng(hp.seed)
    upc = d + 2
    done = 0
    while done < hp.horizon:
        m = min(CHUNK, hp.horizon - done)
        u = rng.random((m, upc))
        eta, L, bits, cost_sum, n_logged = _kernels.achq_run(
            mu, config.arrival_rate, config.buffer_capacity, theta, hp.sigma, omega, eta, radius, gamma,
            modes, bases, exps, done, L, bits, u, d, hp.mask_critic,
            log_every, cost_sum, log_step, log_cost, log_eta, log_theta, log_wnorm, n_logged)
        done += m

    final = SoftThresholdParams(tuple(theta[1:]), hp.sigma)
    record = TrainRecord(log_step[:n_logged], log_cost[:n_logged], log_eta[:n_logged],
                         log_theta[:n_logged], log_wnorm[:n_logged],
                         CriticState(omega, radius, eta, hp.horizon),
                         State(int(L), tuple(bool((bits >> i) & 1) for i in range(k))))
    return final, record


def train_discounted(config: SystemConfig, actor0: SoftThresholdParams | None = None,
                     hp: HyperParams | None = None, gamma: float = 0.99,
                     initial_state: State | None = None) -> tuple[SoftThresholdParams, TrainRecord]:
    """Discounted-cost variant: TD target ``c + gamma * V(s')`` and no average-cost tracker."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    hp = replace(hp or HyperParams(), gamma=gamma)
    return train(config, actor0, hp, initial_state)


def run_reference(config: SystemConfig, actor: SoftThresholdParams, hp: HyperParams, steps: int):
    """Iterate ``achq_step`` from the empty state with the training RNG; slow, for cross-checks."""
    rng = np.random.default_rng(hp.seed)
    radius = default_radius(config) if hp.radius is None else hp.radius
    critic = CriticState(np.zeros(config.k + 1), radius)
    state = State.empty(config.k)
    for _ in range(steps):
        r = achq_step(actor, critic, state, config, hp.schedules, rng, hp.gamma, hp.pod_d, hp.mask_critic)
        actor, critic, state = r.actor, r.critic, r.next_state
    return actor, critic, state

