"""Compiled inner loops for the actor-critic and the Monte Carlo simulator.

Both loops read pre-drawn uniforms row by row so they stay bit-compatible
with the pure-Python reference steps. Per epoch the row holds ``d`` uniforms
for the power-of-d sample (when enabled), then the action draw, then the
event draw.
"""
import math

import numpy as np
from numba import njit

CONSTANT = 0
DECAY = 1


@njit(cache=True)
def step_size(mode, base, exponent, t):
    if mode == CONSTANT:
        return base
    return base / (1.0 + t) ** exponent


@njit(cache=True)
def popcount(bits):
    c = 0
    while bits:
        c += bits & 1
        bits >>= 1
    return c


@njit(cache=True)
def pod_hidden_mask(k, d, row, scratch):
    """Bitmask of servers not sampled by a partial Fisher-Yates shuffle."""
    for i in range(k):
        scratch[i] = i
    for i in range(d):
        j = i + min(int(row[i] * (k - i)), k - i - 1)
        tmp = scratch[i]
        scratch[i] = scratch[j]
        scratch[j] = tmp
    hidden = (1 << k) - 1
    for i in range(d):
        hidden &= ~(1 << scratch[i])
    return hidden


@njit(cache=True)
def draw_event(L, bits, u, p_arr, p_dep, k, lm):
    """Apply one uniformized event to the post-action state."""
    acc = p_arr
    if u < acc:
        if L < lm:
            L += 1
        return L, bits
    for j in range(k):
        acc += p_dep[j]
        if u < acc:
            return L, bits & ~(1 << j)
    # rounding gap: treat as the last departure
    return L, bits & ~(1 << (k - 1))


@njit(cache=True, nogil=True)
def achq_run(mu, lam, lm, theta, sigma, omega, eta, radius, gamma,
             modes, bases, exps, t0, L, bits, uniforms, d, mask_critic,
             log_every, cost_sum, log_step, log_cost, log_eta, log_theta, log_wnorm, n_logged):
    """Run ``len(uniforms)`` actor-critic epochs in place.

    ``theta`` has length k with ``theta[0]`` unused. ``gamma < 0`` selects the
    average-cost update; otherwise the discounted TD target is used and ``eta``
    is left untouched. Returns the updated scalars.
    """
    k = mu.shape[0]
    total = lam
    for j in range(k):
        total += mu[j]
    p_arr = lam / total
    p_dep = mu / total
    scale = 1.0 / (lm + k)
    full = (1 << k) - 1
    scratch = np.empty(k, dtype=np.int64)
    nsteps = uniforms.shape[0]
    off = d if d > 0 else 0
    for n in range(nsteps):
        t = t0 + n
        row = uniforms[n]
        hidden = 0
        if d > 0:
            hidden = pod_hidden_mask(k, d, row, scratch)
        obs = bits | hidden
        # fastest idle server in the observed state
        f = -1
        if obs != full:
            for i in range(k):
                if not (obs >> i) & 1:
                    f = i
                    break
        u_a = row[off]
        action = -1
        g = 0.0
        if L > 0 and f >= 0:
            if f == 0:
                action = 0
            else:
                z = sigma * (L - theta[f])
                if z >= 0:
                    p = 1.0 / (1.0 + math.exp(-z))
                else:
                    ez = math.exp(z)
                    p = ez / (1.0 + ez)
                if u_a < 1.0 - p:
                    g = sigma * p
                else:
                    action = f
                    g = -sigma * (1.0 - p)
        c = L + popcount(bits)
        pL = L
        pbits = bits
        if action >= 0:
            pL = L - 1
            pbits = bits | (1 << action)
        nL, nbits = draw_event(pL, pbits, row[off + 1], p_arr, p_dep, k, lm)
        fbits = obs if mask_critic else bits
        fnbits = (nbits | hidden) if mask_critic else nbits
        v_now = omega[0] * L * scale
        v_next = omega[0] * nL * scale
        for i in range(k):
            if (fbits >> i) & 1:
                v_now += omega[i + 1] * scale
            if (fnbits >> i) & 1:
                v_next += omega[i + 1] * scale
        if gamma < 0:
            delta = c - eta + v_next - v_now
            eta += step_size(modes[2], bases[2], exps[2], t) * (c - eta)
        else:
            delta = c + gamma * v_next - v_now
        beta = step_size(modes[1], bases[1], exps[1], t)
        omega[0] += beta * delta * L * scale
        for i in range(k):
            if (fbits >> i) & 1:
                omega[i + 1] += beta * delta * scale
        norm = 0.0
        for i in range(k + 1):
            norm += omega[i] * omega[i]
        norm = math.sqrt(norm)
        if norm > radius:
            for i in range(k + 1):
                omega[i] *= radius / norm
            norm = radius
        if g != 0.0:
            theta[f] -= step_size(modes[0], bases[0], exps[0], t) * delta * g
        cost_sum += c
        L = nL
        bits = nbits
        if log_every > 0 and (t + 1) % log_every == 0:
            r = n_logged
            log_step[r] = t + 1
            log_cost[r] = cost_sum / (t + 1)
            log_eta[r] = eta
            for i in range(1, k):
                log_theta[r, i - 1] = theta[i]
            log_wnorm[r] = norm
            n_logged += 1
    return eta, L, bits, cost_sum, n_logged


@njit(cache=True, nogil=True)
def simulate_run(cum, last, mu, lam, lm, L, bits, uniforms, d, t0, burn_in,
                 batch_size, n_batches, batch_sums, occupancy):
    """Advance the chain ``len(uniforms)`` epochs under a tabulated policy.

    ``cum`` holds per-state cumulative action probabilities (column 0 Wait),
    ``last`` the last column with positive mass (rounding fallback). Costs of
    epochs at or after ``burn_in`` are added to their batch.
    """
    k = mu.shape[0]
    total = lam
    for j in range(k):
        total += mu[j]
    p_arr = lam / total
    p_dep = mu / total
    scratch = np.empty(k, dtype=np.int64)
    off = d if d > 0 else 0
    nsteps = uniforms.shape[0]
    for n in range(nsteps):
        t = t0 + n
        row = uniforms[n]
        hidden = 0
        if d > 0:
            hidden = pod_hidden_mask(k, d, row, scratch)
        s_obs = (L << k) | (bits | hidden)
        u_a = row[off]
        a = last[s_obs]
        for col in range(k + 1):
            if u_a < cum[s_obs, col]:
                a = col
                break
        if t >= burn_in:
            m = t - burn_in
            b = m // batch_size
            if b >= n_batches:
                b = n_batches - 1
            batch_sums[b] += L + popcount(bits)
            occupancy[(L << k) | bits] += 1
        if a > 0:
            L -= 1
            bits |= 1 << (a - 1)
        L, bits = draw_event(L, bits, row[off + 1], p_arr, p_dep, k, lm)
    return L, bits
