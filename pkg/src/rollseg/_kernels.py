"""Compiled two-state HMM recursions.

All kernels work on emission odds ``eps[t] = P(x_t | on) / P(x_t | off)``,
which for the sigmoid observation model is ``exp(e^alpha * (x_t - beta))``.
Forward messages are kept as on/off odds (rescaling by the off mass at
every frame), so there is no accumulation and no underflow for any length.

``starts[t]`` marks the first frame of an independent sequence: the chain
restarts from the off state (q_0 = 0) there. That lets one call cover the
concatenated rows of several pieces.
"""

import numpy as np
from numba import njit

# emission log-odds clip; keeps odds * prior-odds products finite
ZCLIP = 600.0


@njit(cache=True, error_model="numpy")
def posterior_on(eps, starts, tau0, tau1):
    T = eps.shape[0]
    r = np.empty(T)
    stay_on = 1.0 - tau1
    stay_off = 1.0 - tau0
    prev = 0.0
    for t in range(T):
        if starts[t]:
            prev = 0.0
        prior = (prev * stay_on + tau0) / (prev * tau1 + stay_off)
        prev = eps[t] * prior
        r[t] = prev
    out = np.empty(T)
    rho = 1.0
    for t in range(T - 1, -1, -1):
        if t == T - 1 or starts[t + 1]:
            rho = 1.0
        else:
            w = eps[t + 1] * rho
            rho = (tau1 + stay_on * w) / (stay_off + tau0 * w)
        out[t] = 1.0 / (1.0 + 1.0 / (r[t] * rho))
    return out


@njit(cache=True, error_model="numpy")
def squared_error(eps, truth, starts, tau0, tau1):
    """Sum over frames of (posterior_on - truth)^2 without materialising posteriors."""
    T = eps.shape[0]
    r = np.empty(T)
    stay_on = 1.0 - tau1
    stay_off = 1.0 - tau0
    prev = 0.0
    for t in range(T):
        if starts[t]:
            prev = 0.0
        prior = (prev * stay_on + tau0) / (prev * tau1 + stay_off)
        prev = eps[t] * prior
        r[t] = prev
    sse = 0.0
    rho = 1.0
    for t in range(T - 1, -1, -1):
        if t == T - 1 or starts[t + 1]:
            rho = 1.0
        else:
            w = eps[t + 1] * rho
            rho = (tau1 + stay_on * w) / (stay_off + tau0 * w)
        d = 1.0 / (1.0 + 1.0 / (r[t] * rho)) - truth[t]
        sse += d * d
    return sse


@njit(cache=True, error_model="numpy")
def squared_error_grid(base, gains, truth, starts, tau0, tau1):
    """Squared error for many emission scalings at once.

    The odds for column ``g`` are ``base[t] * gains[g]``; with
    ``base = exp(s * x)`` and ``gains = exp(-s * beta_g)`` this evaluates a
    whole row of thresholds for one slope ``s``. The chains are independent,
    so the inner loop over ``g`` runs them in lockstep.
    """
    T = base.shape[0]
    G = gains.shape[0]
    r = np.empty((T, G))
    prev = np.zeros(G)
    stay_on = 1.0 - tau1
    stay_off = 1.0 - tau0
    for t in range(T):
        if starts[t]:
            prev[:] = 0.0
        e = base[t]
        for g in range(G):
            p = prev[g]
            v = e * gains[g] * (p * stay_on + tau0) / (p * tau1 + stay_off)
            prev[g] = v
            r[t, g] = v
    rho = np.ones(G)
    sse = np.zeros(G)
    for t in range(T - 1, -1, -1):
        y = truth[t]
        if t == T - 1 or starts[t + 1]:
            rho[:] = 1.0
        else:
            e = base[t + 1]
            for g in range(G):
                w = e * gains[g] * rho[g]
                rho[g] = (tau1 + stay_on * w) / (stay_off + tau0 * w)
        for g in range(G):
            d = 1.0 / (1.0 + 1.0 / (r[t, g] * rho[g])) - y
            sse[g] += d * d
    return sse


@njit(cache=True)
def viterbi_path(log_on, log_off, starts, tau0, tau1):
    """Most likely state path; ties go to the off state, both when choosing
    predecessors and when picking the final state of each sequence."""
    T = log_on.shape[0]
    l00 = np.log(1.0 - tau0)
    l01 = np.log(tau0)
    l10 = np.log(tau1)
    l11 = np.log(1.0 - tau1)
    back = np.zeros((T, 2), dtype=np.uint8)
    final = np.zeros(T, dtype=np.uint8)
    d0 = 0.0
    d1 = 0.0
    for t in range(T):
        if starts[t]:
            n0 = l00
            n1 = l01
        else:
            a = d0 + l00
            b = d1 + l10
            if b > a:
                n0 = b
                back[t, 0] = 1
            else:
                n0 = a
            a = d0 + l01
            b = d1 + l11
            if b > a:
                n1 = b
                back[t, 1] = 1
            else:
                n1 = a
        d0 = n0 + log_off[t]
        d1 = n1 + log_on[t]
        if t == T - 1 or starts[t + 1]:
            final[t] = 1 if d1 > d0 else 0
    path = np.zeros(T, dtype=np.uint8)
    for t in range(T - 1, -1, -1):
        if t == T - 1 or starts[t + 1]:
            path[t] = final[t]
        else:
            path[t] = back[t + 1, path[t + 1]]
    return path
