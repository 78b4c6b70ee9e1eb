"""Vectorised Monte-Carlo simulator used as an independent oracle.

It samples straight from ``transition``/``reward``/``constraint`` without
touching any of the library's evaluation code.
"""

import numpy as np


def _sample_rows(cdf_rows, rng):
    u = rng.random(cdf_rows.shape[0])
    idx = (cdf_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def simulate(mdp, probs, n_episodes, horizon, rng, discount_cutoff=None):
    """Run ``n_episodes`` episodes in lockstep.

    Returns a dict with discounted returns, discounted state visitation
    frequencies (normalised by ``1 - gamma``), failure indicators and
    undiscounted returns.  With ``discount_cutoff`` the loop stops once
    ``gamma**t`` falls below it (only the discounted outputs stay exact).
    """
    P = np.asarray(mdp.transition)
    R = np.asarray(mdp.reward)
    n_s = P.shape[0]
    terminal = np.zeros(n_s, dtype=bool)
    terminal[list(mdp.terminal_failure | mdp.terminal_goal)] = True
    failure = np.zeros(n_s, dtype=bool)
    failure[list(mdp.terminal_failure)] = True
    pol_cdf = np.cumsum(probs, axis=1)
    tr_cdf = np.cumsum(P, axis=2)
    mu_cdf = np.cumsum(mdp.mu)

    s = np.minimum((mu_cdf[None, :] < rng.random(n_episodes)[:, None]).sum(axis=1), n_s - 1)
    alive = ~terminal[s]
    disc_ret = np.zeros(n_episodes)
    ret = np.zeros(n_episodes)
    failed = np.zeros(n_episodes, dtype=bool)
    visits = np.zeros(n_s)
    g = 1.0
    for t in range(horizon):
        if discount_cutoff is not None and g < discount_cutoff:
            break
        # discounted visitation is over the infinite chain: terminal states keep absorbing mass
        np.add.at(visits, s, g)
        idx = np.flatnonzero(alive)
        if idx.size:
            si = s[idx]
            a = _sample_rows(pol_cdf[si], rng)
            s2 = _sample_rows(tr_cdf[si, a], rng)
            r = R[si, a]
            disc_ret[idx] += g * r
            ret[idx] += r
            failed[idx] |= failure[s2]
            s[idx] = s2
            alive[idx] = ~terminal[s2]
        g *= mdp.gamma
    return {
        "discounted_return": disc_ret,
        "return": ret,
        "failed": failed,
        "visitation": visits * (1.0 - mdp.gamma) / n_episodes,
    }
