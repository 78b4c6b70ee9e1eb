"""Tabular constrained MDPs and exact evaluation oracles.

Cost convention: the safety signal of the *entered* state is charged to the
transition, so ``Q_C(s, a) = sum_s' P(s'|s,a) (C(s') + gamma (1 - done(s')) V_C(s'))``.
Terminal states self-loop with zero reward and zero signal, so a failure is
counted exactly once per episode and discounted safety values stay in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import rel_entr

from ._validation import (
    ROW_TOL,
    as_probs,
    check_distribution,
    check_policy_shape,
    check_weights,
)


@dataclass(frozen=True, eq=False)
class TabularCMDP:
    """Finite CMDP ``(S, A, P, R, C, gamma, mu, chi)`` with terminal sets.

    ``transition`` has shape ``(S, A, S)``, ``reward`` shape ``(S, A)`` and
    ``constraint`` shape ``(S,)``.  Arrays are copied and frozen on
    construction.
    """

    transition: np.ndarray
    reward: np.ndarray
    constraint: np.ndarray
    gamma: float
    mu: np.ndarray
    chi: float = 0.05
    terminal_failure: frozenset = field(default_factory=frozenset)
    terminal_goal: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        C = np.array(self.constraint, dtype=float)
        mu = np.array(self.mu, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        n_s, n_a, _ = P.shape
        if n_s < 1 or n_a < 1:
            raise ValueError("need at least one state and one action")
        if R.shape != (n_s, n_a):
            raise ValueError(f"reward must have shape {(n_s, n_a)}, got {R.shape}")
        if C.shape != (n_s,):
            raise ValueError(f"constraint must have shape ({n_s},), got {C.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(R)) and np.all(np.isfinite(C))):
            raise ValueError("MDP tables must be finite")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > ROW_TOL):
            raise ValueError("every transition row must be a probability vector")
        if np.any(C < 0) or np.any(C > 1):
            raise ValueError("constraint values must lie in [0, 1]")
        if not 0.0 < float(self.gamma) < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= float(self.chi) < 1.0:
            raise ValueError("chi must lie in [0, 1)")
        check_distribution(mu, n_s, name="mu")
        fail = frozenset(int(s) for s in self.terminal_failure)
        goal = frozenset(int(s) for s in self.terminal_goal)
        if fail & goal:
            raise ValueError("a state cannot be both failure and goal")
        for s in fail | goal:
            if not 0 <= s < n_s:
                raise ValueError(f"terminal state {s} out of range")
            if np.any(np.abs(P[s, :, s] - 1.0) > ROW_TOL):
                raise ValueError(f"terminal state {s} must self-loop with probability 1")
            if mu[s] != 0.0:
                raise ValueError(f"mu assigns mass to terminal state {s}")
        for s in fail:
            if C[s] <= 0.0:
                raise ValueError(f"failure state {s} must carry a positive safety signal")

        for arr in (P, R, C, mu):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "constraint", C)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "chi", float(self.chi))
        object.__setattr__(self, "terminal_failure", fail)
        object.__setattr__(self, "terminal_goal", goal)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def binary(self):
        """True when the safety signal only takes values in {0, 1}."""
        return bool(np.all((self.constraint == 0.0) | (self.constraint == 1.0)))

    @cached_property
    def terminal_mask(self):
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_failure | self.terminal_goal)] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def failure_mask(self):
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_failure)] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def effective_reward(self):
        """R(s, a) with terminal rows zeroed."""
        r = np.where(self.terminal_mask[:, None], 0.0, self.reward)
        r.setflags(write=False)
        return r

    @cached_property
    def effective_cost(self):
        """Expected signal of the entered state, zero from terminal states."""
        k = self.transition @ self.constraint
        k = np.where(self.terminal_mask[:, None], 0.0, k)
        k.setflags(write=False)
        return k

    @cached_property
    def cumulative_transition(self):
        """Row-wise CDF of ``transition`` used by samplers."""
        cum = np.cumsum(self.transition, axis=2)
        cum[..., -1] = 1.0
        cum.setflags(write=False)
        return cum

    @cached_property
    def cumulative_mu(self):
        cum = np.cumsum(self.mu)
        cum[-1] = 1.0
        cum.setflags(write=False)
        return cum


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Explicit stochastic policy ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        arr = as_probs(np.array(self.probs, dtype=float))
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


@dataclass(frozen=True, eq=False)
class ExactValues:
    v_r: np.ndarray
    v_c: np.ndarray
    q_r: np.ndarray
    q_c: np.ndarray
    a_r: np.ndarray
    a_c: np.ndarray
    d_pi: np.ndarray


def policy_transition(mdp, probs):
    """State chain ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)``."""
    return np.einsum("sa,sat->st", probs, mdp.transition)


def _policy_probs(mdp, policy):
    return check_policy_shape(as_probs(policy), mdp)


def _evaluation_lu(mdp, probs):
    system = np.eye(mdp.n_states) - mdp.gamma * policy_transition(mdp, probs)
    return linalg.lu_factor(system, check_finite=False)


def exact_policy_values(mdp, policy):
    """Solve the discounted Bellman evaluation equations for reward and safety.

    Returns an :class:`ExactValues` holding V, Q and A for both signals plus
    the discounted state distribution under ``mu``.
    """
    probs = _policy_probs(mdp, policy)
    lu = _evaluation_lu(mdp, probs)
    r_pi = np.sum(probs * mdp.effective_reward, axis=1)
    c_pi = np.sum(probs * mdp.effective_cost, axis=1)
    values = linalg.lu_solve(lu, np.column_stack([r_pi, c_pi]), check_finite=False)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("singular policy evaluation system")
    v_r, v_c = values[:, 0], values[:, 1]
    q_r = mdp.effective_reward + mdp.gamma * mdp.transition @ v_r
    q_c = mdp.effective_cost + mdp.gamma * mdp.transition @ v_c
    d = linalg.lu_solve(lu, mdp.mu, trans=1, check_finite=False) * (1.0 - mdp.gamma)
    return ExactValues(
        v_r=v_r,
        v_c=v_c,
        q_r=q_r,
        q_c=q_c,
        a_r=q_r - v_r[:, None],
        a_c=q_c - v_c[:, None],
        d_pi=d,
    )


def discounted_state_distribution(mdp, policy):
    """``d(s) = (1 - gamma) mu^T (I - gamma P_pi)^{-1}``."""
    probs = _policy_probs(mdp, policy)
    lu = _evaluation_lu(mdp, probs)
    d = linalg.lu_solve(lu, mdp.mu, trans=1, check_finite=False) * (1.0 - mdp.gamma)
    return np.clip(d, 0.0, None)


def _reaches(adjacency, targets):
    """Boolean mask of states with a positive-probability path into ``targets``."""
    reach = targets.copy()
    rev = adjacency.T
    frontier = np.flatnonzero(targets)
    while frontier.size:
        preds = np.flatnonzero(rev[frontier].any(axis=0) & ~reach)
        reach[preds] = True
        frontier = preds
    return reach


def expected_failure_probability(mdp, policy, horizon=None):
    """Probability that an episode started from ``mu`` is absorbed into failure.

    The sum is undiscounted.  With ``horizon=None`` absorption is over an
    unbounded episode; otherwise only failures within the first ``horizon``
    steps count, matching truncated rollouts.
    """
    if not mdp.binary:
        raise NotImplementedError(
            "expected_failure_probability needs a binary safety signal"
        )
    probs = _policy_probs(mdp, policy)
    P_pi = policy_transition(mdp, probs)
    fail = mdp.failure_mask
    if not fail.any():
        return 0.0
    if horizon is not None:
        if horizon < 0:
            raise ValueError("horizon must be nonnegative")
        # h_k(s): failure within k steps.
        P_free = np.where(fail[:, None], 0.0, P_pi)
        h = fail.astype(float)
        for _ in range(int(horizon)):
            h = np.where(fail, 1.0, P_free @ h)
        return float(np.clip(mdp.mu @ h, 0.0, 1.0))
    can_fail = _reaches(P_pi > 0.0, fail)
    active = np.flatnonzero(can_fail & ~fail)
    h = fail.astype(float)
    if active.size:
        A = np.eye(active.size) - P_pi[np.ix_(active, active)]
        b = P_pi[np.ix_(active, np.flatnonzero(fail))].sum(axis=1)
        h[active] = linalg.solve(A, b, check_finite=False)
    return float(np.clip(mdp.mu @ h, 0.0, 1.0))


def kl_divergence(p, q, weights):
    """State-weighted ``sum_s w(s) KL(p(.|s) || q(.|s))``; +inf when support is violated."""
    p = as_probs(p)
    q = as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"policy shapes differ: {p.shape} vs {q.shape}")
    w = check_weights(weights, p.shape[0])
    live = w > 0
    if not live.any():
        return 0.0
    per_state = rel_entr(p[live], q[live]).sum(axis=1)
    if np.any(np.isinf(per_state)):
        return float("inf")
    return float(max(w[live] @ per_state, 0.0))


def total_variation(p, q):
    """Per-state total variation distance between two policies."""
    return 0.5 * np.abs(as_probs(p) - as_probs(q)).sum(axis=1)


def bellman_residual(mdp, policy, values):
    """Max-norm residual of ``values`` in the reward and safety evaluation equations."""
    probs = _policy_probs(mdp, policy)
    P_pi = policy_transition(mdp, probs)
    r_pi = np.sum(probs * mdp.effective_reward, axis=1)
    c_pi = np.sum(probs * mdp.effective_cost, axis=1)
    res_r = values.v_r - (r_pi + mdp.gamma * P_pi @ values.v_r)
    res_c = values.v_c - (c_pi + mdp.gamma * P_pi @ values.v_c)
    return float(max(np.abs(res_r).max(), np.abs(res_c).max()))
