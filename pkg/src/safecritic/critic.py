"""Conservative (over-estimating) tabular safety critics.

The critic minimises, by plain gradient descent on the table entries,

    alpha * (-E_{s~D, a~pi}[q(s,a)] + E_{(s,a)~D}[q(s,a)])
        + 1/2 E_D[(q(s,a) - (c + gamma (1 - done) E_{a'~pi} q(s',a')))^2]

i.e. the CQL penalty with its sign reversed, so the fixed point sits above
the true discounted failure value under ``pi``.  Targets are held fixed
within a step and entries are clipped to [0, 1] afterwards.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_probs, check_finite, check_index_array
from .cmdp import exact_policy_values


@dataclass
class TransitionBatch:
    """Parallel arrays of ``(s, a, s', r, c, done)`` records with optional weights."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    c: np.ndarray
    done: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64).ravel()
        self.a = np.asarray(self.a, dtype=np.int64).ravel()
        self.s_next = np.asarray(self.s_next, dtype=np.int64).ravel()
        self.r = np.asarray(self.r, dtype=float).ravel()
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.done = np.asarray(self.done, dtype=bool).ravel()
        n = self.s.size
        if not all(x.size == n for x in (self.a, self.s_next, self.r, self.c, self.done)):
            raise ValueError("batch fields must have equal length")
        if n and (self.c.min() < 0 or self.c.max() > 1):
            raise ValueError("safety labels must lie in [0, 1]")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=float).ravel()
            if self.weight.size != n or np.any(self.weight < 0):
                raise ValueError("weights must be nonnegative and match the batch length")

    def __len__(self):
        return self.s.size

    @classmethod
    def from_records(cls, records):
        """Build from an iterable of ``(s, a, s', r, c, done)`` tuples."""
        records = list(records)
        if not records:
            return cls.empty()
        cols = list(zip(*records))
        return cls(*cols)

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, z, z, z)

    @classmethod
    def concatenate(cls, batches):
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        weights = None
        if any(b.weight is not None for b in batches):
            weights = np.concatenate([b.weight if b.weight is not None else np.ones(len(b)) for b in batches])
        return cls(
            np.concatenate([b.s for b in batches]),
            np.concatenate([b.a for b in batches]),
            np.concatenate([b.s_next for b in batches]),
            np.concatenate([b.r for b in batches]),
            np.concatenate([b.c for b in batches]),
            np.concatenate([b.done for b in batches]),
            weights,
        )

    def subset(self, idx):
        return TransitionBatch(
            self.s[idx],
            self.a[idx],
            self.s_next[idx],
            self.r[idx],
            self.c[idx],
            self.done[idx],
            None if self.weight is None else self.weight[idx],
        )

    def check_bounds(self, n_states, n_actions):
        check_index_array(self.s, n_states, "batch states")
        check_index_array(self.s_next, n_states, "batch next states")
        check_index_array(self.a, n_actions, "batch actions")
        return self


class SafetyCritic(BaseEstimator):
    """Tabular conservative safety critic ``q(s, a)`` in [0, 1].

    Parameters
    ----------
    alpha : float
        Weight of the (sign-reversed) CQL penalty; 0 gives plain policy
        evaluation.
    lr : float
        Step size applied to the batch-mean gradient.
    gamma : float
        Discount of the Bellman backup.
    precondition : {"state", "none"}
        ``"state"`` divides each state's gradient row by that state's share
        of the batch, a diagonal preconditioner that leaves the fixed point
        unchanged but lets rarely sampled states converge at the same rate
        as frequent ones.  ``"none"`` is the plain batch-mean gradient.

    Attributes
    ----------
    q_ : ndarray of shape (n_states, n_actions)
    n_updates_ : int
    """

    def __init__(self, alpha=0.5, lr=1.0, gamma=0.99, precondition="state"):
        self.alpha = alpha
        self.lr = lr
        self.gamma = gamma
        self.precondition = precondition

    def _check_params(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.precondition not in ("state", "none"):
            raise ValueError(f"unknown precondition {self.precondition!r}")

    def initialize(self, n_states, n_actions):
        self._check_params()
        self.q_ = np.zeros((n_states, n_actions))
        self.n_updates_ = 0
        return self

    def partial_fit(self, batch, policy):
        """One gradient step on the conservative objective (see :func:`cql_step`)."""
        return cql_step(self, batch, policy)

    def fit(self, batch, policy, n_steps=1000, tol=None):
        """Run ``n_steps`` full-batch steps from the current table (zeros if unset)."""
        probs = as_probs(policy)
        if not hasattr(self, "q_"):
            self.initialize(*probs.shape)
        for _ in range(n_steps):
            before = self.q_.copy() if tol is not None else None
            cql_step(self, batch, probs)
            if tol is not None and np.max(np.abs(self.q_ - before)) < tol:
                break
        return self

    def predict(self, states, actions):
        return self.q_[np.asarray(states), np.asarray(actions)]

    def table(self):
        return self.q_

    def advantages(self, baseline_policy):
        """``q(s, a) - E_{a'~baseline}[q(s, a')]`` for every pair."""
        probs = as_probs(baseline_policy)
        return self.q_ - np.sum(probs * self.q_, axis=1, keepdims=True)

    def snapshot(self):
        """Frozen copy safe to share with rollout code."""
        snap = copy.copy(self)
        snap.q_ = self.q_.copy()
        snap.q_.setflags(write=False)
        return snap


def cql_step(critic, batch, policy):
    """Apply one conservative update to ``critic`` in place and return it.

    Each record contributes the Bellman-error gradient
    ``q(s,a) - (c + gamma (1-done) E_pi q(s', .))`` at ``(s, a)``, plus
    ``+alpha`` at the data pair and ``-alpha pi(.|s)`` across the actions
    of its state.  Records are averaged (weighted when the batch carries
    weights).
    """
    probs = as_probs(policy)
    if not hasattr(critic, "q_"):
        critic.initialize(*probs.shape)
    q = critic.q_
    if probs.shape != q.shape:
        raise ValueError(f"policy shape {probs.shape} does not match critic {q.shape}")
    if len(batch) == 0:
        warnings.warn("cql_step called with an empty batch; critic unchanged", RuntimeWarning)
        critic.last_step_empty_ = True
        return critic
    critic.last_step_empty_ = False
    s, a, s2 = batch.s, batch.a, batch.s_next
    w = np.ones(len(batch)) if batch.weight is None else batch.weight
    total = w.sum()
    if total <= 0:
        raise ValueError("batch weights sum to zero")
    w = w / total
    v_next = np.einsum("ij,ij->i", probs[s2], q[s2])
    target = batch.c + critic.gamma * np.where(batch.done, 0.0, v_next)
    resid = q[s, a] - target
    n_s, n_a = q.shape
    flat = s * n_a + a
    grad = np.bincount(flat, weights=w * (resid + critic.alpha), minlength=n_s * n_a).reshape(n_s, n_a)
    state_mass = np.bincount(s, weights=w, minlength=n_s)
    if critic.alpha:
        grad -= critic.alpha * state_mass[:, None] * probs
    if getattr(critic, "precondition", "none") == "state":
        grad = np.divide(grad, state_mass[:, None], out=np.zeros_like(grad), where=state_mass[:, None] > 0)
    check_finite(grad, "critic gradient")
    q_new = np.clip(q - critic.lr * grad, 0.0, 1.0)
    critic.q_ = q_new
    critic.n_updates_ += 1
    return critic


def _table_of(critic):
    if isinstance(critic, (SafetyCritic, EnsembleCritic)):
        return critic.table()
    return np.asarray(critic, dtype=float)


def conservative_gap(critic, mdp, policy, dist, action_policy=None):
    """Expected over-estimation of the safety advantage.

    ``E_{s~dist, a~action_policy}[A_hat_C(s,a) - A_C(s,a)]`` where both
    advantages are taken with respect to ``policy``: the learned one from the
    critic table and the true one from the exact oracle.  ``action_policy``
    defaults to ``policy``; note that the gap is then identically zero,
    because advantages are centred under their own baseline policy.
    """
    probs = as_probs(policy)
    act = probs if action_policy is None else as_probs(action_policy)
    dist = np.asarray(dist, dtype=float)
    q_hat = _table_of(critic)
    true = exact_policy_values(mdp, probs)
    a_hat = q_hat - np.sum(probs * q_hat, axis=1, keepdims=True)
    gap = np.sum(act * (a_hat - true.a_c), axis=1)
    return float(dist @ gap)


class EnsembleCritic(BaseEstimator):
    """Ensemble of non-conservative critics trained on bootstrapped batches.

    The gate uses the member-wise maximum as a pessimistic safety estimate.
    """

    def __init__(self, n_members=20, lr=1.0, gamma=0.99, random_state=None, precondition="state"):
        self.n_members = n_members
        self.lr = lr
        self.gamma = gamma
        self.random_state = random_state
        self.precondition = precondition

    def initialize(self, n_states, n_actions):
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        self.members_ = [
            SafetyCritic(alpha=0.0, lr=self.lr, gamma=self.gamma, precondition=self.precondition)
            .initialize(n_states, n_actions)
            for _ in range(self.n_members)
        ]
        self._rng = np.random.default_rng(self.random_state)
        return self

    def partial_fit(self, batch, policy):
        """One step per member, each on its own bootstrap resample of ``batch``."""
        probs = as_probs(policy)
        if not hasattr(self, "members_"):
            self.initialize(*probs.shape)
        n = len(batch)
        if n == 0:
            warnings.warn("empty batch; ensemble unchanged", RuntimeWarning)
            return self
        for member in self.members_:
            idx = self._rng.integers(n, size=n)
            cql_step(member, batch.subset(idx), probs)
        return self

    def member_tables(self):
        return np.stack([m.q_ for m in self.members_])

    def table(self):
        return self.member_tables().max(axis=0)

    def disagreement(self, states=None):
        """Mean across (s, a) of the member standard deviation."""
        std = self.member_tables().std(axis=0)
        if states is not None:
            std = std[np.unique(np.asarray(states))]
        return float(std.mean()) if std.size else 0.0

    def snapshot(self):
        snap = copy.copy(self)
        snap.members_ = [m.snapshot() for m in self.members_]
        return snap


def ensemble_gate_value(ens, s, a):
    """Aggregate gate value: the largest member estimate at ``(s, a)``."""
    return float(max(m.q_[s, a] for m in ens.members_))
