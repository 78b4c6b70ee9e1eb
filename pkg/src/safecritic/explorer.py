"""Gated data collection: the epsilon threshold, rejection-sampled actions,
episode rollouts and the replay buffer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_probs
from .critic import TransitionBatch

_FIELDS = ("s", "a", "s_next", "r", "c", "done")


@dataclass(frozen=True)
class GateConfig:
    """Rejection-sampling gate settings.

    ``selection="min_q"`` returns the qualifying draw with the smallest
    ``q``; ``"first"`` returns the first qualifying draw.  Either way the
    fallback, when nothing qualifies, is the drawn action with minimal ``q``.
    ``enabled=False`` executes a single draw from the policy unchecked.
    """

    max_resamples: int = 100
    epsilon: float = 0.0
    fallback: str = "min_q"
    selection: str = "min_q"
    enabled: bool = True

    def __post_init__(self):
        if self.max_resamples < 1:
            raise ValueError("max_resamples must be >= 1")
        if self.fallback != "min_q":
            raise ValueError(f"unknown fallback {self.fallback!r}")
        if self.selection not in ("min_q", "first"):
            raise ValueError(f"unknown selection {self.selection!r}")

    def with_epsilon(self, epsilon):
        return GateConfig(self.max_resamples, float(epsilon), self.fallback, self.selection, self.enabled)


@dataclass
class GateStats:
    draws: int
    fallback: bool
    q_gate: float


class ReplayBuffer:
    """Bounded FIFO store of ``(s, a, s', r, c, done)`` records.

    Storage grows geometrically up to ``capacity``; after that the oldest
    records are overwritten.  ``n_inserted`` counts every append ever made.
    """

    def __init__(self, capacity=1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._alloc = 0
        self._data = {}
        self._alloc_to(min(1024, self.capacity))
        self._head = 0
        self._size = 0
        self.n_inserted = 0

    def _alloc_to(self, n):
        dtypes = {"s": np.int64, "a": np.int64, "s_next": np.int64, "r": float, "c": float, "done": bool}
        new = {k: np.zeros(n, dtype=dtypes[k]) for k in _FIELDS}
        if self._alloc:
            for k in _FIELDS:
                new[k][: self._alloc] = self._data[k]
        self._data = new
        self._alloc = n

    def __len__(self):
        return self._size

    def add_batch(self, batch):
        n = len(batch)
        if n == 0:
            return
        if np.any(batch.c < 0) or np.any(batch.c > 1):
            raise ValueError("safety labels must lie in [0, 1]")
        cols = {"s": batch.s, "a": batch.a, "s_next": batch.s_next, "r": batch.r, "c": batch.c, "done": batch.done}
        if n >= self.capacity:
            cols = {k: v[-self.capacity:] for k, v in cols.items()}
            n = self.capacity
        # grow while the buffer has never wrapped
        while self._size == self._head and self._head + n > self._alloc and self._alloc < self.capacity:
            self._alloc_to(min(self.capacity, 2 * self._alloc))
        idx = (self._head + np.arange(n)) % self._alloc
        for k in _FIELDS:
            self._data[k][idx] = cols[k]
        self._head = (self._head + n) % self._alloc
        self._size = min(self._size + n, self._alloc)
        self.n_inserted += len(batch)

    def add(self, s, a, s_next, r, c, done):
        self.add_batch(TransitionBatch([s], [a], [s_next], [r], [c], [done]))

    def _order(self):
        """Storage indices from oldest to newest."""
        if self._size < self._alloc:
            return np.arange(self._size)
        return (self._head + np.arange(self._alloc)) % self._alloc

    def all(self):
        idx = self._order()
        return TransitionBatch(*(self._data[k][idx] for k in _FIELDS))

    def sample(self, batch_size, rng):
        """Uniform sample without replacement (the whole buffer if smaller)."""
        if self._size == 0:
            return TransitionBatch.empty()
        if batch_size >= self._size:
            idx = self._order()
        else:
            idx = self._order()[rng.choice(self._size, size=batch_size, replace=False)]
        return TransitionBatch(*(self._data[k][idx] for k in _FIELDS))


@dataclass
class Trajectory:
    """Executed transitions of one episode, in order."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return self.states.size

    def to_batch(self):
        return TransitionBatch(self.states, self.actions, self.next_states, self.rewards, self.costs, self.dones)


@dataclass
class EpisodeResult:
    total_reward: float
    failed: bool
    steps: int
    cost_sum: float
    resamples: np.ndarray
    fallbacks: np.ndarray
    trajectory: Trajectory = field(repr=False)

    @property
    def fallback_rate(self):
        return float(self.fallbacks.mean()) if self.steps else 0.0


def epsilon_schedule(chi, v_hat_c_prev, gamma):
    """Gate threshold ``(1 - gamma) (chi - v_hat)``; deliberately not clamped."""
    if not 0.0 <= v_hat_c_prev <= 1.0:
        raise ValueError("v_hat_c_prev must lie in [0, 1]")
    return (1.0 - gamma) * (chi - v_hat_c_prev)


def _q_table(critic):
    if critic is None:
        return None
    return critic.table() if hasattr(critic, "table") else np.asarray(critic, dtype=float)


def _select(cum_row, q_row, cfg, u):
    """Gate decision for one state from ``max_resamples`` uniforms ``u``."""
    draws = np.minimum(np.searchsorted(cum_row, u, side="right"), cum_row.size - 1)
    qd = q_row[draws]
    if cfg.selection == "first":
        ok = np.flatnonzero(qd <= cfg.epsilon)
        if ok.size:
            return int(draws[ok[0]]), GateStats(int(ok[0]) + 1, False, float(qd[ok[0]]))
    # the minimum over the draws qualifies iff any draw qualifies
    j = int(np.argmin(qd))
    fallback = bool(qd[j] > cfg.epsilon)
    return int(draws[j]), GateStats(draws.size, fallback, float(qd[j]))


def _row_cdf(probs):
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = 1.0
    return cum


def gated_action(policy, critic, s, cfg, rng):
    """Pick an action in state ``s`` through the rejection gate.

    Draws ``max_resamples`` actions from ``pi(.|s)`` with replacement and
    applies the selection rule of ``cfg``.  Returns ``(action, GateStats)``.
    """
    probs = as_probs(policy)
    cum = _row_cdf(probs[s])
    if not cfg.enabled or critic is None:
        a = int(min(np.searchsorted(cum, rng.random(), side="right"), cum.size - 1))
        return a, GateStats(1, False, float("nan"))
    q = _q_table(critic)
    return _select(cum, q[s], cfg, rng.random(cfg.max_resamples))


def _sample_start(mdp, rng):
    return int(min(np.searchsorted(mdp.cumulative_mu, rng.random(), side="right"), mdp.n_states - 1))


def run_episode(mdp, policy, critic, cfg, horizon, rng, buffer=None, trace=None):
    """Roll out one gated episode from ``s0 ~ mu``.

    Stops on entering a terminal state or after ``horizon`` steps.  Every
    transition is appended to ``buffer`` (when given) in execution order.
    ``trace`` is an optional text stream receiving one JSON line per step.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    probs = as_probs(policy)
    cum_pi = _row_cdf(probs)
    q = _q_table(critic)
    gate = cfg.enabled and q is not None
    cum_p = mdp.cumulative_transition
    R = mdp.reward
    C = mdp.constraint
    term = mdp.terminal_mask
    n_a = mdp.n_actions
    k = cfg.max_resamples

    S, A, S2, Rs, Cs, D = [], [], [], [], [], []
    res, fb = [], []
    s = _sample_start(mdp, rng)
    for _ in range(horizon):
        if gate:
            a, stats = _select(cum_pi[s], q[s], cfg, rng.random(k))
        else:
            a = int(min(np.searchsorted(cum_pi[s], rng.random(), side="right"), n_a - 1))
            stats = GateStats(1, False, float("nan"))
        s2 = int(min(np.searchsorted(cum_p[s, a], rng.random(), side="right"), mdp.n_states - 1))
        r, c, done = float(R[s, a]), float(C[s2]), bool(term[s2])
        S.append(s), A.append(a), S2.append(s2), Rs.append(r), Cs.append(c), D.append(done)
        res.append(stats.draws), fb.append(stats.fallback)
        if trace is not None:
            trace.write(json.dumps({
                "s": s, "a": a, "s_next": s2, "r": r, "c": c,
                "q_gate": None if np.isnan(stats.q_gate) else stats.q_gate,
                "resamples": stats.draws, "fallback": stats.fallback,
            }) + "\n")
        s = s2
        if done:
            break

    traj = Trajectory(
        np.asarray(S, dtype=np.int64),
        np.asarray(A, dtype=np.int64),
        np.asarray(S2, dtype=np.int64),
        np.asarray(Rs, dtype=float),
        np.asarray(Cs, dtype=float),
        np.asarray(D, dtype=bool),
    )
    if buffer is not None:
        buffer.add_batch(traj.to_batch())
    failed = bool(len(traj) and mdp.failure_mask[traj.next_states[-1]])
    return EpisodeResult(
        total_reward=float(traj.rewards.sum()),
        failed=failed,
        steps=len(traj),
        cost_sum=float(traj.costs.sum()),
        resamples=np.asarray(res, dtype=np.int64),
        fallbacks=np.asarray(fb, dtype=bool),
        trajectory=traj,
    )


def average_failures(results, binary=True):
    """Empirical failure estimate: failure fraction, or mean clamped signal sum."""
    results = list(results)
    if not results:
        raise ValueError("need at least one episode")
    if binary:
        return float(np.mean([r.failed for r in results]))
    return float(np.clip(np.mean([r.cost_sum for r in results]), 0.0, 1.0))
