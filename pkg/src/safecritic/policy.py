"""Softmax policies and the constrained natural policy gradient update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import logsumexp, rel_entr
from sklearn.base import BaseEstimator

from ._validation import PoisonedStateError, as_probs, check_finite


class SoftmaxPolicy:
    """Tabular policy ``pi(a|s) = softmax(logits[s])``.

    Instances are treated as immutable; updates return new policies.
    """

    def __init__(self, logits):
        logits = np.array(logits, dtype=float)
        if logits.ndim != 2:
            raise ValueError("logits must be a 2-D (n_states, n_actions) array")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        logits.setflags(write=False)
        self.logits = logits
        self._probs = None

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.zeros((n_states, n_actions)))

    @property
    def shape(self):
        return self.logits.shape

    @property
    def probs(self):
        if self._probs is None:
            p = np.exp(self.logits - logsumexp(self.logits, axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p.setflags(write=False)
            self._probs = p
        return self._probs

    def log_probs(self):
        return self.logits - logsumexp(self.logits, axis=1, keepdims=True)

    def with_logits(self, logits):
        return SoftmaxPolicy(logits)

    def __repr__(self):
        return f"SoftmaxPolicy(n_states={self.shape[0]}, n_actions={self.shape[1]})"


@dataclass(frozen=True)
class NpgConfig:
    """Trust-region settings for :func:`npg_update`.

    ``step_size`` replaces the trust-region scale with a fixed multiplier of
    the natural direction when set (used for small-step comparisons).
    """

    delta: float = 0.01
    beta0: float = 0.7
    max_backtracks: int = 20
    step_mode: str = "fisher_solve"
    damping: float = 1e-4
    step_size: float | None = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if not 0 < self.beta0 <= 1:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.max_backtracks < 1:
            raise ValueError("max_backtracks must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.step_mode not in ("fisher_solve", "closed_form"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")


@dataclass
class LagrangeState:
    lam: float = 0.0
    lr_lambda: float = 4e-2
    sign_mode: str = "standard_dual"

    def __post_init__(self):
        if self.sign_mode not in ("standard_dual", "paper_literal"):
            raise ValueError(f"unknown sign_mode {self.sign_mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class AdvantageEstimates:
    """Per-sample modified advantages ``advantages = a_r - lam_prime * a_c``.

    ``a_c`` holds the discounted sums of critic advantages along each
    trajectory, matching the temporal structure of ``a_r``.
    """

    advantages: np.ndarray
    a_r: np.ndarray
    a_c: np.ndarray
    lam_prime: float
    states: np.ndarray = field(default=None)
    actions: np.ndarray = field(default=None)


@dataclass
class NpgResult:
    policy: SoftmaxPolicy
    accepted: bool
    kl: float
    beta: float
    grad_norm: float
    n_backtracks: int


def _traj_arrays(trajectories):
    if hasattr(trajectories, "states"):
        trajectories = [trajectories]
    return list(trajectories)


def _check_consistent(traj):
    if len(traj.states) > 1 and np.any(traj.next_states[:-1] != traj.states[1:]):
        raise ValueError("inconsistent trajectory: next state of step t differs from state of step t+1")


def _discounted_cumsum(x, factor):
    """``out[t] = sum_k factor^k x[t + k]``."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.copy()
    return lfilter([1.0], [1.0, -factor], x[::-1])[::-1].copy()


def gae_modified_advantages(
    trajectories,
    v_r,
    critic,
    policy,
    lambda_state,
    gamma,
    gae_lambda=1.0,
    rewards=None,
    entropy_coef=0.0,
):
    """Safety-modified GAE.

    Per step ``delta_t = r_t + gamma V(s_{t+1}) - V(s_t) - lam' A_hat_C(s_t, a_t)``
    with ``lam' = lam / (1 - gamma)``, summed with weight
    ``(gamma * gae_lambda)^k``.  ``A_hat_C`` is the critic advantage with
    ``policy`` as baseline.  Terminal steps bootstrap with zero; truncated
    ones with ``V(s_T)``.

    ``critic`` may be a critic object, a raw ``(S, A)`` table or ``None``
    (no safety term).  ``rewards`` optionally overrides the trajectory
    rewards (one array per trajectory), e.g. for shaped baselines.
    """
    trajs = _traj_arrays(trajectories)
    v_r = np.asarray(v_r, dtype=float)
    probs = as_probs(policy)
    if critic is None:
        q = np.zeros_like(probs)
    else:
        q = critic.table() if hasattr(critic, "table") else np.asarray(critic, dtype=float)
    a_hat_c = q - np.sum(probs * q, axis=1, keepdims=True)
    lam_prime = lambda_state.lam / (1.0 - gamma)
    decay = gamma * gae_lambda
    a_r_all, a_c_all, s_all, a_all = [], [], [], []
    for i, traj in enumerate(trajs):
        _check_consistent(traj)
        s, a, s2 = traj.states, traj.actions, traj.next_states
        r = traj.rewards if rewards is None else np.asarray(rewards[i], dtype=float)
        boot = np.where(traj.dones, 0.0, v_r[s2])
        td = r + gamma * boot - v_r[s]
        if entropy_coef:
            td = td - entropy_coef * np.log(probs[s, a])
        a_r_all.append(_discounted_cumsum(td, decay))
        a_c_all.append(_discounted_cumsum(a_hat_c[s, a], decay))
        s_all.append(s)
        a_all.append(a)
    if not trajs:
        empty = np.zeros(0)
        return AdvantageEstimates(empty, empty, empty, lam_prime, empty.astype(int), empty.astype(int))
    a_r = np.concatenate(a_r_all)
    a_c = np.concatenate(a_c_all)
    return AdvantageEstimates(
        advantages=a_r - lam_prime * a_c,
        a_r=a_r,
        a_c=a_c,
        lam_prime=lam_prime,
        states=np.concatenate(s_all),
        actions=np.concatenate(a_all),
    )


def _normalized_weights(n, weights):
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    return w / w.sum()


def policy_gradient(policy, states, actions, advantages, weights=None):
    """Score-function estimate ``E[grad log pi(a|s) A]`` as an (S, A) table."""
    probs = policy.probs
    states = np.asarray(states)
    actions = np.asarray(actions)
    adv = np.asarray(advantages, dtype=float)
    w = _normalized_weights(states.size, weights) * adv
    grad = np.zeros_like(probs)
    np.add.at(grad, (states, actions), w)
    grad -= np.bincount(states, weights=w, minlength=probs.shape[0])[:, None] * probs
    return grad


def surrogate_objective(logits, policy_old, states, actions, advantages, weights=None):
    """Importance-weighted surrogate ``E[pi(a|s) / pi_old(a|s) A]``."""
    new = SoftmaxPolicy(logits).probs
    ratio = new[states, actions] / policy_old.probs[states, actions]
    w = _normalized_weights(np.asarray(states).size, weights)
    return float(np.sum(w * ratio * np.asarray(advantages, dtype=float)))


def fisher_blocks(policy, states, weights=None):
    """Sampled Fisher matrix, one ``(A, A)`` block per distinct sampled state.

    The softmax score of a sample only touches its own state's logits, so
    the full matrix is block diagonal.  Returns ``(unique_states, blocks)``.
    """
    probs = policy.probs
    states = np.asarray(states)
    w = _normalized_weights(states.size, weights)
    uniq, inv = np.unique(states, return_inverse=True)
    n_a = probs.shape[1]
    # E_{a~pi}[g g^T] per sample, g = e_a - pi_s
    p = probs[states]
    per_sample = np.einsum("i,ij,jk->ijk", w, p, np.eye(n_a)) - np.einsum("i,ij,ik->ijk", w, p, p)
    blocks = np.zeros((uniq.size, n_a, n_a))
    np.add.at(blocks, inv, per_sample)
    return uniq, blocks


def _sample_fisher_blocks(policy, states, actions, weights):
    """Outer products of the sampled scores ``g = e_a - pi_s``."""
    probs = policy.probs
    w = _normalized_weights(states.size, weights)
    uniq, inv = np.unique(states, return_inverse=True)
    n_a = probs.shape[1]
    g = -probs[states]
    g[np.arange(states.size), actions] += 1.0
    per_sample = w[:, None, None] * g[:, :, None] * g[:, None, :]
    blocks = np.zeros((uniq.size, n_a, n_a))
    np.add.at(blocks, inv, per_sample)
    return uniq, blocks


def sampled_fisher(policy, states, actions, weights=None):
    """``E[grad log pi grad log pi^T]`` over the samples, as ``(unique_states, blocks)``."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    return _sample_fisher_blocks(policy, states, actions, weights)


def mean_kl(policy_old, policy_new, states, weights=None):
    """Sample-averaged ``KL(pi_old(.|s) || pi_new(.|s))``."""
    states = np.asarray(states)
    w = _normalized_weights(states.size, weights)
    per = rel_entr(policy_old.probs[states], policy_new.probs[states]).sum(axis=1)
    return float(max(w @ per, 0.0))


def _natural_direction(policy, grad, uniq, blocks, damping):
    n_a = blocks.shape[1]
    system = blocks + damping * np.eye(n_a)
    try:
        np.linalg.cholesky(system)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("damped Fisher matrix is not positive definite") from exc
    x = np.zeros_like(grad)
    x[uniq] = np.linalg.solve(system, grad[uniq][..., None])[..., 0]
    return x


def _tabulated_direction(policy, states, actions, adv, weights):
    """Importance-weighted advantage table, centred under the policy."""
    probs = policy.probs
    w = _normalized_weights(states.size, weights)
    num = np.zeros_like(probs)
    np.add.at(num, (states, actions), w * adv)
    mass = np.bincount(states, weights=w, minlength=probs.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        tab = np.where(mass[:, None] > 0, num / (mass[:, None] * probs), 0.0)
    return tab - np.sum(probs * tab, axis=1, keepdims=True)


def npg_update(policy, samples, advantages, cfg):
    """Natural policy gradient step with KL backtracking.

    ``samples`` is ``(states, actions)`` or ``(states, actions, weights)``;
    ``advantages`` an array aligned with the samples or an
    :class:`AdvantageEstimates`.  The step ``x`` solves
    ``(F + damping I) x = g`` and is scaled by
    ``coef * sqrt(2 delta / x^T F x)``; ``coef`` starts at ``beta0`` and is
    multiplied by ``1 - beta0`` after each attempt whose sampled mean KL
    exceeds ``delta``.  After ``max_backtracks`` failures the input policy
    is returned unchanged with ``accepted=False``.
    """
    states, actions, *rest = samples
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    weights = rest[0] if rest else None
    adv = getattr(advantages, "advantages", advantages)
    adv = np.asarray(adv, dtype=float)
    if adv.shape != states.shape:
        raise ValueError("advantages must align with the samples")
    check_finite(adv, "advantages")

    grad = policy_gradient(policy, states, actions, adv, weights)
    check_finite(grad, "policy gradient")
    grad_norm = float(np.linalg.norm(grad))
    if grad_norm == 0.0:
        return NpgResult(policy, True, 0.0, 0.0, 0.0, 0)

    uniq, blocks = _sample_fisher_blocks(policy, states, actions, weights)
    if cfg.step_mode == "fisher_solve":
        x = _natural_direction(policy, grad, uniq, blocks, cfg.damping)
    else:
        x = _tabulated_direction(policy, states, actions, adv, weights)
    check_finite(x, "natural gradient direction")
    quad = float(np.einsum("ui,uij,uj->", x[uniq], blocks, x[uniq]))
    if cfg.step_size is not None:
        scale = float(cfg.step_size)
    elif quad <= 0.0:
        return NpgResult(policy, True, 0.0, 0.0, grad_norm, 0)
    else:
        scale = np.sqrt(2.0 * cfg.delta / quad)

    coef = cfg.beta0
    kl = 0.0
    for attempt in range(cfg.max_backtracks):
        beta = coef * scale if cfg.step_size is None else scale
        candidate = SoftmaxPolicy(policy.logits + beta * x)
        kl = mean_kl(policy, candidate, states, weights)
        if kl <= cfg.delta:
            return NpgResult(candidate, True, kl, beta, grad_norm, attempt)
        coef *= 1.0 - cfg.beta0
        if cfg.step_size is not None:
            scale *= 1.0 - cfg.beta0
    return NpgResult(policy, False, kl, 0.0, grad_norm, cfg.max_backtracks)


def closed_form_npg(policy, advantages, eta, gamma):
    """Exact softmax NPG iterate ``logits + eta / (1 - gamma) * A``."""
    adv = np.asarray(advantages, dtype=float)
    if adv.shape != policy.shape:
        raise ValueError("advantage table must match the policy shape")
    return SoftmaxPolicy(policy.logits + eta / (1.0 - gamma) * adv)


def lagrange_step(state, avg_ac_hat, chi_prime, gamma):
    """Projected dual update.

    ``standard_dual``: ``lam <- max(0, lam + lr * (avg_ac_hat / (1 - gamma) - chi_prime))``
    so the multiplier grows while the linearised constraint is violated.
    ``paper_literal`` applies the opposite sign.
    """
    violation = avg_ac_hat / (1.0 - gamma) - chi_prime
    if not np.isfinite(violation):
        raise PoisonedStateError("non-finite dual gradient")
    sign = 1.0 if state.sign_mode == "standard_dual" else -1.0
    lam = max(0.0, state.lam + sign * state.lr_lambda * violation)
    return LagrangeState(lam=lam, lr_lambda=state.lr_lambda, sign_mode=state.sign_mode)


class TaskValueRegressor(BaseEstimator):
    """Per-state average of discounted returns-to-go; unvisited states get 0."""

    def __init__(self, gamma=0.99):
        self.gamma = gamma

    def fit(self, trajectories, n_states=None, rewards=None):
        trajs = _traj_arrays(trajectories)
        if not trajs:
            raise ValueError("need at least one trajectory")
        if n_states is None:
            n_states = 1 + max(int(max(t.states.max(), t.next_states.max())) for t in trajs if len(t.states))
        total = np.zeros(n_states)
        count = np.zeros(n_states)
        for i, traj in enumerate(trajs):
            r = traj.rewards if rewards is None else np.asarray(rewards[i], dtype=float)
            ret = _discounted_cumsum(r, self.gamma)
            np.add.at(total, traj.states, ret)
            np.add.at(count, traj.states, 1.0)
        self.values_ = np.divide(total, count, out=np.zeros(n_states), where=count > 0)
        self.counts_ = count
        return self

    def predict(self, states):
        return self.values_[np.asarray(states)]


def fit_task_value(trajectories, gamma, n_states=None, rewards=None):
    """Least-squares (per-state mean) fit of V_R to discounted returns-to-go."""
    return TaskValueRegressor(gamma=gamma).fit(trajectories, n_states=n_states, rewards=rewards).values_
