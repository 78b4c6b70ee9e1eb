"""Experiment orchestration: training loops, baselines, diagnostics and metric export."""

from __future__ import annotations

import csv
import io as _io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import PoisonedStateError, as_probs
from .cmdp import exact_policy_values, expected_failure_probability
from .critic import EnsembleCritic, SafetyCritic, conservative_gap
from .envs import TrapGridSpec, build_continuous_signal_grid, build_trap_grid, default_trap_grid_spec, generate_seed_dataset
from .explorer import GateConfig, ReplayBuffer, average_failures, epsilon_schedule, run_episode
from .policy import (
    LagrangeState,
    NpgConfig,
    SoftmaxPolicy,
    fit_task_value,
    gae_modified_advantages,
    lagrange_step,
    npg_update,
)

ALGORITHMS = ("csc", "base", "base_shaped", "q_ensemble")
CSV_COLUMNS = (
    "epoch", "episode", "avg_reward", "avg_failures", "cum_failures",
    "lambda", "epsilon", "delta_gap", "kl", "fallback_rate",
)
SCHEMA = "safecritic-metrics/1 " + ",".join(CSV_COLUMNS)
THREADS_ENV = "SAFECRITIC_THREADS"


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a training run; serialisable via :meth:`to_dict`.

    ``chi_schedule="inv_sqrt"`` uses ``chi_t = chi_c0 / sqrt(t)`` in place
    of the fixed ``chi``.  ``seed_transitions`` offline tuples are added to
    the buffer before training.
    """

    env: TrapGridSpec = field(default_factory=default_trap_grid_spec)
    signal: str = "binary"
    algorithm: str = "csc"
    chi: float = 0.03
    chi_schedule: str = "fixed"
    chi_c0: float = 0.1
    alpha: float = 0.5
    lr_q: float = 0.5
    critic_precondition: str = "state"
    lr_lambda: float = 4e-2
    delta: float = 0.01
    gamma: float = 0.99
    beta0: float = 0.7
    max_backtracks: int = 20
    damping: float = 1e-4
    episodes_per_epoch: int = 10
    steps_per_epoch: int = 50
    epochs: int = 200
    seeds: tuple = (0,)
    shaping_penalty: float = 10.0
    ensemble_size: int = 20
    horizon: int = 500
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    max_resamples: int = 100
    gate_selection: str = "min_q"
    sign_mode: str = "standard_dual"
    gae_lambda: float = 1.0
    entropy_coef: float = 0.0
    seed_transitions: int = 0
    diagnostics: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.env, dict):
            object.__setattr__(self, "env", TrapGridSpec.from_dict(self.env))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.signal not in ("binary", "continuous"):
            raise ValueError("signal must be 'binary' or 'continuous'")
        if self.chi_schedule not in ("fixed", "inv_sqrt"):
            raise ValueError("chi_schedule must be 'fixed' or 'inv_sqrt'")
        if not 0.0 <= self.chi < 1.0:
            raise ValueError("chi must lie in [0, 1)")
        for name in ("lr_q", "lr_lambda", "delta", "chi_c0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("episodes_per_epoch", "steps_per_epoch", "epochs", "horizon", "batch_size", "ensemble_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed_transitions < 0:
            raise ValueError("seed_transitions must be >= 0")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def to_dict(self):
        d = asdict(self)
        d["env"] = self.env.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "env" in d:
            d["env"] = TrapGridSpec.from_dict(d["env"])
        return cls(**d)

    def replace(self, **changes):
        return replace(self, **changes)

    def build_mdp(self):
        spec = replace(self.env, gamma=self.gamma, chi=self.chi)
        return build_trap_grid(spec) if self.signal == "binary" else build_continuous_signal_grid(spec)


@dataclass
class BoundDiagnostics:
    """Exact quantities entering the failure-probability bound for one update."""

    v_c_new: float
    v_c_old: float
    v_hat: float
    zeta: float
    delta_gap: float
    eps_c: float
    lemma_lhs: float
    lemma_rhs: float
    theorem_rhs: float
    lemma_holds: bool
    theorem_holds: bool


@dataclass
class EpochRecord:
    epoch: int
    episode: int
    avg_reward: float
    avg_failures: float
    cum_failures: float
    lam: float
    epsilon: float
    delta_gap: float
    kl: float
    fallback_rate: float
    chi: float = float("nan")
    transitions: int = 0
    accepted: bool = True
    disagreement: float = float("nan")
    bound: BoundDiagnostics | None = None

    def row(self):
        return (self.epoch, self.episode, self.avg_reward, self.avg_failures, self.cum_failures,
                self.lam, self.epsilon, self.delta_gap, self.kl, self.fallback_rate)


@dataclass
class MetricsSeries:
    """Per-epoch and per-episode metrics of one run.

    ``episode_failures`` and ``episode_steps`` hold one entry per episode in
    execution order, so ``reg_c`` can be recomputed from raw indicators.
    """

    algorithm: str = "csc"
    seed: int = 0
    records: list = field(default_factory=list)
    episode_rewards: list = field(default_factory=list)
    episode_failures: list = field(default_factory=list)
    episode_costs: list = field(default_factory=list)
    episode_steps: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_policy: SoftmaxPolicy | None = None
    last_policy_old: SoftmaxPolicy | None = None
    final_critic: object = None
    last_v_hat: float = 0.0
    last_chi: float = 0.0

    @property
    def reg_c(self):
        """Cumulative failure count Reg_C(T)."""
        return float(np.sum(self.episode_failures))

    @property
    def total_transitions(self):
        return int(np.sum(self.episode_steps))

    def column(self, name):
        attr = {"lambda": "lam"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.records], dtype=float)


def chi_schedule(t, c0):
    """Decaying threshold ``min(c0 / sqrt(t), 1 - 1e-9)`` for epoch ``t >= 1``."""
    if t < 1:
        raise ValueError("epoch index must be >= 1")
    if c0 <= 0:
        raise ValueError("c0 must be > 0")
    return min(c0 / np.sqrt(t), 1.0 - 1e-9)


def _chi_at(cfg, epoch):
    return cfg.chi if cfg.chi_schedule == "fixed" else chi_schedule(epoch, cfg.chi_c0)


def theorem_diagnostics(mdp, policy_old, policy_new, critic, cfg, v_hat, chi=None):
    """Evaluate both sides of the one-step failure bound exactly.

    ``v_hat`` is the empirical failure rate measured under ``policy_old``.
    Failure probabilities are undiscounted (truncated at ``cfg.horizon``);
    advantages and the conservative gap are discounted.
    """
    gamma = mdp.gamma
    chi = mdp.chi if chi is None else chi
    old = exact_policy_values(mdp, policy_old)
    p_new = as_probs(policy_new)
    horizon = cfg.horizon
    if mdp.binary:
        v_c_old = expected_failure_probability(mdp, policy_old, horizon=horizon)
        v_c_new = expected_failure_probability(mdp, policy_new, horizon=horizon)
    else:
        v_c_old = float(mdp.mu @ old.v_c)
        v_c_new = float(mdp.mu @ exact_policy_values(mdp, policy_new).v_c)
    gap = conservative_gap(critic, mdp, policy_old, old.d_pi, action_policy=policy_new)
    expected_ac = np.sum(p_new * old.a_c, axis=1)
    eps_c = float(np.max(np.abs(expected_ac)))
    zeta = abs(v_hat - v_c_old)
    lemma_lhs = v_c_old + float(old.d_pi @ expected_ac) / (1.0 - gamma)
    lemma_rhs = chi + zeta - gap / (1.0 - gamma)
    theorem_rhs = lemma_rhs + np.sqrt(2.0 * cfg.delta) * gamma * eps_c / (1.0 - gamma) ** 2
    return BoundDiagnostics(
        v_c_new=v_c_new,
        v_c_old=v_c_old,
        v_hat=float(v_hat),
        zeta=zeta,
        delta_gap=gap,
        eps_c=eps_c,
        lemma_lhs=lemma_lhs,
        lemma_rhs=lemma_rhs,
        theorem_rhs=float(theorem_rhs),
        lemma_holds=bool(lemma_lhs <= lemma_rhs),
        theorem_holds=bool(v_c_new <= theorem_rhs),
    )


def _make_critic(cfg, n_s, n_a, rng):
    if cfg.algorithm == "csc":
        return SafetyCritic(
            alpha=cfg.alpha, lr=cfg.lr_q, gamma=cfg.gamma, precondition=cfg.critic_precondition
        ).initialize(n_s, n_a)
    if cfg.algorithm == "q_ensemble":
        seed = int(rng.integers(2**63))
        return EnsembleCritic(
            cfg.ensemble_size, lr=cfg.lr_q, gamma=cfg.gamma, random_state=seed, precondition=cfg.critic_precondition
        ).initialize(n_s, n_a)
    return None


def _run(cfg, seed):
    rng = np.random.default_rng(seed)
    mdp = cfg.build_mdp()
    n_s, n_a = mdp.n_states, mdp.n_actions
    policy = SoftmaxPolicy.uniform(n_s, n_a)
    critic = _make_critic(cfg, n_s, n_a, rng)
    use_dual = critic is not None
    lam = LagrangeState(0.0, cfg.lr_lambda, cfg.sign_mode)
    npg_cfg = NpgConfig(cfg.delta, cfg.beta0, cfg.max_backtracks, damping=cfg.damping)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    if cfg.seed_transitions:
        buffer.add_batch(generate_seed_dataset(mdp, cfg.seed_transitions, rng).batch)
    gate0 = GateConfig(cfg.max_resamples, 0.0, selection=cfg.gate_selection, enabled=use_dual)
    series = MetricsSeries(algorithm=cfg.algorithm, seed=int(seed))
    v_hat_prev = 0.0
    n_episodes = 0
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            chi_t = _chi_at(cfg, epoch)
            eps = epsilon_schedule(chi_t, v_hat_prev, cfg.gamma)
            gate = gate0.with_epsilon(eps)
            q_snap = None if critic is None else critic.table().copy()
            results = [run_episode(mdp, policy, q_snap, gate, cfg.horizon, rng, buffer)
                       for _ in range(cfg.episodes_per_epoch)]
            n_episodes += len(results)
            v_hat = average_failures(results, binary=mdp.binary)
            trajs = [r.trajectory for r in results]
            rewards = None
            if cfg.algorithm == "base_shaped":
                rewards = [t.rewards - cfg.shaping_penalty * t.costs for t in trajs]
            v_r = fit_task_value(trajs, cfg.gamma, n_states=n_s, rewards=rewards)
            states = np.concatenate([t.states for t in trajs])
            actions = np.concatenate([t.actions for t in trajs])

            policy_old = policy
            res = None
            for _ in range(cfg.steps_per_epoch):
                if critic is not None:
                    critic.partial_fit(buffer.sample(cfg.batch_size, rng), policy)
                adv = gae_modified_advantages(
                    trajs, v_r, critic, policy_old, lam, cfg.gamma,
                    gae_lambda=cfg.gae_lambda, rewards=rewards, entropy_coef=cfg.entropy_coef,
                )
                res = npg_update(policy_old, (states, actions), adv, npg_cfg)
                policy = res.policy
                violation = 0.0
                if use_dual:
                    q = critic.table()
                    ac = float(np.sum((policy.probs - policy_old.probs)[states] * q[states], axis=1).mean())
                    violation = ac / (1.0 - cfg.gamma) - (chi_t - v_hat)
                    lam = lagrange_step(lam, ac, chi_t - v_hat, cfg.gamma)
                step += 1
                series.events.append({
                    "type": "update", "epoch": epoch, "step": step, "kl": res.kl, "beta": res.beta,
                    "accepted": res.accepted, "lambda": lam.lam, "grad_norm": res.grad_norm,
                    "violation": violation,
                })

            for r in results:
                series.episode_rewards.append(r.total_reward)
                series.episode_failures.append(int(r.failed))
                series.episode_costs.append(r.cost_sum)
                series.episode_steps.append(r.steps)
            bound = None
            gap = float("nan")
            if critic is not None and cfg.diagnostics:
                bound = theorem_diagnostics(mdp, policy_old, policy, critic.table(), cfg, v_hat, chi=chi_t)
                gap = bound.delta_gap
            steps = np.concatenate([r.fallbacks for r in results])
            rec = EpochRecord(
                epoch=epoch,
                episode=n_episodes,
                avg_reward=float(np.mean([r.total_reward for r in results])),
                avg_failures=v_hat,
                cum_failures=series.reg_c,
                lam=lam.lam,
                epsilon=eps,
                delta_gap=gap,
                kl=res.kl if res.accepted else 0.0,
                fallback_rate=float(steps.mean()) if steps.size else 0.0,
                chi=chi_t,
                transitions=series.total_transitions,
                accepted=res.accepted,
                disagreement=critic.disagreement(states) if isinstance(critic, EnsembleCritic) else float("nan"),
                bound=bound,
            )
            series.records.append(rec)
            series.events.append({"type": "epoch", **_record_event(rec)})
            series.last_policy_old = policy_old
            series.last_v_hat = v_hat
            series.last_chi = chi_t
            v_hat_prev = v_hat
    except PoisonedStateError as exc:
        exc.partial_metrics = series
        raise
    series.final_policy = policy
    series.final_critic = critic
    return series


def _record_event(rec):
    d = {k: v for k, v in asdict(rec).items() if k != "bound"}
    d["lambda"] = d.pop("lam")
    if rec.bound is not None:
        d["bound"] = asdict(rec.bound)
    return d


def run_csc(cfg, seed=None):
    """Train CSC for one seed (the first configured seed when omitted)."""
    if cfg.algorithm != "csc":
        cfg = cfg.replace(algorithm="csc")
    return _run(cfg, cfg.seeds[0] if seed is None else seed)


def run_baseline(cfg, seed=None):
    """Run ``base``, ``base_shaped`` or ``q_ensemble`` for one seed."""
    if cfg.algorithm == "csc":
        raise ValueError("run_baseline needs a baseline algorithm; use run_csc for csc")
    return _run(cfg, cfg.seeds[0] if seed is None else seed)


def run_experiment(cfg, n_threads=None):
    """Run every configured seed; returns ``{seed: MetricsSeries}``.

    Seeds run in a thread pool sized by ``n_threads`` or the
    ``SAFECRITIC_THREADS`` environment variable (default 1).
    """
    if n_threads is None:
        n_threads = int(os.environ.get(THREADS_ENV, "1"))
    runner = run_csc if cfg.algorithm == "csc" else run_baseline
    if n_threads <= 1 or len(cfg.seeds) == 1:
        return {s: runner(cfg, s) for s in cfg.seeds}
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = {s: pool.submit(runner, cfg, s) for s in cfg.seeds}
        return {s: f.result() for s, f in futures.items()}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(series):
    buf = _io.StringIO()
    buf.write(f"# {SCHEMA}\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for rec in series.records:
        buf.write(",".join(_fmt(v) for v in rec.row()) + "\n")
    return buf.getvalue()


def metrics_jsonl(series):
    lines = [json.dumps({"type": "run", "algorithm": series.algorithm, "seed": series.seed})]
    lines += [json.dumps(e) for e in series.events]
    return "\n".join(lines) + "\n"


def export_metrics(series, path, name="metrics"):
    """Write ``<name>.csv`` and ``<name>.jsonl`` under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    csv_path = path / f"{name}.csv"
    jsonl_path = path / f"{name}.jsonl"
    csv_path.write_text(metrics_csv(series))
    jsonl_path.write_text(metrics_jsonl(series))
    return csv_path, jsonl_path


def read_metrics_csv(path):
    """Parse an exported CSV back into ``{column: ndarray}``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != f"# {SCHEMA}":
        raise ValueError(f"{path} does not carry the expected schema header")
    reader = csv.reader(text[1:])
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {header}")
    rows = [[float(x) for x in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(-1, len(CSV_COLUMNS))
    return {c: data[:, i] for i, c in enumerate(CSV_COLUMNS)}


def final_reward(series, window=10):
    """Mean per-epoch average reward over the last ``window`` epochs."""
    return float(series.column("avg_reward")[-window:].mean())


def epochs_to_fraction(series, fraction=0.9, window=10):
    """First epoch whose ``window``-epoch moving average reaches ``fraction`` of the final reward.

    Returns ``None`` if never reached (possible only when the final reward is
    negative).
    """
    r = series.column("avg_reward")
    target = fraction * final_reward(series, window)
    ma = np.convolve(r, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(ma >= target)
    return int(hit[0] + window) if hit.size else None


def regret_slope(series, start_fraction=0.5):
    """Least-squares slope of log Reg_C(T) against log T over the tail of training."""
    t = np.array([r.transitions for r in series.records], dtype=float)
    reg = series.column("cum_failures")
    keep = np.arange(t.size) >= int(start_fraction * t.size)
    keep &= reg > 0
    if keep.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(t[keep]), np.log(reg[keep]), 1)[0])


def late_bound_rate(series, last_fraction=0.25):
    """Fraction of the final epochs on which the exact bound holds."""
    recs = [r for r in series.records if r.bound is not None]
    if not recs:
        raise ValueError("run carries no bound diagnostics")
    tail = recs[len(recs) - max(1, int(round(last_fraction * len(recs)))):]
    return float(np.mean([r.bound.theorem_holds for r in tail]))


class CSCAgent(BaseEstimator):
    """Estimator wrapper around a single training run.

    ``fit`` trains on the configured (or given) environment; ``predict``
    returns greedy actions and ``predict_proba`` the learned policy rows.
    """

    def __init__(self, config=None, seed=0):
        self.config = config
        self.seed = seed

    def fit(self, X=None, y=None):
        cfg = self.config if self.config is not None else ExperimentConfig()
        self.metrics_ = _run(cfg, self.seed)
        self.policy_ = self.metrics_.final_policy
        self.critic_ = self.metrics_.final_critic
        return self

    def predict_proba(self, states):
        return self.policy_.probs[np.asarray(states)]

    def predict(self, states):
        return np.argmax(self.predict_proba(states), axis=-1)
