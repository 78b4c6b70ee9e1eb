"""Plain-text (JSON) documents for MDPs, critics, policies and configs.

Floats are written with Python's shortest round-trip repr (at most 17
significant digits), so every double survives write -> read bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cmdp import TabularCMDP

FORMAT_VERSION = 1


def _f(x):
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("refusing to serialize a non-finite value")
    return x


def _prepare(obj):
    if isinstance(obj, dict):
        return {k: _prepare(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_prepare(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _f(obj)
    if isinstance(obj, np.ndarray):
        return _prepare(obj.tolist())
    if isinstance(obj, (set, frozenset)):
        return sorted(int(v) for v in obj)
    return obj


def dumps(doc):
    return json.dumps(_prepare(doc), indent=1, allow_nan=False) + "\n"


def _write(path, doc):
    Path(path).write_text(dumps(doc))


def _read(path, kind):
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != kind:
        raise ValueError(f"{path} holds a {doc.get('kind')!r} document, expected {kind!r}")
    return doc


def mdp_to_dict(mdp):
    s, a, t = np.nonzero(mdp.transition)
    return {
        "kind": "tabular_cmdp",
        "version": FORMAT_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "chi": mdp.chi,
        "mu": mdp.mu,
        "reward": mdp.reward,
        "constraint": mdp.constraint,
        "transitions": [
            [int(i), int(j), int(k), _f(mdp.transition[i, j, k])]
            for i, j, k in zip(s, a, t)
        ],
        "terminal_failure": mdp.terminal_failure,
        "terminal_goal": mdp.terminal_goal,
    }


def mdp_from_dict(doc):
    n_s, n_a = int(doc["n_states"]), int(doc["n_actions"])
    P = np.zeros((n_s, n_a, n_s))
    for s, a, t, p in doc["transitions"]:
        P[int(s), int(a), int(t)] = float(p)
    return TabularCMDP(
        transition=P,
        reward=np.asarray(doc["reward"], dtype=float).reshape(n_s, n_a),
        constraint=np.asarray(doc["constraint"], dtype=float),
        gamma=float(doc["gamma"]),
        mu=np.asarray(doc["mu"], dtype=float),
        chi=float(doc["chi"]),
        terminal_failure=frozenset(doc.get("terminal_failure", [])),
        terminal_goal=frozenset(doc.get("terminal_goal", [])),
    )


def save_mdp(mdp, path):
    _write(path, mdp_to_dict(mdp))


def load_mdp(path):
    return mdp_from_dict(_read(path, "tabular_cmdp"))


def save_critic(critic, path):
    """Checkpoint a safety critic as (s, a, q) triples plus hyper-parameters."""
    q = critic.q_
    _write(
        path,
        {
            "kind": "safety_critic",
            "version": FORMAT_VERSION,
            "n_states": q.shape[0],
            "n_actions": q.shape[1],
            "alpha": critic.alpha,
            "lr": critic.lr,
            "gamma": critic.gamma,
            "precondition": critic.precondition,
            "step": critic.n_updates_,
            "q": [[s, a, _f(q[s, a])] for s in range(q.shape[0]) for a in range(q.shape[1])],
        },
    )


def load_critic(path):
    from .critic import SafetyCritic

    doc = _read(path, "safety_critic")
    q = np.zeros((int(doc["n_states"]), int(doc["n_actions"])))
    for s, a, v in doc["q"]:
        q[int(s), int(a)] = float(v)
    critic = SafetyCritic(
        alpha=float(doc["alpha"]),
        lr=float(doc["lr"]),
        gamma=float(doc["gamma"]),
        precondition=doc.get("precondition", "none"),
    )
    critic.q_ = q
    critic.n_updates_ = int(doc["step"])
    return critic


def save_policy(policy, path, step=0):
    _write(
        path,
        {
            "kind": "softmax_policy",
            "version": FORMAT_VERSION,
            "step": int(step),
            "logits": policy.logits,
        },
    )


def load_policy(path):
    from .policy import SoftmaxPolicy

    doc = _read(path, "softmax_policy")
    return SoftmaxPolicy(np.asarray(doc["logits"], dtype=float)), int(doc["step"])


def save_config(config, path):
    _write(path, {"kind": "experiment_config", "version": FORMAT_VERSION, **config.to_dict()})


def load_config(path):
    from .harness import ExperimentConfig

    doc = json.loads(Path(path).read_text())
    doc.pop("kind", None)
    doc.pop("version", None)
    return ExperimentConfig.from_dict(doc)
