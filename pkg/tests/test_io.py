import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safecritic import ExperimentConfig, SafetyCritic, SoftmaxPolicy, build_trap_grid, default_trap_grid_spec, random_cmdp
from safecritic import io

seeds = st.integers(0, 2**32 - 1)


def assert_same_mdp(a, b):
    for name in ("transition", "reward", "constraint", "mu"):
        x, y = np.asarray(getattr(a, name)), np.asarray(getattr(b, name))
        assert x.shape == y.shape and np.array_equal(x, y), name
    assert a.gamma == b.gamma and a.chi == b.chi
    assert a.terminal_failure == b.terminal_failure and a.terminal_goal == b.terminal_goal


class TestMdp:
    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_random_round_trip_bit_exact(self, seed):
        mdp = random_cmdp(7, 3, np.random.default_rng(seed), gamma=0.97, n_failure=1, n_goal=1, chi=0.137)
        assert_same_mdp(mdp, io.mdp_from_dict(json.loads(io.dumps(io.mdp_to_dict(mdp)))))

    def test_file_round_trip(self, tmp_path):
        mdp = build_trap_grid(default_trap_grid_spec())
        io.save_mdp(mdp, tmp_path / "m.json")
        assert_same_mdp(mdp, io.load_mdp(tmp_path / "m.json"))

    def test_transitions_stored_as_triples(self):
        doc = io.mdp_to_dict(random_cmdp(3, 2, np.random.default_rng(0)))
        assert all(len(t) == 4 for t in doc["transitions"])

    def test_wrong_kind(self, tmp_path):
        io.save_policy(SoftmaxPolicy.uniform(2, 2), tmp_path / "p.json")
        with pytest.raises(ValueError, match="expected"):
            io.load_mdp(tmp_path / "p.json")

    def test_refuses_non_finite(self):
        with pytest.raises(ValueError):
            io.dumps({"x": float("nan")})


class TestCheckpoints:
    def test_critic(self, tmp_path):
        rng = np.random.default_rng(0)
        critic = SafetyCritic(alpha=0.3, lr=0.25, gamma=0.95, precondition="none").initialize(5, 3)
        critic.q_ = rng.random((5, 3))
        critic.n_updates_ = 17
        io.save_critic(critic, tmp_path / "c.json")
        back = io.load_critic(tmp_path / "c.json")
        assert np.array_equal(back.q_, critic.q_)
        assert back.get_params() == critic.get_params()
        assert back.n_updates_ == 17

    def test_policy(self, tmp_path):
        pol = SoftmaxPolicy(np.random.default_rng(1).normal(size=(4, 3)) * 1e3)
        io.save_policy(pol, tmp_path / "p.json", step=9)
        back, step = io.load_policy(tmp_path / "p.json")
        assert np.array_equal(back.logits, pol.logits) and step == 9

    def test_config(self, tmp_path):
        cfg = ExperimentConfig(chi=0.1, seeds=(3, 4), chi_schedule="inv_sqrt", chi_c0=0.2)
        io.save_config(cfg, tmp_path / "cfg.json")
        assert io.load_config(tmp_path / "cfg.json") == cfg

    def test_config_rejects_unknown_fields(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"chi": 0.1, "colour": "red"}))
        with pytest.raises(ValueError, match="unknown"):
            io.load_config(tmp_path / "cfg.json")
