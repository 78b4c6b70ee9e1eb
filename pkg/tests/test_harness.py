import json

import numpy as np
import pytest

import safecritic.harness as harness
from safecritic import (
    CSCAgent,
    ExperimentConfig,
    MetricsSeries,
    PolicyTable,
    PoisonedStateError,
    SoftmaxPolicy,
    chi_schedule,
    exact_policy_values,
    export_metrics,
    run_baseline,
    run_csc,
    run_experiment,
    theorem_diagnostics,
)
from safecritic.cli import main
from safecritic.io import load_config
from safecritic.harness import CSV_COLUMNS, SCHEMA, metrics_csv, read_metrics_csv


def tiny(**kw):
    base = dict(epochs=6, episodes_per_epoch=3, steps_per_epoch=4, horizon=60, chi=0.05, seeds=(0,))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def csc_run():
    return run_csc(tiny(epochs=10))


class TestConfig:
    def test_defaults_mirror_reference_settings(self):
        cfg = ExperimentConfig()
        assert (cfg.gamma, cfg.lr_lambda, cfg.delta, cfg.alpha, cfg.beta0, cfg.max_backtracks, cfg.chi) == (
            0.99, 4e-2, 0.01, 0.5, 0.7, 20, 0.03)
        assert (cfg.episodes_per_epoch, cfg.steps_per_epoch, cfg.epochs) == (10, 50, 200)
        assert (cfg.shaping_penalty, cfg.ensemble_size, cfg.horizon, cfg.batch_size) == (10.0, 20, 500, 256)

    @pytest.mark.parametrize("bad", [{"chi": 1.0}, {"lr_q": 0}, {"lr_lambda": -1}, {"algorithm": "cpo"},
                                     {"gamma": 1.0}, {"epochs": 0}, {"seeds": ()}, {"alpha": -0.1},
                                     {"chi_schedule": "linear"}, {"signal": "graded"}])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)

    def test_dict_round_trip(self):
        cfg = tiny(algorithm="q_ensemble", seeds=(1, 2))
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestChiSchedule:
    def test_examples(self):
        assert chi_schedule(1, 0.2) == 0.2
        assert chi_schedule(4, 0.2) == pytest.approx(0.1)
        assert chi_schedule(1, 5.0) == 1.0 - 1e-9

    def test_rejects_epoch_zero(self):
        with pytest.raises(ValueError):
            chi_schedule(0, 0.1)
        with pytest.raises(ValueError):
            chi_schedule(1, 0.0)


class TestRun:
    def test_reproducible(self):
        a, b = run_csc(tiny()), run_csc(tiny())
        assert metrics_csv(a) == metrics_csv(b)
        assert np.array_equal(a.final_policy.logits, b.final_policy.logits)

    def test_reg_c_matches_episode_indicators(self, csc_run):
        fails = np.array(csc_run.episode_failures)
        assert set(np.unique(fails)) <= {0, 1}
        assert csc_run.reg_c == fails.sum()
        cum = csc_run.column("cum_failures")
        assert np.all(np.diff(cum) >= 0)
        per_epoch = fails.reshape(-1, 3).sum(axis=1)
        assert np.array_equal(cum, np.cumsum(per_epoch))
        assert csc_run.column("avg_failures") == pytest.approx(per_epoch / 3)

    def test_lambda_trace(self, csc_run):
        updates = [e for e in csc_run.events if e["type"] == "update"]
        lam = np.array([0.0] + [e["lambda"] for e in updates])
        assert np.all(lam >= 0)
        for before, after, e in zip(lam[:-1], lam[1:], updates):
            if e["violation"] <= 0:
                assert after <= before

    def test_epsilon_trace(self):
        series = run_csc(tiny(chi_schedule="inv_sqrt", chi_c0=0.2))
        eps = series.column("epsilon")
        v_hat = series.column("avg_failures")
        chi = 0.2 / np.sqrt(np.arange(1, eps.size + 1))
        prev = np.concatenate([[0.0], v_hat[:-1]])
        assert eps == pytest.approx((1 - 0.99) * (chi - prev), abs=1e-15)

    def test_accepted_steps_respect_trust_region(self, csc_run):
        updates = [e for e in csc_run.events if e["type"] == "update"]
        assert all(e["kl"] <= 0.01 for e in updates if e["accepted"])

    def test_base_has_no_gate_or_dual(self):
        series = run_baseline(tiny(algorithm="base"))
        assert np.all(series.column("lambda") == 0)
        assert np.all(series.column("fallback_rate") == 0)
        assert series.final_critic is None

    def test_shaped_baseline_runs(self):
        series = run_baseline(tiny(algorithm="base_shaped"))
        assert len(series.records) == 6

    def test_q_ensemble_logs_disagreement(self):
        series = run_baseline(tiny(algorithm="q_ensemble", ensemble_size=3))
        dis = np.array([r.disagreement for r in series.records])
        assert np.all(np.isfinite(dis)) and np.all(dis >= 0)

    def test_run_baseline_rejects_csc(self):
        with pytest.raises(ValueError):
            run_baseline(tiny())

    def test_seeded_buffer(self):
        series = run_csc(tiny(seed_transitions=200, epochs=2))
        assert len(series.records) == 2

    def test_threads_do_not_change_results(self, monkeypatch):
        cfg = tiny(seeds=(0, 1), epochs=3)
        seq = run_experiment(cfg, n_threads=1)
        monkeypatch.setenv(harness.THREADS_ENV, "2")
        par = run_experiment(cfg)
        for s in cfg.seeds:
            assert metrics_csv(seq[s]) == metrics_csv(par[s])

    def test_poisoned_state_flushes_partial_metrics(self, monkeypatch):
        real = harness.gae_modified_advantages
        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            out = real(*args, **kwargs)
            calls["n"] += 1
            if calls["n"] > 8:
                out.advantages[:] = np.nan
            return out

        monkeypatch.setattr(harness, "gae_modified_advantages", poisoned)
        with pytest.raises(PoisonedStateError) as info:
            run_csc(tiny())
        assert len(info.value.partial_metrics.records) == 2

    def test_estimator_wrapper(self):
        agent = CSCAgent(tiny(epochs=2)).fit()
        probs = agent.predict_proba([0, 1])
        assert probs.shape == (2, 4)
        assert agent.predict([0]).shape == (1,)
        assert agent.get_params()["seed"] == 0


class TestDiagnostics:
    def test_identical_policies_exact_critic(self):
        cfg = tiny()
        mdp = cfg.build_mdp()
        pol = SoftmaxPolicy(np.random.default_rng(0).normal(size=(mdp.n_states, mdp.n_actions)))
        q = exact_policy_values(mdp, PolicyTable(pol.probs)).q_c
        d = theorem_diagnostics(mdp, pol, pol, q, cfg, v_hat=0.1)
        assert d.lemma_lhs == pytest.approx(d.v_c_old, abs=1e-12)
        assert d.delta_gap == pytest.approx(0.0, abs=1e-12)
        assert d.zeta == pytest.approx(abs(0.1 - d.v_c_old))

    def test_small_delta_limit(self):
        mdp = tiny().build_mdp()
        rng = np.random.default_rng(1)
        p_old = SoftmaxPolicy(rng.normal(size=(mdp.n_states, mdp.n_actions)))
        p_new = SoftmaxPolicy(p_old.logits + 0.1 * rng.normal(size=p_old.shape))
        q = rng.random(p_old.shape)
        d = theorem_diagnostics(mdp, p_old, p_new, q, tiny(delta=1e-14), v_hat=0.0)
        assert d.theorem_rhs == pytest.approx(d.lemma_rhs, abs=1e-4)
        assert d.lemma_rhs == pytest.approx(0.05 + d.zeta - d.delta_gap / (1 - 0.99))

    def test_recorded_each_epoch(self, csc_run):
        assert all(r.bound is not None for r in csc_run.records)


class TestExport:
    def test_schema_and_round_trip(self, csc_run, tmp_path):
        csv_path, jsonl_path = export_metrics(csc_run, tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == f"# {SCHEMA}"
        assert lines[1] == ",".join(CSV_COLUMNS)
        data = read_metrics_csv(csv_path)
        for col in CSV_COLUMNS:
            assert np.array_equal(data[col], csc_run.column(col)), col
        events = [json.loads(x) for x in jsonl_path.read_text().splitlines()]
        assert events[0]["type"] == "run"
        assert {"step", "kl", "beta", "accepted", "lambda", "grad_norm"} <= set(events[1])

    def test_empty_series_is_header_only(self, tmp_path):
        csv_path, _ = export_metrics(MetricsSeries(), tmp_path)
        assert csv_path.read_text().splitlines() == [f"# {SCHEMA}", ",".join(CSV_COLUMNS)]
        assert all(v.size == 0 for v in read_metrics_csv(csv_path).values())

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            export_metrics(MetricsSeries(), blocker / "sub")

    def test_rejects_foreign_csv(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_metrics_csv(tmp_path / "x.csv")


class TestCli:
    def test_run_diagnose_export(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"episodes_per_epoch": 2, "steps_per_epoch": 3, "horizon": 40}))
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg_path), "--algo", "csc", "--chi", "0.05", "--alpha", "0.1",
                     "--seeds", "0,1", "--epochs", "3", "--out", str(out)]) == 0
        for seed in (0, 1):
            d = out / f"seed_{seed}"
            for name in ("metrics.csv", "metrics.jsonl", "policy.json", "policy_old.json", "critic.json", "state.json"):
                assert (d / name).exists(), name
        capsys.readouterr()
        assert main(["diagnose", "--run", str(out)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) == {"seed_0", "seed_1"}
        assert "theorem_holds" in report["seed_0"]
        assert main(["export", "--run", str(out), "--format", "csv", "--seed", "1"]) == 0
        assert capsys.readouterr().out == (out / "seed_1" / "metrics.csv").read_text()

    def test_chi_schedule_flag(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"episodes_per_epoch": 2, "horizon": 30}))
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg_path), "--algo", "base", "--chi-schedule", "inv_sqrt:0.2",
                     "--epochs", "2", "--out", str(out)]) == 0
        cfg = load_config(out / "config.json")
        assert cfg.chi_schedule == "inv_sqrt" and cfg.chi_c0 == 0.2 and cfg.algorithm == "base"
        assert not (out / "seed_0" / "critic.json").exists()

    def test_bad_schedule(self):
        with pytest.raises(SystemExit):
            main(["run", "--chi-schedule", "linear:1", "--out", "x"])
