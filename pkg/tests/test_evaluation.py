import dataclasses

import numpy as np
import orjson
import pandas as pd
import pytest
from click.testing import CliRunner

from lbsim.cli import main
from lbsim.core.baselines import Baseline
from lbsim.core.flow_env import EnvConfig
from lbsim.core.safety import CbfShield
from lbsim.errors import EvaluationError, TrafficError
from lbsim.harness.campaign import build_policies, eval_trace, run_comparison, run_training_campaign
from lbsim.harness.config import load_config
from lbsim.harness.evaluation import (BaselinePolicy, EvalSummary, LearnedPolicy, NlpPolicy, compare,
                                      render_table, run_eval, summaries_from_frame, trace_fingerprint)
from lbsim.harness.metrics import read_metrics, read_summary, write_summary
from lbsim.net.topology import dump_topology, load_topology
from lbsim.net.traffic import TrafficSample, load_trace
from lbsim.opt import SolverConfig
from lbsim.rl.checkpoint import load_checkpoint
from lbsim.rl.ppo import PpoAgent
from lbsim.utils import content_hash, read_json

from .conftest import two_path_document

TINY = {
    "agent": {"hidden": [8, 8]},
    "schedule": {"episodes": 2, "update_period": 8},
    "env": {"episode_length": 4},
    "eval": {"trace_length": 5, "include_nlp": False},
}


def _policies(topo, names=("static", "ecmp", "ucmp")):
    return [BaselinePolicy(Baseline.parse(n), topo) for n in names]


def _summary(policy, delay):
    return EvalSummary(policy, 10, delay, delay, delay, 0.5, 0.6, 1.0, 1.0, -0.5, 0.0, 0.01)


@pytest.fixture
def tiny_cfg(tmp_path):
    return load_config(overrides={**TINY, "output_dir": str(tmp_path / "runs")})


@pytest.fixture
def heavy_trace(abilene):
    return [TrafficSample(t, {k: 9.0 for k in abilene.tunnel_ids}) for t in range(3)]


class TestRunEval:
    """Scoring policies on a frozen trace."""

    def test_empty_trace(self, abilene):
        with pytest.raises(EvaluationError, match="empty"):
            run_eval(abilene, EnvConfig(), _policies(abilene), [])

    def test_duplicate_names(self, abilene, heavy_trace):
        with pytest.raises(EvaluationError, match="Duplicate"):
            run_eval(abilene, EnvConfig(), _policies(abilene, ("ecmp", "ecmp")), heavy_trace)

    def test_trace_must_cover_tunnels(self, abilene):
        with pytest.raises(TrafficError, match="1-5"):
            run_eval(abilene, EnvConfig(), _policies(abilene), [TrafficSample(0, {"5-1": 1.0})])

    def test_heavy_trace_acceptance(self, abilene, heavy_trace):
        res = run_eval(abilene, EnvConfig(), _policies(abilene), heavy_trace)
        acc = {name: r.summary.mean_acceptance for name, r in res.items()}
        assert acc["ucmp"] == 1.0
        assert acc["static1"] < acc["ecmp"] < 1.0
        assert res["ucmp"].summary.max_mlu == pytest.approx(0.9)
        assert len(res["ecmp"].steps) == 3

    def test_policies_see_identical_samples(self, abilene, heavy_trace):
        res = run_eval(abilene, EnvConfig(), _policies(abilene), heavy_trace)
        ts = [list(r.steps["t"]) for r in res.values()]
        assert all(t == [0, 1, 2] for t in ts)

    def test_shielded_learned_policy(self, abilene, heavy_trace):
        agent = PpoAgent(abilene, (8, 8), seed=0)
        learned = LearnedPolicy(agent, abilene, EnvConfig(),
                                CbfShield(abilene, eta_cap=0.999))
        res = run_eval(abilene, EnvConfig(), [learned], heavy_trace)["ppo+cbf"]
        # an untrained policy splits close to evenly, which overloads the low links
        assert res.summary.cbf_modified_fraction == 1.0
        assert res.summary.min_acceptance == 1.0


class TestCompare:

    def test_needs_two(self):
        with pytest.raises(EvaluationError, match="at least two"):
            compare([_summary("a", 1.0)])

    def test_rank_by_delay_then_name(self):
        ranked = compare([_summary("b", 2.0), _summary("c", 1.0), _summary("a", 2.0)])
        assert list(ranked["policy"]) == ["c", "a", "b"]
        assert list(ranked["rank"]) == [1, 2, 3]

    def test_summary_csv_round_trip(self, tmp_path):
        ranked = compare([_summary("b", 2.0), _summary("a", 1.5)])
        path = write_summary(ranked, tmp_path / "summary.csv")
        again = summaries_from_frame(read_summary(path))
        assert [s.policy for s in again] == ["a", "b"]
        got, expected = dataclasses.astuple(again[0]), dataclasses.astuple(_summary("a", 1.5))
        assert got[0] == expected[0]
        assert got[1:] == pytest.approx(expected[1:])

    def test_render_table(self):
        text = render_table(compare([_summary("ucmp", 2.0), _summary("ecmp", 3.0)]))
        assert "ucmp" in text and "mean_delay_ms" in text

    def test_trace_fingerprint(self, heavy_trace):
        assert trace_fingerprint(heavy_trace) == trace_fingerprint(list(heavy_trace))
        changed = heavy_trace[:-1] + [TrafficSample(2, {**heavy_trace[2].demand, "1-5": 8.0})]
        assert trace_fingerprint(changed) != trace_fingerprint(heavy_trace)


class TestNlpPolicy:

    def test_feasible_and_cached(self, two_path, tmp_path):
        policy = NlpPolicy(two_path, SolverConfig(), EnvConfig(), cache_dir=tmp_path / "cache")
        sample = TrafficSample(0, {"s-t": 0.5})
        first = policy.act(sample)
        assert first[1] > 0.99
        np.testing.assert_array_equal(policy.act(sample), first)
        assert any((tmp_path / "cache").rglob("*"))

    def test_infeasible_uses_min_mlu_split(self, two_path):
        policy = NlpPolicy(two_path)
        x = policy.act(TrafficSample(0, {"s-t": 25.0}))
        np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-9)
        assert policy.infeasible == 1


class TestCampaign:

    def test_training_artifacts(self, tiny_cfg, tmp_path):
        out = tmp_path / "run"
        artifacts = run_training_campaign(tiny_cfg, out)
        manifest = read_json(artifacts.manifest_path)
        assert manifest["policy"] == "ppo+cbf"
        assert manifest["episodes"] == 2
        for name in ("metrics.csv", "episodes.csv", "checkpoint.json"):
            assert manifest["artifacts"][name]["sha256"] == content_hash(out / name)
        metrics = read_metrics(artifacts.metrics_path)
        assert len(metrics) == 8
        assert list(metrics.columns[:5]) == ["episode", "step", "policy", "worker", "t"]
        assert (metrics["acceptance_rate"] == 1.0).all()
        ckpt = load_checkpoint(artifacts.checkpoint_path)
        assert ckpt.meta["cbf"] is True and ckpt.meta["config_hash"] == manifest["config_hash"]

    def test_fine_tune_and_compare(self, tiny_cfg, tmp_path):
        first = run_training_campaign(tiny_cfg, tmp_path / "base")
        tuned = run_training_campaign(tiny_cfg, tmp_path / "tuned", fine_tune=first.checkpoint_path)
        assert tuned.result.agent.episode == 4
        assert read_json(tuned.manifest_path)["fine_tuned_from"] == str(first.checkpoint_path)
        # two episodes of four steps: the tuned run resumes the traffic clock at t=8
        assert load_checkpoint(first.checkpoint_path).meta["traffic_clocks"] == [8]
        assert read_metrics(tuned.metrics_path)["t"].min() == 8
        assert load_checkpoint(tuned.checkpoint_path).meta["traffic_clocks"] == [16]

        topo = tiny_cfg.topology.build()
        policies = build_policies(tiny_cfg, topo, [first.checkpoint_path, tuned.checkpoint_path])
        names = [p.name for p in policies]
        assert names == ["static1", "random", "ecmp", "ucmp", "ppo+cbf", "ppo+cbf@tuned"]

        out = tmp_path / "eval"
        ranked = run_comparison(tiny_cfg, policies, eval_trace(tiny_cfg, topo), topo, out)
        assert sorted(ranked["policy"]) == sorted(names)
        assert (out / "summary.csv").exists()
        assert (out / "steps_ppo_cbf_tuned.csv").exists()
        assert read_json(out / "manifest.json")["trace_sha256"] == trace_fingerprint(
            eval_trace(tiny_cfg, topo))

    def test_eval_trace_is_frozen(self, tiny_cfg):
        topo = tiny_cfg.topology.build()
        a, b = eval_trace(tiny_cfg, topo), eval_trace(tiny_cfg, topo)
        assert a == b
        assert [s.t for s in a] == list(range(100_000, 100_005))


class TestCli:

    @pytest.fixture
    def small_setup(self, tmp_path):
        topo_path = dump_topology(load_topology(two_path_document()), tmp_path / "two.json")
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_bytes(orjson.dumps({
            **TINY, "output_dir": str(tmp_path / "runs"),
            "topology": {"path": str(topo_path)},
        }))
        return cfg_path

    def test_trace_baseline_eval_compare(self, small_setup, tmp_path):
        runner = CliRunner()
        trace_path = tmp_path / "trace.csv"
        res = runner.invoke(main, ["trace", "--config", str(small_setup), "--n", "6",
                                   "--out", str(trace_path)])
        assert res.exit_code == 0, res.output
        assert len(load_trace(trace_path)) == 6

        res = runner.invoke(main, ["baseline", "--config", str(small_setup), "--policy", "ucmp",
                                   "--trace", str(trace_path)])
        assert res.exit_code == 0, res.output
        assert "ucmp: delay" in res.output

        out = tmp_path / "eval"
        res = runner.invoke(main, ["eval", "--config", str(small_setup), "--no-nlp",
                                   "--trace", str(trace_path), "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert len(read_summary(out / "summary.csv")) == 4

        res = runner.invoke(main, ["compare", str(out / "summary.csv"), "--out", str(tmp_path / "r.csv")])
        assert res.exit_code == 0, res.output
        assert (tmp_path / "r.csv").exists()

    def test_solve(self, small_setup, tmp_path):
        out = tmp_path / "solved.csv"
        res = CliRunner().invoke(main, ["solve", "--config", str(small_setup), "--out", str(out)])
        assert res.exit_code == 0, res.output
        df = pd.read_csv(out)
        assert len(df) == 5
        assert {"feasible", "objective_ms", "x_s-t_0", "x_s-t_1"} <= set(df.columns)
        np.testing.assert_allclose(df["x_s-t_0"] + df["x_s-t_1"], 1.0)

    def test_train(self, small_setup, tmp_path):
        out = tmp_path / "trained"
        res = CliRunner().invoke(main, ["train", "--config", str(small_setup), "--algo", "ddpg",
                                        "--episodes", "1", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert "Trained ddpg+cbf for 1 episodes" in res.output
        assert (out / "checkpoint.json").exists()

    def test_train_without_config_file(self, tmp_path, monkeypatch):
        import lbsim.cli as cli

        seen = {}

        def narrow_campaign(cfg, out_dir=None, fine_tune=None):
            seen["cfg"] = cfg
            agent = cfg.agent.model_copy(update={"hidden": (8, 8)})
            return run_training_campaign(cfg.model_copy(update={"agent": agent}), out_dir, fine_tune)

        monkeypatch.setattr(cli, "run_training_campaign", narrow_campaign)
        out = tmp_path / "plain"
        res = CliRunner().invoke(main, ["train", "--algo", "ppo", "--cbf", "on", "--episodes", "0",
                                        "--out", str(out)])
        assert res.exit_code == 0, res.output
        cfg = seen["cfg"]
        assert cfg.agent.algo == "ppo" and cfg.cbf.enabled is True
        assert cfg.cbf.radius == 0.3 and cfg.schedule.episodes == 0
        assert (out / "manifest.json").exists()

    def test_domain_error_is_reported(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"nonsense": 1}')
        res = CliRunner().invoke(main, ["trace", "--config", str(bad), "--out", str(tmp_path / "t.csv")])
        assert res.exit_code != 0
        assert "Invalid experiment config" in res.output
