import numpy as np
import pytest
import torch

from lbsim.errors import TrainingError
from lbsim.rl.ddpg import DdpgAgent, DdpgConfig, ddpg_update, noise_std, soft_update, td_targets
from lbsim.rl.networks import as_tensor


@pytest.fixture
def agent(abilene, small_hidden):
    return DdpgAgent(abilene, small_hidden, lr=1e-3, seed=5)


def _batch(agent, n=32, seed=0):
    rng = np.random.default_rng(seed)
    actions = np.concatenate([rng.dirichlet([1, 1], size=n) for _ in range(agent.obs_dim)], axis=1)
    return {
        "obs": rng.uniform(0, 0.5, size=(n, agent.obs_dim)),
        "actions": actions,
        "rewards": -rng.uniform(0.2, 1.0, size=n),
        "next_obs": rng.uniform(0, 0.5, size=(n, agent.obs_dim)),
        "dones": (rng.random(n) < 0.2).astype(np.float64),
    }


def _params(net):
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


class TestSoftUpdate:
    """Polyak averaging of target networks."""

    def test_tau_one_copies(self, agent):
        ddpg_update(agent, _batch(agent))
        soft_update(agent.actor_target, agent.actor, 1.0)
        assert torch.equal(_params(agent.actor_target), _params(agent.actor))

    def test_distance_shrinks(self, agent):
        ddpg_update(agent, _batch(agent))
        gaps = []
        for _ in range(5):
            gaps.append(float((_params(agent.critic_target) - _params(agent.critic)).norm()))
            soft_update(agent.critic_target, agent.critic, 0.3)
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_targets_start_equal(self, agent):
        assert torch.equal(_params(agent.actor_target), _params(agent.actor))
        assert torch.equal(_params(agent.critic_target), _params(agent.critic))


class TestTargets:

    def test_gamma_zero_is_reward(self, agent):
        b = _batch(agent)
        out = td_targets(agent, as_tensor(b["rewards"]), as_tensor(b["next_obs"]),
                         as_tensor(b["dones"]), 0.0)
        torch.testing.assert_close(out, as_tensor(b["rewards"]))

    def test_done_cuts_bootstrap(self, agent):
        b = _batch(agent, n=4)
        b["dones"] = np.ones(4)
        out = td_targets(agent, as_tensor(b["rewards"]), as_tensor(b["next_obs"]),
                         as_tensor(b["dones"]), 0.9)
        torch.testing.assert_close(out, as_tensor(b["rewards"]))


class TestNoise:

    def test_anneal(self):
        cfg = DdpgConfig(noise_start=0.2, noise_end=0.05)
        assert noise_std(cfg, 0.0) == pytest.approx(0.2)
        assert noise_std(cfg, 0.5) == pytest.approx(0.125)
        assert noise_std(cfg, 1.0) == pytest.approx(0.05)
        assert noise_std(cfg, 3.0) == pytest.approx(0.05)

    def test_noisy_actions_stay_on_simplex(self, agent):
        obs = np.full((3, 6), 0.3)
        splits = agent.act(obs, explore=True, noise=2.0)
        assert (splits >= 0).all()
        np.testing.assert_allclose(splits.reshape(3, 6, 2).sum(axis=2), 1.0)
        assert not np.allclose(splits, agent.act(obs, explore=False))

    def test_explore_mean_tracks_exploit(self, agent):
        obs = np.full(6, 0.3)
        splits = agent.act(np.tile(obs, (10_000, 1)), explore=True, noise=0.2)
        np.testing.assert_allclose(splits.mean(axis=0), agent.policy_action(obs), atol=0.05)


class TestDdpgUpdate:

    def test_td_error_decreases(self, agent):
        batch = _batch(agent, n=64)
        first = ddpg_update(agent, batch, gamma=0.0)["critic_loss"]
        for _ in range(200):
            last = ddpg_update(agent, batch, gamma=0.0)["critic_loss"]
        assert last < first
        assert agent.policy_version == 201

    def test_set_learning_rate(self, agent):
        agent.set_learning_rate(1e-6)
        assert agent.actor_opt.param_groups[0]["lr"] == 1e-6
        assert agent.critic_opt.param_groups[0]["lr"] == 1e-6

    def test_non_finite_loss_leaves_networks_untouched(self, agent):
        batch = _batch(agent)
        batch["rewards"][3] = np.nan
        before = {name: _params(getattr(agent, name))
                  for name in ("actor", "critic", "actor_target", "critic_target")}
        with pytest.raises(TrainingError, match="critic loss"):
            ddpg_update(agent, batch)
        for name, params in before.items():
            assert torch.equal(_params(getattr(agent, name)), params), name
        assert agent.policy_version == 0
