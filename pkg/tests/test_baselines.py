import numpy as np
import pytest

from gridflex.baselines import (
    BaselineKind,
    centralized_cpo_update,
    macpo_update,
    penalized_rewards,
    ppo_penalty_update,
)
from gridflex.config import Hyperparams
from gridflex.cpo import CommunicationGraph, collect_rollouts
from gridflex.nn import Adam, HybridPolicy
from gridflex.trainer import Trainer

from nets import toy_env


def make(algorithm, seed=0, n_agents_env=None, **hp_over):
    env = toy_env(n_days=2)
    base = dict(episodes_per_iter=2, critic_epochs=5, hidden=(16, 8))
    base.update(hp_over)
    return Trainer(env, Hyperparams(**base), algorithm,
                   CommunicationGraph.ring(env.n_agents), seed)


class TestBaselineKind:
    def test_penalty_weight_validation(self):
        with pytest.raises(ValueError):
            BaselineKind(name="ppo_penalty", penalty_weight=0.0)
        BaselineKind(name="cmacpo", penalty_weight=0.0)  # only ppo checks it


class TestPenalizedRewards:
    def test_equal_to_base_when_within_quota(self):
        tr = make("ppo_penalty")
        buf = collect_rollouts(tr.env, tr.policies, tr.actor_params, 2, tr.rng)
        big_quota = tr.env.quotas + 100.0
        out = penalized_rewards(buf, big_quota, weight=500.0)
        assert np.array_equal(out, buf.rewards)

    def test_terminal_penalty_applied_on_overshoot(self):
        tr = make("ppo_penalty")
        buf = collect_rollouts(tr.env, tr.policies, tr.actor_params, 1, tr.rng)
        tiny_quota = np.full(tr.env.n_agents, 1e-6)
        out = penalized_rewards(buf, tiny_quota, weight=100.0)
        overshoot = np.maximum(0.0, buf.costs[-1] - tiny_quota).sum()
        assert out[-1] == pytest.approx(buf.rewards[-1] - 100.0 * overshoot)
        assert np.array_equal(out[:-1], buf.rewards[:-1])


class TestPpoUpdate:
    def test_zero_advantages_policy_unchanged(self):
        # Constant rewards + constant critic => zero advantages after
        # normalization; Adam sees exactly zero gradients.
        pol = HybridPolicy(obs_dim=3, n_cont=1, n_disc=1, hidden=(6,))
        params = pol.init_params(np.random.default_rng(0))
        opt = Adam(pol.n_params, lr=1e-3)
        rng = np.random.default_rng(1)
        obs = rng.standard_normal((8, 3))
        u = rng.standard_normal((8, 1))
        o = rng.integers(0, 2, (8, 1)).astype(float)
        mask = np.zeros((8, 1), bool)
        lp = pol.log_probs(params, obs, u, o, mask)
        adv = np.zeros(8)
        before = params.copy()
        for _ in range(10):
            ratio = np.exp(pol.log_probs(params, obs, u, o, mask) - lp)
            w = ratio * adv / 8
            grad = pol.weighted_logprob_grad(params, obs, u, o, mask, w)
            params = opt.step(params, grad)
        assert np.max(np.abs(params - before)) <= 1e-12

    def test_clipped_samples_contribute_zero_gradient(self):
        pol = HybridPolicy(obs_dim=2, n_cont=1, n_disc=0, hidden=())
        rng = np.random.default_rng(2)
        params = pol.init_params(rng)
        obs = rng.standard_normal((4, 2))
        u = rng.standard_normal((4, 1))
        mask = np.zeros((4, 0), bool)
        o = np.zeros((4, 0))
        lp_old = pol.log_probs(params, obs, u, o, mask) - 1.0  # ratio = e > 1.2
        adv = np.ones(4)
        ratio = np.exp(pol.log_probs(params, obs, u, o, mask) - lp_old)
        clipped_out = (adv > 0) & (ratio > 1.2)
        assert np.all(clipped_out)
        w = np.where(clipped_out, 0.0, ratio * adv)
        grad = pol.weighted_logprob_grad(params, obs, u, o, mask, w)
        assert np.all(grad == 0.0)

    def test_toy_bandit_converges(self):
        # 2-arm bandit: arm "on" pays 1, arm "off" pays 0. The clipped-ratio
        # ascent should drive p(on) >= 0.95 within 500 iterations.
        pol = HybridPolicy(obs_dim=1, n_cont=0, n_disc=1, hidden=())
        rng = np.random.default_rng(3)
        params = pol.init_params(rng)
        opt = Adam(pol.n_params, lr=0.05)
        obs = np.ones((32, 1))
        mask = np.zeros((32, 1), bool)
        u = np.zeros((32, 0))
        for it in range(500):
            dist = pol.dist(params, obs)
            o = (rng.uniform(size=(32, 1)) < dist.on_prob).astype(float)
            rewards = o[:, 0]
            adv = rewards - rewards.mean()
            if adv.std() > 1e-8:
                adv = adv / adv.std()
            lp_old = pol.log_probs(params, obs, u, o, mask)
            for _ in range(5):
                lp = pol.log_probs(params, obs, u, o, mask)
                ratio = np.exp(lp - lp_old)
                clipped_out = ((adv > 0) & (ratio > 1.2)) | ((adv < 0) & (ratio < 0.8))
                w = np.where(clipped_out, 0.0, ratio * adv) / 32
                params = opt.step(params, pol.weighted_logprob_grad(
                    params, obs, u, o, mask, w))
        p_on = pol.dist(params, np.ones((1, 1))).on_prob[0, 0]
        assert p_on >= 0.95

    def test_trainer_ppo_iteration(self):
        tr = make("ppo_penalty")
        row = tr.iterate(0)
        assert row["mode_0"] == "ppo"
        assert np.isfinite(row["reward"])


class TestDegeneracyEquivalence:
    def test_single_agent_cmacpo_macpo_centralized_identical_first_update(self):
        # One agent, trivial graph: the three constrained variants see the
        # same buffer and produce the same first actor update.
        env1 = toy_env(n_days=2, quota=(1.0, 1e9), p_tr=(0.1, 0.0),
                       duration=(3, 1))
        hp = Hyperparams(episodes_per_iter=2, critic_epochs=2, hidden=(8, 4))
        results = {}
        for algo in ("cmacpo", "macpo"):
            env = toy_env(n_days=2, quota=(1.0, 1e9), p_tr=(0.1, 0.0),
                          duration=(3, 1))
            tr = Trainer(env, hp, algo, CommunicationGraph.ring(env.n_agents), seed=4)
            tr.iterate(0)
            results[algo] = [p.copy() for p in tr.actor_params]
        for a, b in zip(results["cmacpo"], results["macpo"]):
            assert np.max(np.abs(a - b)) <= 1e-10

    def test_named_update_operations_guard_algorithm(self):
        tr = make("cmacpo")
        buf = collect_rollouts(tr.env, tr.policies, tr.actor_params, 1, tr.rng)
        with pytest.raises(ValueError):
            centralized_cpo_update(tr, buf)
        with pytest.raises(ValueError):
            macpo_update(tr, buf)

    def test_macpo_update_runs(self):
        tr = make("macpo")
        buf = collect_rollouts(tr.env, tr.policies, tr.actor_params, 2, tr.rng)
        infos = macpo_update(tr, buf)
        assert len(infos) == tr.env.n_agents

    def test_centralized_update_runs(self):
        tr = make("centralized_cpo")
        buf = collect_rollouts(tr.env, tr.policies, tr.actor_params, 2, tr.rng)
        infos = centralized_cpo_update(tr, buf)
        assert len(infos) == 1
