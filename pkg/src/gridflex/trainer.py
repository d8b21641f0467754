"""Training loop: consensus multi-agent constrained policy optimization.

One iteration = collect an on-policy batch of full days, estimate reward and
cost advantages per agent with GAE, take one constrained trust-region step per
actor (validated by backtracking line search), run TD sweeps on every critic,
then average the reward-critic parameters over the communication graph.

Algorithm variants share the loop:
  cmacpo          - per-agent actors/critics + consensus averaging
  macpo           - same without the consensus step
  centralized_cpo - one joint actor/critic pair, aggregate cost limit
  ppo_penalty     - clipped-ratio updates, violations folded into the reward
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import ppo_penalty_update
from .config import ExperimentConfig, Hyperparams
from .cpo import (
    AgentBatch,
    CommunicationGraph,
    RolloutBuffer,
    action_view,
    collect_rollouts,
    consensus_update,
    disagreement,
    line_search,
    per_episode_gae,
    solve_trust_region,
)
from .env import DemandEnv
from .nn import (
    Adam,
    HybridPolicy,
    Manifest,
    PopArt,
    orthogonal_init,
    save_checkpoint,
    td_update,
    value_of,
)


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoint_path: Path | None
    initial_disagreement: float
    final_disagreement: float
    trainer: "Trainer"


class Trainer:
    """Owns policies, critics and the per-iteration update schedule."""

    def __init__(self, env: DemandEnv, hyper: Hyperparams, algorithm: str,
                 graph: CommunicationGraph, seed: int):
        self.env = env
        self.hp = hyper
        self.algorithm = algorithm
        self.graph = graph
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        n_agents = env.n_agents
        obs_dim = env.obs_dim
        hidden = tuple(hyper.hidden)
        init_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 71]))

        if algorithm == "centralized_cpo":
            self.policies = [HybridPolicy(obs_dim, n_agents, n_agents, hidden)]
        else:
            self.policies = [HybridPolicy(obs_dim, 1, 1, hidden)
                             for _ in range(n_agents)]
        self.actor_params = [p.init_params(init_rng, log_std_init=hyper.log_std_init,
                                           on_bias=hyper.on_bias_init)
                             for p in self.policies]
        self.critic_manifest = Manifest([obs_dim, *hidden, 1])
        n_critics = len(self.policies)
        self.reward_critics = [orthogonal_init(self.critic_manifest, init_rng)
                               for _ in range(n_critics)]
        self.cost_critics = [orthogonal_init(self.critic_manifest, init_rng)
                             for _ in range(n_critics)]
        self.popart = PopArt() if hyper.pop_art else None
        self.adam = [Adam(p.n_params, lr=hyper.ppo_lr) for p in self.policies] \
            if algorithm == "ppo_penalty" else None
        quotas = env.quotas
        if algorithm == "centralized_cpo":
            self.cost_limits = np.array([quotas.sum()])
        else:
            self.cost_limits = quotas.copy()

    # -- per-iteration pieces ----------------------------------------------

    def _advantages(self, buffer: RolloutBuffer):
        """Per-policy (normalized reward adv, raw cost adv, J_C estimate)."""
        hp = self.hp
        ep_costs = buffer.episode_cost_totals()      # (episodes, I)
        out = []
        for j in range(len(self.policies)):
            v = value_of(self.reward_critics[j], self.critic_manifest,
                         buffer.obs, self.popart)
            adv = per_episode_gae(buffer, v, buffer.rewards, hp.gamma, hp.gae_lambda)
            std = adv.std()
            adv_n = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
            if self.algorithm == "centralized_cpo":
                cost_signal = buffer.step_costs.sum(axis=1)
                j_c = float(ep_costs.sum(axis=1).mean())
            else:
                cost_signal = buffer.step_costs[:, j]
                j_c = float(ep_costs[:, j].mean())
            vc = value_of(self.cost_critics[j], self.critic_manifest, buffer.obs)
            # Undiscounted cost return against the physical quota. The episode
            # emission is telescoped into its per-step increments (identical
            # totals) so the advantage carries per-hour credit.
            cadv = per_episode_gae(buffer, vc, cost_signal, 1.0, hp.gae_lambda)
            out.append((adv_n, cadv, j_c))
        return out

    def _actor_step(self, buffer: RolloutBuffer, j: int, adv, cadv, j_c):
        hp = self.hp
        pol = self.policies[j]
        params = self.actor_params[j]
        u, o, mask, logp_old = action_view(buffer, self.policies, j)
        n_ep = buffer.n_episodes
        g = pol.weighted_logprob_grad(params, buffer.obs, u, o, mask, adv) / n_ep
        b = pol.weighted_logprob_grad(params, buffer.obs, u, o, mask, cadv) / n_ep
        d = float(self.cost_limits[j] * hp.cost_limit_scale)
        c = j_c - d
        hvp = lambda v: pol.fisher_vector_product(
            params, buffer.obs, mask, v, damping=hp.cg_damping
        )
        step = solve_trust_region(params, g, b, c, hvp, hp.delta, hp.mu,
                                  cg_iters=hp.cg_iters)
        batch = AgentBatch(
            policy=pol, obs=buffer.obs, u=u, o=o, mask=mask, logp_old=logp_old,
            advantages=adv, cost_advantages=cadv, n_episodes=n_ep,
            old_dist=pol.dist(params, buffer.obs), j_c=j_c,
        )
        accepted, info = line_search(batch, params, step.solution, hp.delta, d,
                                     mode=step.mode, backoff=hp.backoff,
                                     max_steps=hp.line_search_steps)
        mode = step.mode
        if (not info["accepted"] and mode == "optimal" and c > 0
                and step.diagnostics.get("s", 0.0) > 1e-12):
            # Violating batch and no damped step brings the cost surrogate
            # back under the limit: fall back to the full-radius recovery step.
            w = step.diagnostics["w"]
            rec = params - np.sqrt(2.0 * hp.delta / step.diagnostics["s"]) * w
            accepted, info = line_search(batch, params, rec, hp.delta, d,
                                         mode="recovery", backoff=hp.backoff,
                                         max_steps=hp.line_search_steps)
            mode = "recovery_fallback"
        if info["accepted"] and info["kl"] > hp.delta + 1e-9:
            raise AssertionError("accepted update exceeded the KL radius")
        self.actor_params[j] = accepted
        return {"mode": mode, "kl": info["kl"], "accepted": info["accepted"],
                "backtracks": info["backtracks"], "j_c": j_c, "limit": d,
                "nu": step.nu}

    def cpo_update(self, buffer: RolloutBuffer) -> list[dict]:
        """Actor trust-region steps for every policy (no critic/consensus work)."""
        return [self._actor_step(buffer, j, adv, cadv, j_c)
                for j, (adv, cadv, j_c) in enumerate(self._advantages(buffer))]

    def _critic_sweeps(self, buffer: RolloutBuffer, rewards: np.ndarray | None = None):
        hp = self.hp
        rewards = buffer.rewards if rewards is None else rewards
        if self.popart is not None:
            # Shared normalizer statistics from critic-independent returns.
            rtg = np.zeros(buffer.n)
            for sl in buffer.episode_slices():
                acc = 0.0
                for t in range(sl.stop - 1, sl.start - 1, -1):
                    acc = rewards[t] + hp.gamma * acc
                    rtg[t] = acc
            old = self.popart.observe(rtg)
            self.reward_critics = [
                self.popart.rescale(phi, self.critic_manifest, *old)
                for phi in self.reward_critics
            ]
        for j in range(len(self.reward_critics)):
            if self.algorithm == "centralized_cpo":
                cost_signal = buffer.step_costs.sum(axis=1)
            else:
                cost_signal = buffer.step_costs[:, j]
            for _ in range(hp.critic_epochs):
                self.reward_critics[j] = td_update(
                    self.reward_critics[j], self.critic_manifest, buffer.obs,
                    rewards, buffer.next_obs, buffer.terminal,
                    hp.gamma, hp.lr_phi, self.popart,
                )
                self.cost_critics[j] = td_update(
                    self.cost_critics[j], self.critic_manifest, buffer.obs,
                    cost_signal, buffer.next_obs, buffer.terminal,
                    1.0, hp.lr_phi,
                )

    def iterate(self, iteration: int) -> dict:
        hp = self.hp
        buffer = collect_rollouts(self.env, self.policies, self.actor_params,
                                  hp.episodes_per_iter, self.rng)
        critic_rewards = None
        if self.algorithm == "ppo_penalty":
            actor_info, critic_rewards = ppo_penalty_update(
                self, buffer, penalty_weight=hp.penalty_weight,
                clip=hp.ppo_clip, epochs=hp.ppo_epochs,
            )
        else:
            actor_info = self.cpo_update(buffer)
        self._critic_sweeps(buffer, critic_rewards)
        if self.algorithm == "cmacpo" and len(self.reward_critics) > 1:
            self.reward_critics = list(
                consensus_update(np.stack(self.reward_critics), self.graph)
            )
        ep_costs = buffer.episode_cost_totals()
        row = {
            "iteration": iteration,
            "episodes": buffer.n_episodes,
            "reward": float(buffer.episode_reward_totals().mean()),
            "disagreement": disagreement(np.stack(self.reward_critics)),
            "infeasible_steps": int(buffer.infeasible.sum()),
        }
        per_agent_cost = ep_costs.mean(axis=0)
        for i in range(self.env.n_agents):
            row[f"cost_{i}"] = float(per_agent_cost[i])
        for j, info in enumerate(actor_info):
            row[f"kl_{j}"] = float(info.get("kl", 0.0))
            row[f"mode_{j}"] = info.get("mode", "ppo")
        return row

    def run(self, episodes: int, metrics_path: Path | None = None,
            checkpoint_path: Path | None = None, log_every: int = 0) -> TrainResult:
        iters = max(1, int(np.ceil(episodes / self.hp.episodes_per_iter)))
        initial_disagreement = disagreement(np.stack(self.reward_critics))
        rows = []
        for k in range(iters):
            row = self.iterate(k)
            rows.append(row)
            if log_every and (k % log_every == 0):
                print(f"iter {k}: reward={row['reward']:.1f} "
                      f"cost={sum(row[f'cost_{i}'] for i in range(self.env.n_agents)):.3f} "
                      f"disagreement={row['disagreement']:.2e}")
        if metrics_path is not None:
            write_metrics_csv(metrics_path, rows)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return TrainResult(
            metrics=rows,
            checkpoint_path=checkpoint_path,
            initial_disagreement=initial_disagreement,
            final_disagreement=disagreement(np.stack(self.reward_critics)),
            trainer=self,
        )

    # -- persistence --------------------------------------------------------

    def save(self, path: Path) -> None:
        sections: dict[str, np.ndarray] = {}
        for j, params in enumerate(self.actor_params):
            sections[f"actor_{j}"] = params
        for j, phi in enumerate(self.reward_critics):
            sections[f"critic_{j}"] = phi
        for j, phi in enumerate(self.cost_critics):
            sections[f"cost_critic_{j}"] = phi
        meta = {
            "algorithm": self.algorithm,
            "obs_dim": self.env.obs_dim,
            "hidden": list(self.hp.hidden),
            "n_agents": self.env.n_agents,
            "seed": self.seed,
            "popart": None if self.popart is None else
            {"mean": self.popart.mean, "sq": self.popart.sq,
             "initialized": self.popart.initialized},
        }
        save_checkpoint(path, sections, meta)

    def load_actor_params(self, sections: dict, meta: dict) -> None:
        if meta.get("algorithm") != self.algorithm:
            raise ValueError(
                f"checkpoint algorithm {meta.get('algorithm')!r} does not match "
                f"{self.algorithm!r}"
            )
        for j in range(len(self.policies)):
            self.actor_params[j] = sections[f"actor_{j}"].copy()
            self.reward_critics[j] = sections[f"critic_{j}"].copy()
            self.cost_critics[j] = sections[f"cost_critic_{j}"].copy()
        pa = meta.get("popart")
        if pa and self.popart is not None:
            self.popart.mean = pa["mean"]
            self.popart.sq = pa["sq"]
            self.popart.initialized = pa["initialized"]


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0].keys())
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def build_graph(cfg: ExperimentConfig) -> CommunicationGraph:
    n = cfg.n_agents
    if cfg.comm_weights:
        return CommunicationGraph.with_weights(n, cfg.comm_edges, cfg.comm_weights)
    if cfg.comm_edges:
        return CommunicationGraph.from_edges(n, cfg.comm_edges)
    return CommunicationGraph.ring(n)
