"""Comparison algorithms: PPO with an emission penalty, plus the named
single-policy / no-consensus variants of the constrained trainer.

centralized_cpo and macpo reuse the trust-region mechanics unchanged; they are
selected through the trainer's ``algorithm`` switch and exposed here as named
update operations for direct use in tests and ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cpo import RolloutBuffer, action_view, per_episode_gae
from .nn import kl_divergence, value_of


@dataclass(frozen=True)
class BaselineKind:
    """Algorithm selector with the PPO penalty weight attached."""

    name: str
    penalty_weight: float = 500.0

    def __post_init__(self):
        if self.name == "ppo_penalty" and self.penalty_weight <= 0:
            raise ValueError("ppo_penalty requires a positive penalty weight")


def penalized_rewards(buffer: RolloutBuffer, quotas: np.ndarray,
                      weight: float) -> np.ndarray:
    """Shared reward minus the terminal quota-violation penalty.

    Identical to the base reward wherever every agent stays within quota.
    """
    rewards = buffer.rewards.copy()
    quotas = np.asarray(quotas, dtype=float)
    for sl in buffer.episode_slices():
        overshoot = np.maximum(0.0, buffer.costs[sl][-1] - quotas).sum()
        rewards[sl.stop - 1] -= weight * overshoot
    return rewards


def ppo_penalty_update(trainer, buffer: RolloutBuffer, penalty_weight: float,
                       clip: float = 0.2, epochs: int = 10) -> list[dict]:
    """Clipped-ratio ascent on the penalty-augmented reward, per policy."""
    hp = trainer.hp
    rewards = penalized_rewards(buffer, trainer.env.quotas, penalty_weight)
    infos = []
    for j, pol in enumerate(trainer.policies):
        v = value_of(trainer.reward_critics[j], trainer.critic_manifest,
                     buffer.obs, trainer.popart)
        adv = per_episode_gae(buffer, v, rewards, hp.gamma, hp.gae_lambda)
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
        u, o, mask, logp_old = action_view(buffer, trainer.policies, j)
        params = trainer.actor_params[j]
        old_dist = pol.dist(params, buffer.obs)
        opt = trainer.adam[j]
        for _ in range(epochs):
            lp_new = pol.log_probs(params, buffer.obs, u, o, mask)
            ratio = np.exp(lp_new - logp_old)
            if not np.all(np.isfinite(ratio)):
                raise FloatingPointError("non-finite PPO ratio")
            clipped_out = ((adv > 0) & (ratio > 1.0 + clip)) | (
                (adv < 0) & (ratio < 1.0 - clip)
            )
            w = np.where(clipped_out, 0.0, ratio * adv) / buffer.n
            grad = pol.weighted_logprob_grad(params, buffer.obs, u, o, mask, w)
            params = opt.step(params, grad)
        trainer.actor_params[j] = params
        infos.append({
            "mode": "ppo",
            "kl": kl_divergence(old_dist, pol.dist(params, buffer.obs), mask),
            "accepted": True,
        })
    return infos, rewards


def centralized_cpo_update(trainer, buffer: RolloutBuffer) -> list[dict]:
    """One joint trust-region step (single policy over the joint action space)."""
    if trainer.algorithm != "centralized_cpo":
        raise ValueError("trainer not configured for centralized_cpo")
    return trainer.cpo_update(buffer)


def macpo_update(trainer, buffer: RolloutBuffer) -> list[dict]:
    """Per-agent constrained steps with the consensus step replaced by identity."""
    if trainer.algorithm != "macpo":
        raise ValueError("trainer not configured for macpo")
    return trainer.cpo_update(buffer)
