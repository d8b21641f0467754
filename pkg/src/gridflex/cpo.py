"""Constrained trust-region update machinery and networked consensus.

The per-agent update maximizes the linearized reward surrogate subject to a
linearized cost constraint and a KL trust region:

    max_x g.x   s.t.  b.x + c <= 0,   (1/2) x.H.x <= delta

solved through its analytic dual (H applied only through matrix-vector
products, inverted by conjugate gradients). When no point of the trust region
satisfies the cost constraint, a pure cost-decreasing recovery step is taken
instead. Backtracking line search validates every proposal against sampled
surrogates and the measured KL before it is accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import FREE, AgentAction, DemandEnv
from .nn import HybridPolicy, PolicyDistribution, sigmoid

EPS = 1e-10


class CpoError(RuntimeError):
    pass


# -- communication graph ------------------------------------------------------


@dataclass(frozen=True)
class CommunicationGraph:
    """Undirected agent graph with doubly stochastic averaging weights."""

    n_agents: int
    edges: tuple[tuple[int, int], ...]
    weights: np.ndarray

    @classmethod
    def ring(cls, n_agents: int) -> "CommunicationGraph":
        if n_agents == 1:
            return cls.from_edges(1, ())
        edges = tuple((i, (i + 1) % n_agents) for i in range(n_agents))
        if n_agents == 2:
            edges = ((0, 1),)
        return cls.from_edges(n_agents, edges)

    @classmethod
    def complete(cls, n_agents: int) -> "CommunicationGraph":
        edges = tuple(
            (i, j) for i in range(n_agents) for j in range(i + 1, n_agents)
        )
        return cls.from_edges(n_agents, edges)

    @classmethod
    def from_edges(cls, n_agents: int, edges) -> "CommunicationGraph":
        """Metropolis-Hastings weights: doubly stochastic on any connected graph."""
        edges = tuple(tuple(sorted((int(a), int(b)))) for a, b in edges)
        deg = np.zeros(n_agents, dtype=int)
        for a, b in edges:
            deg[a] += 1
            deg[b] += 1
        w = np.zeros((n_agents, n_agents))
        for a, b in edges:
            w[a, b] = w[b, a] = 1.0 / (1.0 + max(deg[a], deg[b]))
        for i in range(n_agents):
            w[i, i] = 1.0 - w[i].sum()
        graph = cls(n_agents=n_agents, edges=edges, weights=w)
        graph.validate()
        return graph

    @classmethod
    def with_weights(cls, n_agents: int, edges, weights) -> "CommunicationGraph":
        graph = cls(n_agents=n_agents,
                    edges=tuple(tuple(sorted((int(a), int(b)))) for a, b in edges),
                    weights=np.asarray(weights, dtype=float))
        graph.validate()
        return graph

    def validate(self) -> None:
        w = self.weights
        n = self.n_agents
        if w.shape != (n, n):
            raise CpoError("weight matrix shape mismatch")
        if np.any(w < -1e-12):
            raise CpoError("negative consensus weight")
        if not (np.allclose(w.sum(axis=0), 1.0, atol=1e-9)
                and np.allclose(w.sum(axis=1), 1.0, atol=1e-9)):
            raise CpoError("consensus weights must be doubly stochastic")
        allowed = {(i, i) for i in range(n)} | set(self.edges) | {
            (b, a) for a, b in self.edges
        }
        for i in range(n):
            for j in range(n):
                if w[i, j] > 1e-12 and (i, j) not in allowed:
                    raise CpoError(f"weight on non-edge pair ({i}, {j})")
        if n > 1:
            seen = {0}
            frontier = [0]
            adj = {k: set() for k in range(n)}
            for a, b in self.edges:
                adj[a].add(b)
                adj[b].add(a)
            while frontier:
                u = frontier.pop()
                for v2 in adj[u]:
                    if v2 not in seen:
                        seen.add(v2)
                        frontier.append(v2)
            if len(seen) != n:
                raise CpoError("communication graph not connected")


def consensus_update(phis: np.ndarray, graph: CommunicationGraph) -> np.ndarray:
    """One synchronous averaging round: phi_i <- sum_j c(i,j) phi_j."""
    phis = np.asarray(phis, dtype=float)
    return graph.weights @ phis


def disagreement(phis: np.ndarray) -> float:
    """Max pairwise infinity-norm distance between agents' parameter vectors."""
    phis = np.asarray(phis)
    worst = 0.0
    for i in range(len(phis)):
        for j in range(i + 1, len(phis)):
            worst = max(worst, float(np.max(np.abs(phis[i] - phis[j]))))
    return worst


# -- rollout collection -------------------------------------------------------


@dataclass
class RolloutBuffer:
    """On-policy trajectory store, cleared after every update."""

    obs: np.ndarray
    next_obs: np.ndarray
    u: np.ndarray          # (N, I) pre-squash continuous actions
    o: np.ndarray          # (N, I) discrete on/off
    mask: np.ndarray       # (N, I) True where the discrete dim was forced
    rewards: np.ndarray    # (N,)
    costs: np.ndarray      # (N, I) terminal-convention cost signal
    step_costs: np.ndarray  # (N, I) per-step emission increments (same totals)
    terminal: np.ndarray   # (N,) episode boundary flags
    logp_old: np.ndarray   # (N, I)
    episode_id: np.ndarray
    infeasible: np.ndarray

    @property
    def n(self) -> int:
        return len(self.rewards)

    @property
    def n_episodes(self) -> int:
        return int(self.episode_id[-1]) + 1 if self.n else 0

    def episode_slices(self):
        out = []
        start = 0
        for k in range(self.n):
            if self.terminal[k]:
                out.append(slice(start, k + 1))
                start = k + 1
        return out

    def episode_cost_totals(self) -> np.ndarray:
        """(episodes, I) terminal cumulative cost per agent."""
        return np.stack([self.costs[sl][-1] for sl in self.episode_slices()])

    def episode_reward_totals(self) -> np.ndarray:
        return np.array([self.rewards[sl].sum() for sl in self.episode_slices()])


def collect_rollouts(env: DemandEnv, policies, params_list, episodes: int,
                     rng: np.random.Generator, greedy: bool = False,
                     day_indices=None) -> RolloutBuffer:
    """Roll ``episodes`` full days under the given policies.

    Policies partition the joint action vector: I one-dim policies for the
    decentralized algorithms, or a single joint policy covering every dim for
    the centralized baseline. ``logp_old`` is stored per policy.
    """
    rows: dict[str, list] = {k: [] for k in (
        "obs", "next_obs", "u", "o", "mask", "rewards", "costs", "step_costs",
        "terminal", "logp_old", "episode_id", "infeasible")}
    n_agents = env.n_agents
    if sum(p.n_disc for p in policies) != n_agents:
        raise CpoError("policies must cover one discrete dim per agent")
    for ep in range(episodes):
        day = None if day_indices is None else int(day_indices[ep % len(day_indices)])
        env.reset(day=day, rng=rng)
        done = False
        while not done:
            obs = env.observe()
            forced = env.feasible_mask()
            u = np.zeros(n_agents)
            o = np.zeros(n_agents, dtype=int)
            lp = np.zeros(len(policies))
            mask = forced != FREE
            forced_vals = np.maximum(forced, 0)
            oc = od = 0
            for j, (pol, params) in enumerate(zip(policies, params_list)):
                sl_c = slice(oc, oc + pol.n_cont)
                sl_d = slice(od, od + pol.n_disc)
                if greedy:
                    ui, oi = pol.greedy(params, obs, mask[sl_d], forced_vals[sl_d])
                else:
                    ui, oi, lp[j] = pol.sample(
                        params, obs, mask[sl_d], forced_vals[sl_d], rng
                    )
                u[sl_c] = ui
                o[sl_d] = oi
                oc += pol.n_cont
                od += pol.n_disc
            actions = [AgentAction(alpha=float(sigmoid(np.array([u[i]]))[0]),
                                   on=int(o[i])) for i in range(n_agents)]
            out = env.step(actions)
            rows["obs"].append(obs)
            rows["next_obs"].append(env.observe(out.next_state))
            rows["u"].append(u)
            rows["o"].append(o.astype(float))
            rows["mask"].append(mask)
            rows["rewards"].append(out.reward)
            rows["costs"].append(out.costs)
            rows["step_costs"].append(
                np.asarray(out.info.get("step_emission", np.zeros(n_agents))))
            rows["terminal"].append(out.done)
            rows["logp_old"].append(lp)
            rows["episode_id"].append(ep)
            rows["infeasible"].append(bool(out.info.get("infeasible", False)))
            done = out.done
    return RolloutBuffer(
        obs=np.asarray(rows["obs"]),
        next_obs=np.asarray(rows["next_obs"]),
        u=np.asarray(rows["u"]),
        o=np.asarray(rows["o"]),
        mask=np.asarray(rows["mask"]),
        rewards=np.asarray(rows["rewards"]),
        costs=np.asarray(rows["costs"]),
        step_costs=np.asarray(rows["step_costs"]),
        terminal=np.asarray(rows["terminal"]),
        logp_old=np.asarray(rows["logp_old"]),
        episode_id=np.asarray(rows["episode_id"]),
        infeasible=np.asarray(rows["infeasible"]),
    )


# -- surrogate gradients ------------------------------------------------------


def per_episode_gae(buffer: RolloutBuffer, values: np.ndarray, signal: np.ndarray,
                    gamma: float, lam: float) -> np.ndarray:
    """GAE computed episode by episode with terminal bootstrap zero."""
    from .nn import gae

    adv = np.zeros(buffer.n)
    for sl in buffer.episode_slices():
        v = np.append(values[sl], 0.0)
        adv[sl] = gae(signal[sl], v, gamma, lam)
    return adv


def action_view(buffer: RolloutBuffer, policies, j: int):
    """(u, o, mask, logp_old) columns belonging to policy j."""
    oc = sum(p.n_cont for p in policies[:j])
    od = sum(p.n_disc for p in policies[:j])
    pol = policies[j]
    return (
        buffer.u[:, oc:oc + pol.n_cont],
        buffer.o[:, od:od + pol.n_disc],
        buffer.mask[:, od:od + pol.n_disc],
        buffer.logp_old[:, j],
    )


def surrogate_gradients(buffer: RolloutBuffer, agent: int, policy: HybridPolicy,
                        params: np.ndarray, advantages: np.ndarray,
                        cost_advantages: np.ndarray):
    """Score-function gradients of the reward and cost surrogates (per episode)."""
    n_ep = max(buffer.n_episodes, 1)
    obs = buffer.obs
    u = buffer.u[:, [agent]]
    o = buffer.o[:, [agent]]
    mask = buffer.mask[:, [agent]]
    g = policy.weighted_logprob_grad(params, obs, u, o, mask, advantages) / n_ep
    b = policy.weighted_logprob_grad(params, obs, u, o, mask, cost_advantages) / n_ep
    return g, b


# -- conjugate gradients ------------------------------------------------------


def conjugate_gradient(operator, rhs: np.ndarray, iters: int = 10,
                       tol: float = 1e-8):
    """Solve operator(x) = rhs for an SPD operator; returns (x, info)."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = rhs.copy()
    rs = float(r @ r)
    rhs_norm = float(np.linalg.norm(rhs))
    info = {"iterations": 0, "residual": rhs_norm, "converged": rhs_norm == 0.0,
            "breakdown": False}
    if rhs_norm == 0.0:
        return x, info
    for k in range(iters):
        ap = operator(p)
        curv = float(p @ ap)
        if curv <= 0.0:
            info["breakdown"] = True
            break
        alpha = rs / curv
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        info["iterations"] = k + 1
        info["residual"] = float(np.sqrt(rs_new))
        if np.sqrt(rs_new) <= tol * rhs_norm:
            info["converged"] = True
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, info


# -- trust-region subproblem --------------------------------------------------


@dataclass
class TrustRegionStep:
    mode: str                     # optimal | recovery | skipped
    step: np.ndarray              # QP-optimal direction x* (or recovery step)
    solution: np.ndarray          # proposed parameters
    g: np.ndarray
    b: np.ndarray
    c: float
    delta: float
    mu: float
    lam: float = 0.0
    nu: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def solve_trust_region(theta: np.ndarray, g: np.ndarray, b: np.ndarray, c: float,
                       hvp, delta: float, mu: float = 0.1,
                       cg_iters: int = 10, cg_tol: float = 1e-8) -> TrustRegionStep:
    """Analytic dual solution of the linearized constrained step.

    Returns the exact subproblem optimizer in ``step`` and the damped proposal
    ``theta + mu * step`` in ``solution``; in recovery mode the full-radius
    cost-descent step is both. ``hvp`` applies the KL Hessian.
    """
    g = np.asarray(g, dtype=float)
    b = np.asarray(b, dtype=float)
    b_norm = float(np.linalg.norm(b))
    diag: dict = {}

    if b_norm < 1e-12:
        if c > 0:
            return TrustRegionStep(
                mode="skipped", step=np.zeros_like(theta), solution=theta.copy(),
                g=g, b=b, c=c, delta=delta, mu=mu,
                diagnostics={"reason": "constraint violated but cost gradient ~0"},
            )
        x, lam = _trpo_step(g, hvp, delta, cg_iters, cg_tol)
        return TrustRegionStep(
            mode="optimal", step=x, solution=theta + mu * x, g=g, b=b, c=c,
            delta=delta, mu=mu, lam=lam, nu=0.0, diagnostics={"case": "b_zero"},
        )

    v, info_g = conjugate_gradient(hvp, g, cg_iters, cg_tol)   # H^-1 g
    w, info_b = conjugate_gradient(hvp, b, cg_iters, cg_tol)   # H^-1 b
    q = float(g @ v)
    r = float(g @ w)
    s = float(b @ w)
    diag.update(q=q, r=r, s=s, cg_g=info_g, cg_b=info_b, w=w)

    if s <= 1e-12:
        if c > 0:
            return TrustRegionStep(
                mode="skipped", step=np.zeros_like(theta), solution=theta.copy(),
                g=g, b=b, c=c, delta=delta, mu=mu,
                diagnostics=dict(diag, reason="degenerate cost curvature"),
            )
        x, lam = _trpo_step(g, hvp, delta, cg_iters, cg_tol, precomputed=(v, q))
        return TrustRegionStep(
            mode="optimal", step=x, solution=theta + mu * x, g=g, b=b, c=c,
            delta=delta, mu=mu, lam=lam, diagnostics=dict(diag, case="s_zero"),
        )

    if c > 0 and c**2 / s > 2.0 * delta:
        # No point of the trust region satisfies the linearized constraint:
        # pure cost-decreasing step at the full KL radius.
        x = -np.sqrt(2.0 * delta / s) * w
        return TrustRegionStep(
            mode="recovery", step=x, solution=theta + x, g=g, b=b, c=c,
            delta=delta, mu=mu, nu=float(np.sqrt(2.0 * delta / s)),
            diagnostics=dict(diag, case="infeasible"),
        )

    a_coef = max(q - r**2 / s, 0.0)
    b_coef = 2.0 * delta - c**2 / s

    if c < 0 and b_coef <= 0:
        # Constraint slack over the whole trust region.
        x, lam = _trpo_step(g, hvp, delta, cg_iters, cg_tol, precomputed=(v, q))
        return TrustRegionStep(
            mode="optimal", step=x, solution=theta + mu * x, g=g, b=b, c=c,
            delta=delta, mu=mu, lam=lam, diagnostics=dict(diag, case="slack"),
        )

    # Dual over lambda with nu(lambda) = max(0, (r + lambda c)/s): two regions
    # split where r + lambda c changes sign.
    def d_nu_pos(lam):
        return a_coef / (2.0 * max(lam, EPS)) + lam * b_coef / 2.0 - r * c / s

    def d_nu_zero(lam):
        return q / (2.0 * max(lam, EPS)) + lam * delta

    if abs(c) < EPS:
        pos_interval = (0.0, np.inf) if r > 0 else None
        zero_interval = (0.0, np.inf)
    elif c < 0:
        split = max(-r / c, 0.0)   # nu > 0 for lam < split
        pos_interval = (0.0, split) if split > 0 else None
        zero_interval = (split, np.inf)
    else:
        split = max(-r / c, 0.0)   # nu > 0 for lam > split
        pos_interval = (split, np.inf)
        zero_interval = (0.0, split) if split > 0 else None

    candidates = []
    if pos_interval is not None and b_coef > 0:
        lam_a = float(np.clip(np.sqrt(a_coef / max(b_coef, EPS)),
                              pos_interval[0] + EPS, pos_interval[1]))
        candidates.append((d_nu_pos(lam_a), lam_a))
    if zero_interval is not None:
        lam_b = float(np.clip(np.sqrt(q / (2.0 * delta)),
                              zero_interval[0], zero_interval[1]))
        if lam_b > EPS or q < EPS:
            candidates.append((d_nu_zero(lam_b), lam_b))
    if not candidates:
        x = -np.sqrt(2.0 * delta / s) * w
        return TrustRegionStep(
            mode="recovery", step=x, solution=theta + x, g=g, b=b, c=c,
            delta=delta, mu=mu, diagnostics=dict(diag, case="dual_empty"),
        )
    _, lam = min(candidates, key=lambda t: t[0])
    lam = max(lam, EPS)
    nu = max(0.0, (r + lam * c) / s)
    x = (v - nu * w) / lam
    return TrustRegionStep(
        mode="optimal", step=x, solution=theta + mu * x, g=g, b=b, c=c,
        delta=delta, mu=mu, lam=lam, nu=nu, diagnostics=dict(diag, case="dual"),
    )


def _trpo_step(g, hvp, delta, cg_iters, cg_tol, precomputed=None):
    if precomputed is None:
        v, _ = conjugate_gradient(hvp, g, cg_iters, cg_tol)
        q = float(g @ v)
    else:
        v, q = precomputed
    if q < EPS:
        return np.zeros_like(g), float("inf")
    lam = float(np.sqrt(q / (2.0 * delta)))
    return np.sqrt(2.0 * delta / q) * v, lam


# -- line search --------------------------------------------------------------


@dataclass
class AgentBatch:
    """Everything line search needs to re-evaluate one agent's surrogates."""

    policy: HybridPolicy
    obs: np.ndarray
    u: np.ndarray
    o: np.ndarray
    mask: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    cost_advantages: np.ndarray
    n_episodes: int
    old_dist: PolicyDistribution
    j_c: float                  # sampled episode-mean cost under the old policy


def surrogate_estimates(batch: AgentBatch, params: np.ndarray):
    """Importance-weighted surrogate objective / cost deltas and measured KL."""
    from .nn import kl_divergence

    new_dist = batch.policy.dist(params, batch.obs)
    lp_new = batch.policy.log_probs(params, batch.obs, batch.u, batch.o, batch.mask)
    ratio = np.exp(np.clip(lp_new - batch.logp_old, -30.0, 30.0))
    surr = float(np.sum((ratio - 1.0) * batch.advantages)) / batch.n_episodes
    cost_delta = float(np.sum((ratio - 1.0) * batch.cost_advantages)) / batch.n_episodes
    kl = kl_divergence(batch.old_dist, new_dist, batch.mask)
    return surr, batch.j_c + cost_delta, kl


def line_search(batch: AgentBatch, params_old: np.ndarray, proposed: np.ndarray,
                delta: float, d: float, mode: str = "optimal",
                backoff: float = 0.8, max_steps: int = 10):
    """Exponential backtracking; returns (accepted params, info).

    Acceptance requires measured KL <= delta plus, in optimal mode, a
    non-degrading surrogate objective and surrogate cost within the limit d;
    in recovery mode the surrogate cost must not worsen. Demanding
    cost_est <= d even while the batch violates the limit is deliberate:
    accepting merely "non-worsening" steps lets estimation noise leak cost
    upward indefinitely (the caller falls back to a recovery step instead).
    """
    full = proposed - params_old
    for k in range(max_steps):
        trial = params_old + (backoff**k) * full
        surr, cost_est, kl = surrogate_estimates(batch, trial)
        if kl > delta + 1e-12:
            continue
        if mode == "recovery":
            if cost_est <= batch.j_c + 1e-12:
                return trial, {"accepted": True, "backtracks": k, "kl": kl,
                               "surrogate": surr, "cost_est": cost_est}
        else:
            if surr >= -1e-12 and cost_est <= d + 1e-9:
                return trial, {"accepted": True, "backtracks": k, "kl": kl,
                               "surrogate": surr, "cost_est": cost_est}
    return params_old.copy(), {"accepted": False, "backtracks": max_steps,
                               "kl": 0.0, "surrogate": 0.0, "cost_est": batch.j_c}
