"""Flexible-load scheduling environment.

Each of I agents controls an adjustable load (continuous fraction of a daily
capability profile) and one transferable block (fixed power, must run a fixed
number of consecutive hours within the day). Every step the submitted nodal
loads are dispatched by the operator SOCP; the shared reward is the aggregate
load welfare (utility minus DLMP payments) and the per-agent cost signal is
the carbon emission attributed by the emission-flow calculation, emitted as a
single terminal value against the agent's private quota.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .carbon import EmissionLedger, accrue_agent_emissions, build_carbon_state, solve_nodal_intensity
from .dispatch import DispatchInput, check_soc_exactness, solve_dispatch
from .grid import NetworkModel
from .profiles import DayData, ProfileSet


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    """Flexible-load agent parameters. Loads in MW, quota in tCO2."""

    bus: int
    utility_a: float
    utility_b: float
    p_adj_max: np.ndarray   # (T,) nominal adjustable capability
    p_tr: float
    duration: int
    quota: float


@dataclass
class EnvState:
    t: int
    p_uc: np.ndarray         # (I,) uncontrollable load this hour
    res_cap: np.ndarray      # (R,) renewable availability this hour
    o_prev: np.ndarray       # (I,) 0/1 transferable status last hour
    run_elapsed: np.ndarray  # (I,) completed consecutive-on steps
    em_cum: np.ndarray       # (I,) cumulative emission

    def copy(self) -> "EnvState":
        return EnvState(
            t=self.t,
            p_uc=self.p_uc.copy(),
            res_cap=self.res_cap.copy(),
            o_prev=self.o_prev.copy(),
            run_elapsed=self.run_elapsed.copy(),
            em_cum=self.em_cum.copy(),
        )


@dataclass(frozen=True)
class AgentAction:
    alpha: float
    on: int


@dataclass
class StepOutcome:
    next_state: EnvState
    reward: float
    costs: np.ndarray
    cost_limits: np.ndarray
    done: bool
    info: dict


FREE, FORCED_OFF, FORCED_ON = -1, 0, 1


def feasible_mask(state: EnvState, specs, horizon: int = 24) -> np.ndarray:
    """Per-agent forcing for the transferable block: -1 free / 0 off / 1 on.

    A started block must keep running until its duration completes; a finished
    block stays off; and the block is forced on when the remaining hours only
    just fit the remaining need.
    """
    forced = np.full(len(specs), FREE, dtype=int)
    for i, spec in enumerate(specs):
        remaining_need = spec.duration - int(state.run_elapsed[i])
        if remaining_need <= 0:
            forced[i] = FORCED_OFF
        elif state.run_elapsed[i] > 0:
            forced[i] = FORCED_ON
        elif remaining_need >= horizon - state.t:
            forced[i] = FORCED_ON
    return forced


def welfare_reward(p_adj, load_total, dlmp_at_bus, specs, dt: float = 1.0) -> float:
    """Aggregate per-step welfare: quadratic utility minus price payments ($)."""
    total = 0.0
    for i, spec in enumerate(specs):
        total += (
            spec.utility_a * p_adj[i] ** 2
            + spec.utility_b * p_adj[i]
            - dlmp_at_bus[i] * load_total[i]
        ) * dt
    return float(total)


class DemandEnv:
    """One scheduling day as a finite-horizon MDP over the dispatch stack."""

    def __init__(
        self,
        net: NetworkModel,
        specs,
        profile_set: ProfileSet,
        price_profile,
        grid_cap: float = 5.0,
        background_scale: float = 0.6,
        horizon: int = 24,
        infeasible_penalty: float = 1.0e4,
        exactness_tol: float = 1e-6,
    ):
        self.net = net
        self.specs = tuple(specs)
        self.profile_set = profile_set
        self.price = np.asarray(price_profile, dtype=float)
        self.grid_cap = float(grid_cap)
        self.background_scale = float(background_scale)
        self.T = int(horizon)
        self.infeasible_penalty = float(infeasible_penalty)
        self.exactness_tol = float(exactness_tol)
        if len(self.price) != self.T:
            raise EnvError("price profile length mismatch")
        self.agent_buses = np.array([s.bus for s in self.specs], dtype=int)
        self.quotas = np.array([s.quota for s in self.specs], dtype=float)
        self.n_agents = len(self.specs)
        self.n_res = len([g for g in net.generators if g.kind == "renewable"])
        base_p = np.asarray(net.base_load_p, dtype=float).copy()
        # Agent buses carry only their agent's aggregate; no double counting.
        base_p[self.agent_buses] = 0.0
        self._base_p = base_p
        # Background reactive demand at the same 0.95 power factor as the
        # flexible loads (case-file var data can be far more reactive, which
        # needlessly starves feeder voltage).
        self._base_q = base_p * 0.3287
        self._day: DayData | None = None
        self._day_index: int | None = None
        self._state: EnvState | None = None
        self._ledger = EmissionLedger.fresh(self.quotas)

    # -- episode control -------------------------------------------------

    def reset(self, day: int | None = None, rng: np.random.Generator | None = None) -> EnvState:
        """Start an episode on the given day index (or sample one with rng)."""
        if day is None:
            if rng is None:
                raise EnvError("reset needs a day index or an rng to sample one")
            day = int(rng.integers(0, len(self.profile_set)))
        data = self.profile_set.days[day]
        self._check_day(data)
        self._day = data
        self._day_index = day
        self._ledger.reset()
        self._state = EnvState(
            t=0,
            p_uc=data.p_uc[0].copy(),
            res_cap=data.res_cap[0].copy(),
            o_prev=np.zeros(self.n_agents, dtype=int),
            run_elapsed=np.zeros(self.n_agents, dtype=int),
            em_cum=np.zeros(self.n_agents),
        )
        return self._state.copy()

    def _check_day(self, data: DayData) -> None:
        if data.p_uc.shape != (self.T, self.n_agents):
            raise EnvError(
                f"profile length mismatch: p_uc {data.p_uc.shape} vs "
                f"({self.T}, {self.n_agents})"
            )
        if data.res_cap.shape != (self.T, self.n_res):
            raise EnvError("profile length mismatch: res_cap")
        if data.background.shape != (self.T,):
            raise EnvError("profile length mismatch: background")

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise EnvError("environment not reset")
        return self._state

    def feasible_mask(self, state: EnvState | None = None) -> np.ndarray:
        state = state if state is not None else self._state
        return feasible_mask(state, self.specs, horizon=self.T)

    def adj_cap(self, t: int) -> np.ndarray:
        """Adjustable-load capability per agent at hour t (MW)."""
        return self._day.p_adj_max[t]

    def step(self, actions) -> StepOutcome:
        """Apply hybrid actions, dispatch, price, attribute carbon, advance."""
        st = self.state
        t = st.t
        if t >= self.T:
            raise EnvError("episode already terminal")
        forced = self.feasible_mask(st)
        alpha = np.array([min(max(a.alpha, 0.0), 1.0) for a in actions])
        o_req = np.array([1 if a.on else 0 for a in actions], dtype=int)
        o = np.where(forced == FREE, o_req, forced)
        overrides = int(np.sum((forced != FREE) & (o_req != o)))

        p_adj = alpha * self.adj_cap(t)
        p_tr = o * np.array([s.p_tr for s in self.specs])
        agent_load = st.p_uc + p_adj + p_tr

        load_p = self._base_p * self.background_scale * self._day.background[t]
        load_q = self._base_q * self.background_scale * self._day.background[t]
        for i, bus in enumerate(self.agent_buses):
            load_p[bus] += agent_load[i]
            load_q[bus] += agent_load[i] * 0.3287  # pf 0.95 lagging
        sol = solve_dispatch(
            DispatchInput(
                net=self.net,
                nodal_load_p=load_p,
                nodal_load_q=load_q,
                res_cap=st.res_cap,
                wholesale_price=float(self.price[t]),
                grid_cap=self.grid_cap,
                hour=t,
            )
        )
        if not sol.optimal:
            next_state = self._advance(st, o, np.zeros(self.n_agents))
            next_state.t = self.T  # truncate
            self._state = next_state
            return StepOutcome(
                next_state=next_state.copy(),
                reward=-self.infeasible_penalty,
                costs=st.em_cum.copy(),
                cost_limits=self.quotas.copy(),
                done=True,
                info={"infeasible": True, "status": sol.status, "t": t},
            )

        carbon_state = build_carbon_state(self.net, sol, hour=t)
        psi = solve_nodal_intensity(carbon_state)
        accrue_agent_emissions(self._ledger, psi, self.agent_buses, agent_load)
        dlmp_agents = sol.dlmp[self.agent_buses]
        reward = welfare_reward(p_adj, agent_load, dlmp_agents, self.specs)
        gaps = check_soc_exactness(self.net, sol, tol=self.exactness_tol)

        next_state = self._advance(st, o, self._ledger.emissions)
        self._state = next_state
        done = next_state.t >= self.T
        costs = self._ledger.emissions.copy() if done else np.zeros(self.n_agents)
        limits = self.quotas.copy() if done else np.zeros(self.n_agents)
        info = {
            "t": t,
            "infeasible": False,
            "dlmp_agent": dlmp_agents.copy(),
            "psi_agent": psi[self.agent_buses].copy(),
            "objective": sol.objective,
            "max_gap": float(np.max(gaps.gaps)) if len(gaps.gaps) else 0.0,
            "exact": gaps.exact,
            "overrides": overrides,
            "alpha": alpha.copy(),
            "on": o.copy(),
            "p_adj": p_adj.copy(),
            "agent_load": agent_load.copy(),
            "step_emission": psi[self.agent_buses] * agent_load,
            "p_grid": sol.p_grid,
        }
        return StepOutcome(
            next_state=next_state.copy(),
            reward=reward,
            costs=costs,
            cost_limits=limits,
            done=done,
            info=info,
        )

    def _advance(self, st: EnvState, o, em_cum) -> EnvState:
        t_next = st.t + 1
        run = st.run_elapsed + o
        if t_next < self.T:
            p_uc = self._day.p_uc[t_next].copy()
            res = self._day.res_cap[t_next].copy()
        else:
            p_uc = np.zeros(self.n_agents)
            res = np.zeros(self.n_res)
        return EnvState(
            t=t_next,
            p_uc=p_uc,
            res_cap=res,
            o_prev=np.asarray(o, dtype=int).copy(),
            run_elapsed=run,
            em_cum=np.asarray(em_cum, dtype=float).copy(),
        )

    # -- observation encoding ---------------------------------------------

    @property
    def obs_dim(self) -> int:
        return self.T + 4 * self.n_agents + self.n_res

    def observe(self, state: EnvState | None = None) -> np.ndarray:
        """Normalized observation vector: one-hot hour, loads, RES, block status."""
        st = state if state is not None else self._state
        one_hot = np.zeros(self.T)
        if st.t < self.T:
            one_hot[st.t] = 1.0
        ref_scale = np.array(
            [max(np.max(s.p_adj_max) + s.p_tr, 1e-6) for s in self.specs]
        )
        res_pmax = np.array(
            [g.p_max for g in self.net.generators if g.kind == "renewable"]
        )
        return np.concatenate([
            one_hot,
            st.p_uc / ref_scale,
            st.res_cap / np.maximum(res_pmax, 1e-6) if self.n_res else st.res_cap,
            st.o_prev.astype(float),
            st.run_elapsed / np.array([s.duration for s in self.specs], dtype=float),
            st.em_cum / self.quotas,
        ])


def export_trace_jsonl(path, outcomes, day: int | None = None) -> None:
    """Write one episode as JSON-lines, one step per line, for replay checks."""
    import json
    from pathlib import Path

    def clean(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, (np.bool_,)):
            return bool(v)
        return v

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for k, out in enumerate(outcomes):
            row = {
                "step": k,
                "day": day,
                "reward": float(out.reward),
                "costs": out.costs.tolist(),
                "cost_limits": out.cost_limits.tolist(),
                "done": bool(out.done),
                "info": {key: clean(v) for key, v in out.info.items()},
            }
            f.write(json.dumps(row) + "\n")


def read_trace_jsonl(path):
    import json
    from pathlib import Path

    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def episode_metrics(outcomes, quotas) -> dict:
    """Aggregate an episode trace into the comparison-table metrics."""
    quotas = np.asarray(quotas, dtype=float)
    total_reward = float(sum(o.reward for o in outcomes))
    terminal = outcomes[-1]
    emissions = np.asarray(terminal.costs, dtype=float)
    total_emission = float(emissions.sum())
    total_quota = float(quotas.sum())
    violation = max(0.0, total_emission - total_quota) / total_quota * 100.0
    per_agent = np.maximum(0.0, emissions - quotas) / quotas * 100.0
    return {
        "total_reward": total_reward,
        "total_emission": total_emission,
        "violation_rate_pct": violation,
        "per_agent_violation_pct": per_agent,
        "per_agent_emission": emissions,
        "satisfied": total_emission <= total_quota + 1e-12,
        "infeasible_steps": int(sum(1 for o in outcomes if o.info.get("infeasible"))),
    }
