"""Carbon emission flow: attribute generator emissions to consuming buses.

Two independent routes compute the nodal intensity vector (tCO2/MWh):

* a matrix solve of the influx-mixing linear system, and
* an iterative sweep over the flow digraph resolving each bus only after all
  of its upstream intensities are known.

Line losses are deducted at the receiving end, i.e. the branch-flow matrix
holds receiving-end megawatts and the loss carries the sending bus intensity.
Buses with zero influx serve no load; their rows are regularized to identity
with intensity zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dispatch import DispatchSolution
from .grid import NetworkModel, oriented_lines

INFLUX_TOL = 1e-9


class CarbonFlowError(ValueError):
    """The intensity system could not be solved."""


@dataclass
class CarbonFlowState:
    """Matrix form of one step of carbon emission flow (all power in MW)."""

    p_branch: np.ndarray       # (N, N) positive directed receiving-end flows
    p_gen_inj: np.ndarray      # (N, Z) injection of generator z at bus n
    gen_intensity: np.ndarray  # (Z,) tCO2/MWh

    @property
    def influx(self) -> np.ndarray:
        return self.p_branch.sum(axis=0) + self.p_gen_inj.sum(axis=1)

    @property
    def p_node_diag(self) -> np.ndarray:
        return np.diag(self.influx)


@dataclass
class EmissionLedger:
    """Per-agent cumulative emission against a per-agent quota (tCO2)."""

    emissions: np.ndarray
    quotas: np.ndarray

    @classmethod
    def fresh(cls, quotas) -> "EmissionLedger":
        q = np.asarray(quotas, dtype=float)
        return cls(emissions=np.zeros_like(q), quotas=q.copy())

    def reset(self) -> None:
        self.emissions[:] = 0.0


def build_branch_flow_matrix(net: NetworkModel, sol: DispatchSolution) -> np.ndarray:
    """Receiving-end positive flow matrix: entry (n, m) is MW arriving at m from n."""
    if not sol.optimal:
        raise CarbonFlowError("branch flow matrix requires an optimal dispatch")
    n = net.n_bus
    pb = np.zeros((n, n))
    sb = net.s_base
    for p, ol in enumerate(oriented_lines(net)):
        send = sol.p_flow[p]                      # MW entering at the parent end
        loss = ol.r * sol.i_sq[p] * sb            # MW burned on the line
        pb[ol.parent, ol.child] = max(send - loss, 0.0)
        pb[ol.child, ol.parent] = max(-send, 0.0)
    return pb


def build_carbon_state(net: NetworkModel, sol: DispatchSolution, hour: int | None = None) -> CarbonFlowState:
    """Assemble flow/injection matrices and the generator intensity vector."""
    hour = sol.hour if hour is None else hour
    n = net.n_bus
    z = len(net.generators)
    pg = np.zeros((n, z))
    psi_g = np.zeros(z)
    for gi, g in enumerate(net.generators):
        pg[g.bus, gi] = max(float(sol.p_gen[gi]), 0.0)
        psi_g[gi] = g.intensity_at(hour)
    return CarbonFlowState(
        p_branch=build_branch_flow_matrix(net, sol),
        p_gen_inj=pg,
        gen_intensity=psi_g,
    )


def solve_nodal_intensity(state: CarbonFlowState) -> np.ndarray:
    """Matrix route: solve (P^N - (P^B)^T) psi = P^G psi^G with dead-bus rows
    regularized to identity/zero."""
    influx = state.influx
    m = np.diag(influx) - state.p_branch.T
    rhs = state.p_gen_inj @ state.gen_intensity
    dead = influx <= INFLUX_TOL
    for k in np.flatnonzero(dead):
        m[k, :] = 0.0
        m[k, k] = 1.0
        rhs[k] = 0.0
    try:
        psi = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        bad = sorted(int(k) for k in np.flatnonzero(dead))
        raise CarbonFlowError(
            f"singular intensity system; unresolved dead buses {bad}"
        ) from exc
    if not np.all(np.isfinite(psi)):
        raise CarbonFlowError("non-finite nodal intensity")
    if np.any(psi < -1e-9):
        raise CarbonFlowError("negative nodal intensity; inconsistent flow data")
    return np.maximum(psi, 0.0)


def iterative_intensity_oracle(
    net: NetworkModel, sol: DispatchSolution, gen_intensity=None, hour: int | None = None
) -> np.ndarray:
    """Definition route: per-bus mixing resolved in flow-topological order.

    Independent of the matrix path; used to cross-validate it. Works for any
    flow orientation on a radial network (the flow digraph is acyclic).
    """
    state = build_carbon_state(net, sol, hour=hour)
    if gen_intensity is not None:
        state.gen_intensity = np.asarray(gen_intensity, dtype=float)
    return iterative_intensity_from_state(state)


def iterative_intensity_from_state(state: CarbonFlowState) -> np.ndarray:
    n = state.p_branch.shape[0]
    pb = state.p_branch
    em_in = state.p_gen_inj @ state.gen_intensity   # local emission inflow per bus
    p_in = state.p_gen_inj.sum(axis=1)              # local power inflow per bus
    pending = (pb > 0.0).sum(axis=0)                # unresolved upstream feeds
    psi = np.zeros(n)
    ready = [k for k in range(n) if pending[k] == 0]
    resolved = 0
    while ready:
        u = ready.pop()
        resolved += 1
        denom = p_in[u] + pb[:, u].sum()
        numer = em_in[u] + pb[:, u] @ psi
        psi[u] = numer / denom if denom > INFLUX_TOL else 0.0
        for w in np.flatnonzero(pb[u, :] > 0.0):
            pending[w] -= 1
            if pending[w] == 0:
                ready.append(int(w))
    if resolved != n:
        raise CarbonFlowError("flow digraph has a cycle; network not radial?")
    return psi


def accrue_agent_emissions(
    ledger: EmissionLedger, psi: np.ndarray, agent_buses, agent_loads, dt: float = 1.0
) -> EmissionLedger:
    """Add each agent's nodal-intensity-weighted consumption to its ledger."""
    for k, (bus, load) in enumerate(zip(agent_buses, agent_loads)):
        ledger.emissions[k] += float(psi[bus]) * float(load) * dt
    return ledger


def emission_balance(net: NetworkModel, state: CarbonFlowState, psi: np.ndarray,
                     nodal_load: np.ndarray) -> dict:
    """Conservation accounting: emissions into loads + line losses vs sources.

    Loss on each line carries the intensity of the bus it is fed from.
    """
    load_em = float(np.asarray(nodal_load) @ psi)
    loss_em = 0.0
    influx = state.influx
    for u in range(net.n_bus):
        outflow = state.p_branch[u, :].sum() + float(nodal_load[u])
        loss_here = influx[u] - outflow   # power entering u that never leaves
        loss_em += max(loss_here, 0.0) * psi[u]
    source_em = float(state.p_gen_inj.sum(axis=0) @ state.gen_intensity)
    return {
        "to_loads": load_em,
        "to_losses": loss_em,
        "from_sources": source_em,
        "residual": source_em - load_em - loss_em,
    }
