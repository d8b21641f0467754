"""Radial distribution network model: buses, lines, generators, topology.

Networks are loaded from a JSON case file (see ``docs`` section of README for
the schema), validated against radiality/connectivity invariants and converted
to per-unit on the case's MVA base. Models are immutable after load and safe
to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

GENERATOR_KINDS = ("diesel", "gas", "renewable", "grid")


class NetworkError(ValueError):
    """A case file failed to parse or violated a model invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool = False
    v_min_sq: float = 0.93**2
    v_max_sq: float = 1.05**2


@dataclass(frozen=True)
class Line:
    """Distribution line. Impedances are per-unit on the network base."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    i_max_sq: float
    r_ohm: float = 0.0
    x_ohm: float = 0.0


@dataclass(frozen=True)
class Generator:
    """Dispatchable unit. Power bounds in MW, costs in $ per hour terms.

    ``carbon_intensity`` is tCO2/MWh; for kind="grid" it is a per-timestep
    profile (tuple of length T) since the upstream mix varies over the day.
    """

    bus: int
    kind: str
    p_min: float = 0.0
    p_max: float = 0.0
    cost_a: float = 0.0
    cost_b: float = 0.0
    cost_c: float = 0.0
    cost_k: float = 0.0
    carbon_intensity: float | tuple[float, ...] = 0.0

    def intensity_at(self, hour: int) -> float:
        if isinstance(self.carbon_intensity, tuple):
            return self.carbon_intensity[hour % len(self.carbon_intensity)]
        return float(self.carbon_intensity)


@dataclass(frozen=True)
class NetworkModel:
    """Validated radial network. Immutable; buses are indexed 0..N-1."""

    name: str
    s_base: float
    v_base_kv: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    base_load_p: tuple[float, ...] = ()
    base_load_q: tuple[float, ...] = ()

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        for b in self.buses:
            if b.is_slack:
                return b.id
        raise NetworkError("no slack bus")

    @property
    def z_base(self) -> float:
        return self.v_base_kv**2 / self.s_base


@dataclass(frozen=True)
class OrientedLine:
    """Line re-oriented away from the slack bus (parent -> child)."""

    parent: int
    child: int
    r: float
    x: float
    i_max_sq: float
    index: int


def validate_network(net: NetworkModel) -> None:
    """Check every model invariant; raise NetworkError naming the first failure."""
    n = net.n_bus
    if n < 2:
        raise NetworkError("network needs at least 2 buses")
    ids = [b.id for b in net.buses]
    if ids != list(range(n)):
        raise NetworkError("bus ids must be contiguous 0..N-1 in order")
    slacks = [b.id for b in net.buses if b.is_slack]
    if len(slacks) != 1:
        raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
    for b in net.buses:
        if not (0.0 < b.v_min_sq < b.v_max_sq):
            raise NetworkError(f"bus {b.id}: need 0 < v_min_sq < v_max_sq")
    if len(net.lines) != n - 1:
        raise NetworkError(
            f"radiality violated: {len(net.lines)} lines for {n} buses "
            f"(expected {n - 1})"
        )
    for k, ln in enumerate(net.lines):
        if ln.from_bus not in range(n) or ln.to_bus not in range(n):
            raise NetworkError(f"line {k}: endpoint bus does not exist")
        if ln.from_bus == ln.to_bus:
            raise NetworkError(f"line {k}: self-loop")
        if ln.r < 0 or ln.x < 0:
            raise NetworkError(f"line {k}: negative impedance")
        if ln.i_max_sq <= 0:
            raise NetworkError(f"line {k}: i_max_sq must be positive")
    # Connectivity: |lines| = |buses|-1 plus connected <=> tree.
    seen = {net.slack_bus}
    frontier = [net.slack_bus]
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for ln in net.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    while frontier:
        u = frontier.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                frontier.append(w)
    if len(seen) != n:
        missing = sorted(set(range(n)) - seen)
        raise NetworkError(f"network not connected: buses {missing} unreachable")
    for g in net.generators:
        if g.kind not in GENERATOR_KINDS:
            raise NetworkError(f"generator at bus {g.bus}: unknown kind {g.kind!r}")
        if g.bus not in range(n):
            raise NetworkError(f"generator bus {g.bus} does not exist")
        if g.p_min > g.p_max:
            raise NetworkError(f"generator at bus {g.bus}: p_min > p_max")
        psi = g.carbon_intensity
        vals = psi if isinstance(psi, tuple) else (psi,)
        if any(v < 0 for v in vals):
            raise NetworkError(f"generator at bus {g.bus}: negative carbon intensity")
    if len([g for g in net.generators if g.kind == "grid"]) > 1:
        raise NetworkError("at most one grid interconnection generator")
    if net.base_load_p and len(net.base_load_p) != n:
        raise NetworkError("base_load_p length must equal bus count")


def load_network(path: str | Path) -> NetworkModel:
    """Load, convert to per-unit and validate a network case file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkError(f"cannot parse network file {path}: {exc}") from exc
    return network_from_dict(doc, name=doc.get("name", path.stem))


def network_from_dict(doc: dict, name: str = "network") -> NetworkModel:
    """Build a validated NetworkModel from a parsed case document."""
    try:
        s_base = float(doc["s_base_mva"])
        v_base = float(doc["v_base_kv"])
        z_base = v_base**2 / s_base
        buses = tuple(
            Bus(
                id=int(b["id"]),
                is_slack=bool(b.get("slack", False)),
                v_min_sq=float(b.get("v_min", 0.93)) ** 2,
                v_max_sq=float(b.get("v_max", 1.05)) ** 2,
            )
            for b in doc["buses"]
        )
        lines = tuple(
            Line(
                from_bus=int(ln["from"]),
                to_bus=int(ln["to"]),
                r=float(ln["r_ohm"]) / z_base,
                x=float(ln["x_ohm"]) / z_base,
                i_max_sq=float(ln.get("i_max_pu", 2.0)) ** 2,
                r_ohm=float(ln["r_ohm"]),
                x_ohm=float(ln["x_ohm"]),
            )
            for ln in doc["lines"]
        )
        gens = []
        for g in doc.get("generators", []):
            psi = g.get("carbon_intensity", 0.0)
            psi = tuple(float(v) for v in psi) if isinstance(psi, list) else float(psi)
            gens.append(
                Generator(
                    bus=int(g["bus"]),
                    kind=str(g["kind"]),
                    p_min=float(g.get("p_min", 0.0)),
                    p_max=float(g.get("p_max", 0.0)),
                    cost_a=float(g.get("cost_a", 0.0)),
                    cost_b=float(g.get("cost_b", 0.0)),
                    cost_c=float(g.get("cost_c", 0.0)),
                    cost_k=float(g.get("cost_k", 0.0)),
                    carbon_intensity=psi,
                )
            )
        load_p = [0.0] * len(buses)
        load_q = [0.0] * len(buses)
        for entry in doc.get("base_load", []):
            load_p[int(entry["bus"])] = float(entry.get("p_mw", 0.0))
            load_q[int(entry["bus"])] = float(entry.get("q_mvar", 0.0))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise NetworkError(f"malformed network document: {exc}") from exc
    net = NetworkModel(
        name=name,
        s_base=s_base,
        v_base_kv=v_base,
        buses=buses,
        lines=tuple(lines),
        generators=tuple(gens),
        base_load_p=tuple(load_p),
        base_load_q=tuple(load_q),
    )
    validate_network(net)
    return net


def topological_order(net: NetworkModel) -> list[int]:
    """Bus ids ordered slack-first with every parent before its children."""
    adj: dict[int, list[int]] = {i: [] for i in range(net.n_bus)}
    for ln in net.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    order = [net.slack_bus]
    seen = {net.slack_bus}
    head = 0
    while head < len(order):
        u = order[head]
        head += 1
        for w in sorted(adj[u]):
            if w not in seen:
                seen.add(w)
                order.append(w)
    return order


def oriented_lines(net: NetworkModel) -> tuple[OrientedLine, ...]:
    """Lines re-oriented parent->child following the tree rooted at the slack."""
    order = topological_order(net)
    depth = {b: k for k, b in enumerate(order)}
    out = []
    for k, ln in enumerate(net.lines):
        u, v = ln.from_bus, ln.to_bus
        parent, child = (u, v) if depth[u] < depth[v] else (v, u)
        out.append(
            OrientedLine(
                parent=parent, child=child, r=ln.r, x=ln.x,
                i_max_sq=ln.i_max_sq, index=k,
            )
        )
    return tuple(out)


def parent_of(net: NetworkModel) -> dict[int, int]:
    """Map child bus -> parent bus (slack excluded)."""
    return {ol.child: ol.parent for ol in oriented_lines(net)}


def line_to_physical(net: NetworkModel, ln: Line) -> tuple[float, float]:
    """Per-unit impedances back to ohms (round-trip check helper)."""
    return ln.r * net.z_base, ln.x * net.z_base
