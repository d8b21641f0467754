"""Synthetic day profiles for loads and renewable availability.

Stands in for proprietary historical feeds: every column is a smooth daily
shape (sinusoid / gaussian bump) plus seeded noise, deterministic per seed.
CSV layout: one row per hour, one column per agent or renewable unit; files
carry a header comment documenting the generative form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

T_HOURS = 24


@dataclass(frozen=True)
class DayData:
    """One scheduling day: per-agent uncontrollable load and per-unit RES caps."""

    p_uc: np.ndarray       # (T, I) MW
    res_cap: np.ndarray    # (T, R) MW
    p_adj_max: np.ndarray  # (T, I) MW
    background: np.ndarray  # (T,) multiplier on the network base load


@dataclass(frozen=True)
class ProfileSet:
    days: tuple[DayData, ...]

    def __len__(self) -> int:
        return len(self.days)


def _pv_shape(hour: float) -> float:
    # Daylight bell, zero outside ~06:00-19:00.
    if hour < 6.0 or hour > 19.0:
        return 0.0
    return max(0.0, math.sin(math.pi * (hour - 6.0) / 13.0)) ** 1.3


def _wind_shape(hour: float) -> float:
    return 0.55 + 0.30 * math.cos(math.pi * (hour - 2.0) / 12.0)


def _uc_shape(hour: float) -> float:
    morning = math.exp(-(((hour - 8.0) / 2.2) ** 2))
    evening = math.exp(-(((hour - 19.5) / 2.6) ** 2))
    return 0.55 + 0.30 * evening + 0.18 * morning


def _adj_shape(hour: float) -> float:
    day = math.exp(-(((hour - 14.0) / 5.0) ** 2))
    return 0.65 + 0.35 * day


def synth_days(
    seed: int,
    n_days: int,
    agents,
    res_kinds,
    noise: float = 0.08,
) -> ProfileSet:
    """Generate ``n_days`` of data for the given agent and renewable fleet.

    ``agents`` supplies per-agent scale factors (uc_scale, p_adj_max_scale);
    ``res_kinds`` is a list of ("pv"|"wind", p_max) pairs in generator order.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(T_HOURS, dtype=float)
    uc_base = np.array([[_uc_shape(h) for h in hours]]).T          # (T, 1)
    adj_base = np.array([[_adj_shape(h) for h in hours]]).T
    days = []
    for _ in range(n_days):
        p_uc = np.zeros((T_HOURS, len(agents)))
        p_adj = np.zeros((T_HOURS, len(agents)))
        for i, a in enumerate(agents):
            wiggle = 1.0 + noise * rng.standard_normal(T_HOURS)
            p_uc[:, i] = np.clip(a.uc_scale * uc_base[:, 0] * wiggle, 0.0, None)
            # Adjustable capability is a fixed per-agent profile (part of the
            # agent's contract, not a stochastic feed).
            p_adj[:, i] = a.p_adj_max_scale * adj_base[:, 0]
        res = np.zeros((T_HOURS, len(res_kinds)))
        for j, (kind, p_max) in enumerate(res_kinds):
            shape = _pv_shape if kind == "pv" else _wind_shape
            cloud = 1.0 + 1.5 * noise * rng.standard_normal(T_HOURS)
            res[:, j] = np.clip(
                [p_max * shape(h) for h in hours] * np.clip(cloud, 0.0, None),
                0.0, p_max,
            )
        bg = np.clip(
            uc_base[:, 0] / uc_base[:, 0].max() * (1.0 + 0.5 * noise * rng.standard_normal(T_HOURS)),
            0.15, 1.05,
        )
        days.append(DayData(p_uc=p_uc, res_cap=res, p_adj_max=p_adj, background=bg))
    return ProfileSet(days=tuple(days))


def res_fleet(net) -> list[tuple[str, float]]:
    """Classify each renewable generator by bus parity heuristic: the bundled
    cases put wind first (lower bus id) then PV; odd buses default to PV."""
    fleet = []
    for g in net.generators:
        if g.kind != "renewable":
            continue
        kind = "wind" if g.bus in (3, 25) else "pv"
        fleet.append((kind, g.p_max))
    return fleet


def write_profiles(path: Path, profile: ProfileSet, seed: int, what: str,
                   columns: list[str], extract) -> None:
    """Write one CSV: rows = day-hour, columns per entity."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(f"# gridflex synthetic {what} profiles: daily shape "
                f"(sinusoid/gaussian bumps) x (1 + noise), seed={seed}\n")
        writer = csv.writer(f)
        writer.writerow(["day", "hour"] + columns)
        for d, day in enumerate(profile.days):
            arr = extract(day)
            for h in range(arr.shape[0]):
                writer.writerow([d, h] + [f"{v:.6f}" for v in arr[h]])


def write_profile_files(out_dir: Path, profile: ProfileSet, seed: int,
                        n_agents: int, n_res: int) -> dict[str, Path]:
    out = {}
    specs = [
        ("uc", [f"agent_{i}" for i in range(n_agents)], lambda d: d.p_uc),
        ("res", [f"unit_{j}" for j in range(n_res)], lambda d: d.res_cap),
        ("adj_max", [f"agent_{i}" for i in range(n_agents)], lambda d: d.p_adj_max),
        ("background", ["scale"], lambda d: d.background.reshape(-1, 1)),
    ]
    for what, cols, fn in specs:
        p = Path(out_dir) / f"{what}.csv"
        write_profiles(p, profile, seed, what, cols, fn)
        out[what] = p
    return out


def read_profile_files(paths: dict) -> ProfileSet:
    """Load a ProfileSet from the four CSV files written by write_profile_files."""

    def read_one(path):
        rows = []
        with Path(path).open() as f:
            for line in f:
                if line.startswith("#"):
                    continue
                rows.append(line.strip().split(","))
        header, body = rows[0], rows[1:]
        n_cols = len(header) - 2
        by_day: dict[int, list[list[float]]] = {}
        for r in body:
            by_day.setdefault(int(r[0]), []).append([float(v) for v in r[2:]])
        days = [np.asarray(by_day[d]) for d in sorted(by_day)]
        if any(day.shape != (T_HOURS, n_cols) for day in days):
            raise ValueError(f"profile file {path}: expected {T_HOURS} rows per day")
        return days

    uc = read_one(paths["uc"])
    res = read_one(paths["res"])
    adj = read_one(paths["adj_max"])
    bg = read_one(paths["background"])
    if not (len(uc) == len(res) == len(adj) == len(bg)):
        raise ValueError("profile files disagree on day count")
    days = tuple(
        DayData(p_uc=u, res_cap=r, p_adj_max=a, background=b[:, 0])
        for u, r, a, b in zip(uc, res, adj, bg)
    )
    return ProfileSet(days=days)
