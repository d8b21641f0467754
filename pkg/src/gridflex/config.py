"""Experiment configuration: schema, validation, bundled defaults."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import NetworkModel, load_network


class ConfigError(ValueError):
    """An experiment config failed validation."""


ALGORITHMS = ("cmacpo", "macpo", "centralized_cpo", "ppo_penalty")


def bundled_case_path(name: str) -> Path:
    """Path to a bundled network case (``case33`` or ``case123``)."""
    ref = resources.files("gridflex").joinpath(f"data/{name}.json")
    return Path(str(ref))


def bundled_config_path(name: str) -> Path:
    ref = resources.files("gridflex").joinpath(f"data/{name}.json")
    return Path(str(ref))


@dataclass(frozen=True)
class AgentConfig:
    bus: int
    utility_a: float = -10.0
    utility_b: float = 120.0
    p_adj_max_scale: float = 0.15
    p_tr: float = 0.08
    duration: int = 4
    uc_scale: float = 0.06


@dataclass(frozen=True)
class Hyperparams:
    """Trainer hyperparameters. Defaults follow the experiment tables."""

    gamma: float = 0.95
    gae_lambda: float = 0.95
    mu: float = 0.1
    lr_phi: float = 5e-4
    delta: float = 0.2
    cg_iters: int = 10
    cg_damping: float = 0.1
    backoff: float = 0.8
    line_search_steps: int = 10
    critic_epochs: int = 50
    episodes_per_iter: int = 8
    hidden: tuple[int, ...] = (128, 32)
    pop_art: bool = False
    cost_limit_scale: float = 1.0
    on_bias_init: float = 1.0
    log_std_init: float = -1.0
    ppo_clip: float = 0.2
    ppo_epochs: int = 10
    ppo_lr: float = 3e-4
    penalty_weight: float = 500.0
    infeasible_penalty: float = 1.0e4


@dataclass(frozen=True)
class ProfileSynthSpec:
    seed: int = 0
    train_days: int = 30
    eval_days: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    network_path: Path
    agents: tuple[AgentConfig, ...]
    algorithm: str = "cmacpo"
    episodes: int = 2000
    horizon: int = 24
    seeds: tuple[int, ...] = (0,)
    quota_total: float = 4.25
    quota_split: str = "uc_mean"
    quotas: tuple[float, ...] = ()
    price_profile: tuple[float, ...] = ()
    grid_cap: float = 5.0
    background_scale: float = 0.6
    profiles: ProfileSynthSpec | None = None
    profile_files: dict | None = None
    comm_edges: tuple[tuple[int, int], ...] = ()
    comm_weights: tuple[tuple[float, ...], ...] = ()
    hyper: Hyperparams = field(default_factory=Hyperparams)
    out_dir: Path = Path("out")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def load_net(self) -> NetworkModel:
        return load_network(self.network_path)


def default_price_profile() -> tuple[float, ...]:
    """Synthetic 24-point wholesale price ($/MWh), midday peak."""
    return tuple(
        round(58.0 + 92.0 * math.exp(-(((h - 13.0) / 3.2) ** 2)), 4) for h in range(24)
    )


def _agents_from_doc(doc: dict) -> tuple[AgentConfig, ...]:
    out = []
    for a in doc["agents"]:
        out.append(
            AgentConfig(
                bus=int(a["bus"]),
                utility_a=float(a.get("utility_a", -10.0)),
                utility_b=float(a.get("utility_b", 120.0)),
                p_adj_max_scale=float(a.get("p_adj_max_scale", 0.15)),
                p_tr=float(a.get("p_tr", 0.08)),
                duration=int(a.get("duration", 4)),
                uc_scale=float(a.get("uc_scale", 0.06)),
            )
        )
    return tuple(out)


def load_experiment(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return experiment_from_dict(doc, base_dir=path.parent)


def experiment_from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    base_dir = base_dir or Path(".")
    try:
        raw_net = str(doc["network"])
        if raw_net.startswith("bundled:"):
            net_path = bundled_case_path(raw_net.split(":", 1)[1])
        else:
            net_path = (base_dir / raw_net).resolve()
        hp_doc = doc.get("hyperparameters", {})
        hidden = tuple(int(v) for v in hp_doc.get("hidden", (128, 32)))
        hyper = Hyperparams(
            gamma=float(hp_doc.get("gamma", 0.95)),
            gae_lambda=float(hp_doc.get("gae_lambda", 0.95)),
            mu=float(hp_doc.get("mu", 0.1)),
            lr_phi=float(hp_doc.get("lr_phi", 5e-4)),
            delta=float(hp_doc.get("delta", 0.2)),
            cg_iters=int(hp_doc.get("cg_iters", 10)),
            cg_damping=float(hp_doc.get("cg_damping", 0.1)),
            backoff=float(hp_doc.get("backoff", 0.8)),
            line_search_steps=int(hp_doc.get("line_search_steps", 10)),
            critic_epochs=int(hp_doc.get("critic_epochs", 50)),
            episodes_per_iter=int(hp_doc.get("episodes_per_iter", 8)),
            hidden=hidden,
            pop_art=bool(hp_doc.get("pop_art", False)),
            cost_limit_scale=float(hp_doc.get("cost_limit_scale", 1.0)),
            on_bias_init=float(hp_doc.get("on_bias_init", 1.0)),
            log_std_init=float(hp_doc.get("log_std_init", -1.0)),
            ppo_clip=float(hp_doc.get("ppo_clip", 0.2)),
            ppo_epochs=int(hp_doc.get("ppo_epochs", 10)),
            ppo_lr=float(hp_doc.get("ppo_lr", 3e-4)),
            penalty_weight=float(hp_doc.get("penalty_weight", 500.0)),
            infeasible_penalty=float(hp_doc.get("infeasible_penalty", 1.0e4)),
        )
        prof = doc.get("profiles", {})
        synth = None
        files = None
        if "synth" in prof:
            synth = ProfileSynthSpec(
                seed=int(prof["synth"].get("seed", 0)),
                train_days=int(prof["synth"].get("train_days", 30)),
                eval_days=int(prof["synth"].get("eval_days", 10)),
            )
        if "files" in prof:
            files = {k: str((base_dir / v).resolve()) for k, v in prof["files"].items()}
        price = tuple(float(v) for v in doc.get("price_profile", ())) or default_price_profile()
        cfg = ExperimentConfig(
            network_path=net_path,
            agents=_agents_from_doc(doc),
            algorithm=str(doc.get("algorithm", "cmacpo")),
            episodes=int(doc.get("episodes", 2000)),
            horizon=int(doc.get("horizon", 24)),
            seeds=tuple(int(s) for s in doc.get("seeds", (0,))),
            quota_total=float(doc.get("quota_total", 4.25)),
            quota_split=str(doc.get("quota_split", "uc_mean")),
            quotas=tuple(float(v) for v in doc.get("quotas", ())),
            price_profile=price,
            grid_cap=float(doc.get("grid_cap", 5.0)),
            background_scale=float(doc.get("background_scale", 0.6)),
            profiles=synth,
            profile_files=files,
            comm_edges=tuple((int(a), int(b)) for a, b in doc.get("comm_edges", ())),
            comm_weights=tuple(tuple(float(v) for v in row) for row in doc.get("comm_weights", ())),
            hyper=hyper,
            out_dir=Path(doc.get("out_dir", "out")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc
    validate_experiment(cfg)
    return cfg


def validate_experiment(cfg: ExperimentConfig) -> None:
    """Raise ConfigError naming the first violated constraint."""
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")
    if not cfg.network_path.exists():
        raise ConfigError(f"network file does not exist: {cfg.network_path}")
    net = cfg.load_net()
    if not cfg.agents:
        raise ConfigError("need at least one agent")
    for a in cfg.agents:
        if a.bus not in range(net.n_bus):
            raise ConfigError(f"agent bus {a.bus} not in network")
        if a.utility_a >= 0:
            raise ConfigError(f"agent at bus {a.bus}: utility_a must be negative")
        if not (0 < a.duration <= cfg.horizon):
            raise ConfigError(
                f"agent at bus {a.bus}: transferable duration {a.duration} must lie in "
                f"1..{cfg.horizon} (consecutive-run window)"
            )
    if cfg.quotas and len(cfg.quotas) != cfg.n_agents:
        raise ConfigError("explicit quotas length must equal agent count")
    if cfg.quotas and any(q <= 0 for q in cfg.quotas):
        raise ConfigError("quotas must be positive")
    if cfg.quota_total <= 0 and not cfg.quotas:
        raise ConfigError("quota_total must be positive")
    if len(cfg.price_profile) != cfg.horizon:
        raise ConfigError("price_profile length must equal horizon")
    if cfg.profiles is None and cfg.profile_files is None:
        raise ConfigError("config must provide profiles (synth block or files)")
    if cfg.profile_files is not None:
        for key, p in cfg.profile_files.items():
            if not Path(p).exists():
                raise ConfigError(f"profile file {key} does not exist: {p}")
    if cfg.comm_weights:
        w = np.asarray(cfg.comm_weights, dtype=float)
        if w.shape != (cfg.n_agents, cfg.n_agents):
            raise ConfigError("comm_weights must be I x I")
        if np.any(w < 0):
            raise ConfigError("comm_weights must be nonnegative")
        if not (np.allclose(w.sum(axis=0), 1.0, atol=1e-9) and np.allclose(w.sum(axis=1), 1.0, atol=1e-9)):
            raise ConfigError("comm_weights must be doubly stochastic")
    if cfg.hyper.episodes_per_iter <= 0 or cfg.episodes <= 0:
        raise ConfigError("episode counts must be positive")
