"""Experiment orchestration: runtime assembly, evaluation, comparison."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ALGORITHMS, AgentConfig, ExperimentConfig
from .cpo import CommunicationGraph
from .env import AgentAction, DemandEnv, AgentSpec, episode_metrics
from .nn import load_checkpoint, sigmoid
from .profiles import ProfileSet, _adj_shape, read_profile_files, res_fleet, synth_days
from .trainer import Trainer, TrainResult, build_graph, write_metrics_csv

EVAL_SEED_OFFSET = 10_000


@dataclass
class Runtime:
    cfg: ExperimentConfig
    train_env: DemandEnv
    eval_env: DemandEnv
    specs: tuple[AgentSpec, ...]
    graph: CommunicationGraph
    quotas: np.ndarray


def build_specs(cfg: ExperimentConfig, train_profiles: ProfileSet,
                quotas: np.ndarray | None = None) -> tuple[AgentSpec, ...]:
    """Agent specs with quotas split across agents.

    Default split is proportional to each agent's mean uncontrollable load
    over the training days; "emission_baseline" weights that by the nodal
    intensity each bus actually sees (near-uniform splits can leave agents on
    carbon-heavy buses with almost no headroom above their inflexible floor);
    explicit per-agent quotas override both.
    """
    n = cfg.n_agents
    if quotas is None:
        if cfg.quotas:
            quotas = np.asarray(cfg.quotas, dtype=float)
        else:
            mean_uc = np.mean([d.p_uc.mean(axis=0) for d in train_profiles.days], axis=0)
            share = mean_uc / mean_uc.sum() if mean_uc.sum() > 0 else np.full(n, 1.0 / n)
            quotas = cfg.quota_total * share
    hours = np.arange(cfg.horizon, dtype=float)
    specs = []
    for a, q in zip(cfg.agents, quotas):
        nominal = a.p_adj_max_scale * np.array([_adj_shape(h) for h in hours])
        specs.append(AgentSpec(
            bus=a.bus, utility_a=a.utility_a, utility_b=a.utility_b,
            p_adj_max=nominal, p_tr=a.p_tr, duration=a.duration, quota=float(q),
        ))
    return tuple(specs)


def _baseline_emission_quotas(cfg: ExperimentConfig, net, specs,
                              train_profiles: ProfileSet, days: int = 5) -> np.ndarray:
    """Quota split proportional to each agent's inflexible emission baseline."""
    probe = DemandEnv(
        net=net, specs=specs, profile_set=train_profiles,
        price_profile=cfg.price_profile, grid_cap=cfg.grid_cap,
        background_scale=cfg.background_scale, horizon=cfg.horizon,
    )
    totals = np.zeros(cfg.n_agents)
    for day in range(min(days, len(train_profiles))):
        probe.reset(day=day)
        done = False
        while not done:
            t = probe.state.t
            acts = [AgentAction(alpha=0.0,
                                on=1 if t >= cfg.horizon - s.duration else 0)
                    for s in probe.specs]
            out = probe.step(acts)
            done = out.done
        totals += out.costs
    share = totals / totals.sum() if totals.sum() > 0 else np.full(cfg.n_agents, 1.0 / cfg.n_agents)
    return cfg.quota_total * share


def build_profiles(cfg: ExperimentConfig) -> tuple[ProfileSet, ProfileSet]:
    net = cfg.load_net()
    fleet = res_fleet(net)
    if cfg.profile_files is not None:
        full = read_profile_files(cfg.profile_files)
        n_eval = max(1, len(full) // 4)
        return (ProfileSet(days=full.days[:-n_eval]),
                ProfileSet(days=full.days[-n_eval:]))
    spec = cfg.profiles
    train = synth_days(spec.seed, spec.train_days, cfg.agents, fleet)
    evalp = synth_days(spec.seed + EVAL_SEED_OFFSET, spec.eval_days, cfg.agents, fleet)
    return train, evalp


def build_runtime(cfg: ExperimentConfig) -> Runtime:
    net = cfg.load_net()
    train_profiles, eval_profiles = build_profiles(cfg)
    specs = build_specs(cfg, train_profiles)
    if cfg.quota_split == "emission_baseline" and not cfg.quotas:
        quotas = _baseline_emission_quotas(cfg, net, specs, train_profiles)
        specs = build_specs(cfg, train_profiles, quotas=quotas)
    mk = lambda prof: DemandEnv(
        net=net, specs=specs, profile_set=prof, price_profile=cfg.price_profile,
        grid_cap=cfg.grid_cap, background_scale=cfg.background_scale,
        horizon=cfg.horizon, infeasible_penalty=cfg.hyper.infeasible_penalty,
    )
    return Runtime(
        cfg=cfg,
        train_env=mk(train_profiles),
        eval_env=mk(eval_profiles),
        specs=specs,
        graph=build_graph(cfg),
        quotas=np.array([s.quota for s in specs]),
    )


def make_trainer(rt: Runtime, seed: int, algorithm: str | None = None) -> Trainer:
    return Trainer(rt.train_env, rt.cfg.hyper,
                   algorithm or rt.cfg.algorithm, rt.graph, seed)


# -- evaluation ---------------------------------------------------------------


def run_episodes(env: DemandEnv, action_fn, day_indices,
                 trace_dir: Path | None = None) -> list[dict]:
    """Roll deterministic policies over the given days; one metrics dict each.

    With ``trace_dir`` every episode is also exported as JSON-lines so each
    reported number can be recomputed from the raw step records.
    """
    from .env import export_trace_jsonl

    out = []
    for k, day in enumerate(day_indices):
        day = int(day) % len(env.profile_set)
        env.reset(day=day)
        outcomes = []
        done = False
        while not done:
            obs = env.observe()
            forced = env.feasible_mask()
            actions = action_fn(env, obs, forced)
            step = env.step(actions)
            outcomes.append(step)
            done = step.done
        if trace_dir is not None:
            export_trace_jsonl(Path(trace_dir) / f"episode_{k:04d}.jsonl",
                               outcomes, day=day)
        m = episode_metrics(outcomes, env.quotas)
        m["day"] = day
        out.append(m)
    return out


def greedy_action_fn(policies, params_list):
    """Evaluation actions: continuous = squash(mean), discrete = argmax."""

    def fn(env, obs, forced):
        n = env.n_agents
        u = np.zeros(n)
        o = np.zeros(n, dtype=int)
        mask = forced != -1
        forced_vals = np.maximum(forced, 0)
        oc = od = 0
        for pol, params in zip(policies, params_list):
            ui, oi = pol.greedy(params, obs, mask[od:od + pol.n_disc],
                                forced_vals[od:od + pol.n_disc])
            u[oc:oc + pol.n_cont] = ui
            o[od:od + pol.n_disc] = oi
            oc += pol.n_cont
            od += pol.n_disc
        return [AgentAction(alpha=float(sigmoid(np.array([u[i]]))[0]), on=int(o[i]))
                for i in range(n)]

    return fn


def noflex_action_fn(start_hour: int = 17):
    """No-flexibility ablation: full adjustable load, habitual evening block."""

    def fn(env, obs, forced):
        t = env.state.t
        acts = []
        for i, spec in enumerate(env.specs):
            start = min(start_hour, env.T - spec.duration)
            want_on = 1 if start <= t < start + spec.duration else 0
            acts.append(AgentAction(alpha=1.0, on=want_on))
        return acts

    return fn


def aggregate_row(method: str, episodes: list[dict]) -> dict:
    return {
        "method": method,
        "reward": float(np.mean([m["total_reward"] for m in episodes])),
        "violation_rate": float(np.mean([m["violation_rate_pct"] for m in episodes])),
        "emission": float(np.mean([m["total_emission"] for m in episodes])),
        "satisfied_fraction": float(np.mean([1.0 if m["satisfied"] else 0.0
                                             for m in episodes])),
    }


def evaluate_trainer(rt: Runtime, trainer: Trainer, episodes: int = 100,
                     trace_dir: Path | None = None) -> tuple[dict, list[dict]]:
    days = [k % len(rt.eval_env.profile_set) for k in range(episodes)]
    eps = run_episodes(rt.eval_env, greedy_action_fn(trainer.policies,
                                                     trainer.actor_params), days,
                       trace_dir=trace_dir)
    return aggregate_row(trainer.algorithm, eps), eps


def evaluate_checkpoint(rt: Runtime, checkpoint: Path, episodes: int = 100,
                        seed: int = 0, trace_dir: Path | None = None) -> tuple[dict, list[dict]]:
    sections, meta = load_checkpoint(checkpoint)
    trainer = make_trainer(rt, seed=seed, algorithm=meta.get("algorithm"))
    trainer.load_actor_params(sections, meta)
    return evaluate_trainer(rt, trainer, episodes, trace_dir=trace_dir)


# -- training + comparison ----------------------------------------------------


def train_once(rt: Runtime, seed: int, out_dir: Path, algorithm: str | None = None,
               episodes: int | None = None, log_every: int = 0) -> TrainResult:
    algorithm = algorithm or rt.cfg.algorithm
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(rt, seed, algorithm)
    return trainer.run(
        episodes or rt.cfg.episodes,
        metrics_path=out_dir / f"metrics_{algorithm}_seed{seed}.csv",
        checkpoint_path=out_dir / f"checkpoint_{algorithm}_seed{seed}.bin",
        log_every=log_every,
    )


def max_workers() -> int:
    raw = os.environ.get("GRIDFLEX_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def compare(cfg: ExperimentConfig, out_dir: Path, seed: int = 0,
            episodes: int | None = None, eval_episodes: int = 100,
            include_ablation: bool = False, log_every: int = 0) -> list[dict]:
    """Train all four algorithms on identical seed/data and tabulate them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(algorithm: str) -> dict:
        rt = build_runtime(cfg)   # fresh envs per run: safe concurrency
        res = train_once(rt, seed, out_dir / algorithm, algorithm, episodes,
                         log_every=log_every)
        row, eps = evaluate_trainer(rt, res.trainer, eval_episodes)
        _write_episodes_csv(out_dir / algorithm / "eval_episodes.csv", eps)
        return row

    workers = min(max_workers(), len(ALGORITHMS))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, ALGORITHMS))
    else:
        rows = [one(a) for a in ALGORITHMS]
    if include_ablation:
        rt = build_runtime(cfg)
        days = [k % len(rt.eval_env.profile_set) for k in range(eval_episodes)]
        eps = run_episodes(rt.eval_env, noflex_action_fn(), days)
        row = aggregate_row("no_flex", eps)
        _write_episodes_csv(out_dir / "no_flex_eval_episodes.csv", eps)
        rows.append(row)
    _write_compare_csv(out_dir / "compare.csv", rows)
    return rows


def _write_compare_csv(path: Path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["method", "reward", "violation_rate",
                                          "emission", "satisfied_fraction"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})


def _write_episodes_csv(path: Path, episodes: list[dict]) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["day", "total_reward", "total_emission", "violation_rate_pct",
                    "satisfied"])
        for m in episodes:
            w.writerow([m["day"], repr(m["total_reward"]), repr(m["total_emission"]),
                        repr(m["violation_rate_pct"]), int(m["satisfied"])])
