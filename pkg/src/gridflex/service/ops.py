"""Operation handlers shared by the HTTP endpoints and the in-process CLI."""

from __future__ import annotations

import base64
import tempfile
from pathlib import Path

import numpy as np

from ..carbon import (
    build_carbon_state,
    emission_balance,
    iterative_intensity_from_state,
    solve_nodal_intensity,
)
from ..config import ConfigError, experiment_from_dict
from ..dispatch import DispatchInput, DispatchSolution, check_soc_exactness, solve_dispatch
from ..grid import NetworkError, network_from_dict, topological_order
from ..harness import build_profiles, build_runtime, evaluate_trainer, make_trainer
from ..nn import load_checkpoint, save_checkpoint
from ..profiles import synth_days, res_fleet
from . import schemas as S


def dispatch_op(req: S.DispatchRequest) -> S.DispatchResponse:
    net = network_from_dict(req.network)
    snap = req.snapshot
    sol = solve_dispatch(DispatchInput(
        net=net,
        nodal_load_p=np.asarray(snap.load_p, dtype=float),
        nodal_load_q=np.asarray(snap.load_q, dtype=float),
        res_cap=np.asarray(snap.res_cap, dtype=float),
        wholesale_price=snap.price,
        grid_cap=snap.grid_cap,
        hour=snap.hour,
    ))
    if not sol.optimal:
        return S.DispatchResponse(status=sol.status, hour=snap.hour,
                                  solve_info=sol.solve_info)
    report = check_soc_exactness(net, sol)
    return S.DispatchResponse(
        status=sol.status,
        hour=sol.hour,
        objective=sol.objective,
        p_gen=sol.p_gen.tolist(),
        p_grid=sol.p_grid,
        p_flow=sol.p_flow.tolist(),
        q_flow=sol.q_flow.tolist(),
        v_sq=sol.v_sq.tolist(),
        i_sq=sol.i_sq.tolist(),
        dlmp=sol.dlmp.tolist(),
        q_slack=sol.q_slack,
        load_p=list(map(float, snap.load_p)),
        max_soc_gap=float(np.max(report.gaps)) if len(report.gaps) else 0.0,
        exact=report.exact,
        flagged_lines=list(report.flagged),
        solve_info=sol.solve_info,
    )


def solution_from_response(resp: S.DispatchResponse) -> DispatchSolution:
    return DispatchSolution(
        status="optimal" if resp.status == "optimal" else resp.status,
        objective=resp.objective if resp.objective is not None else float("nan"),
        p_gen=np.asarray(resp.p_gen, dtype=float),
        p_grid=resp.p_grid,
        p_flow=np.asarray(resp.p_flow, dtype=float),
        q_flow=np.asarray(resp.q_flow, dtype=float),
        v_sq=np.asarray(resp.v_sq, dtype=float),
        i_sq=np.asarray(resp.i_sq, dtype=float),
        dlmp=np.asarray(resp.dlmp, dtype=float),
        q_slack=resp.q_slack,
        hour=resp.hour,
    )


def carbon_op(req: S.CarbonRequest) -> S.CarbonResponse:
    net = network_from_dict(req.network)
    sol = solution_from_response(req.solution)
    if not sol.optimal:
        raise ValueError("carbon attribution requires an optimal dispatch solution")
    state = build_carbon_state(net, sol, hour=sol.hour)
    psi = solve_nodal_intensity(state)
    psi_iter = iterative_intensity_from_state(state)
    loads = np.asarray(req.solution.load_p, dtype=float) \
        if req.solution.load_p else np.zeros(net.n_bus)
    bal = emission_balance(net, state, psi, loads)
    return S.CarbonResponse(
        psi=psi.tolist(),
        psi_iterative=psi_iter.tolist(),
        max_route_difference=float(np.max(np.abs(psi - psi_iter))),
        conservation_residual=float(bal["residual"]),
    )


def validate_op(req: S.ValidateRequest) -> S.ValidateResponse:
    checks: list[S.CheckResult] = []

    def record(check: str, fn) -> bool:
        try:
            fn()
            checks.append(S.CheckResult(check=check, passed=True))
            return True
        except Exception as exc:  # report, never raise: this IS the product
            checks.append(S.CheckResult(check=check, passed=False, detail=str(exc)))
            return False

    cfg_holder = {}

    def parse_config():
        cfg_holder["cfg"] = experiment_from_dict(req.config)

    ok = record("config: schema, files, agents, quotas, weights", parse_config)
    if ok:
        cfg = cfg_holder["cfg"]
        net_holder = {}

        def load_net():
            net_holder["net"] = cfg.load_net()

        if record("network: radiality, connectivity, bounds, generators", load_net):
            net = net_holder["net"]
            record("network: topological order covers every bus once",
                   lambda: _check_topo(net))
        record("profiles: synthesizable or files present",
               lambda: build_profiles(cfg))
        record("runtime: environment assembly and quota split",
               lambda: build_runtime(cfg))
    return S.ValidateResponse(passed=all(c.passed for c in checks), checks=checks)


def _check_topo(net):
    order = topological_order(net)
    if sorted(order) != list(range(net.n_bus)):
        raise NetworkError("topological order does not cover every bus exactly once")


def profiles_op(req: S.ProfilesRequest) -> S.ProfilesResponse:
    cfg = experiment_from_dict(req.config)
    net = cfg.load_net()
    prof = synth_days(req.seed, req.days, cfg.agents, res_fleet(net))
    return S.ProfilesResponse(
        days=len(prof),
        uc=[d.p_uc.tolist() for d in prof.days],
        res_cap=[d.res_cap.tolist() for d in prof.days],
        adj_max=[d.p_adj_max.tolist() for d in prof.days],
        background=[d.background.tolist() for d in prof.days],
    )


def train_op(req: S.TrainRequest, progress=lambda frac: None) -> S.TrainResultPayload:
    cfg = experiment_from_dict(req.config)
    rt = build_runtime(cfg)
    trainer = make_trainer(rt, seed=req.seed, algorithm=req.algorithm)
    episodes = req.episodes or cfg.episodes
    iters = max(1, int(np.ceil(episodes / cfg.hyper.episodes_per_iter)))
    rows = []
    import numpy as _np
    from ..cpo import disagreement
    initial = disagreement(_np.stack(trainer.reward_critics))
    for k in range(iters):
        rows.append(trainer.iterate(k))
        progress((k + 1) / iters)
    final = disagreement(_np.stack(trainer.reward_critics))
    with tempfile.TemporaryDirectory() as tmp:
        ck = Path(tmp) / "checkpoint.bin"
        trainer.save(ck)
        payload = base64.b64encode(ck.read_bytes()).decode()
    last = rows[-1]
    cost_total = float(sum(last[f"cost_{i}"] for i in range(rt.train_env.n_agents)))
    return S.TrainResultPayload(
        checkpoint_b64=payload,
        metrics=[{k: (v if not isinstance(v, float) else float(v))
                  for k, v in r.items()} for r in rows],
        final_reward=float(last["reward"]),
        final_cost_total=cost_total,
        initial_disagreement=float(initial),
        final_disagreement=float(final),
    )


def evaluate_op(req: S.EvaluateRequest) -> S.EvaluateResponse:
    cfg = experiment_from_dict(req.config)
    rt = build_runtime(cfg)
    with tempfile.NamedTemporaryFile(suffix=".bin", delete=False) as f:
        f.write(base64.b64decode(req.checkpoint_b64))
        path = Path(f.name)
    try:
        from ..harness import evaluate_checkpoint
        row, eps = evaluate_checkpoint(rt, path, episodes=req.episodes, seed=req.seed)
    finally:
        path.unlink(missing_ok=True)
    return S.EvaluateResponse(
        method=row["method"],
        reward=row["reward"],
        violation_rate=row["violation_rate"],
        emission=row["emission"],
        satisfied_fraction=row["satisfied_fraction"],
        episodes=[{k: (v.tolist() if isinstance(v, np.ndarray) else
                       (bool(v) if isinstance(v, np.bool_) else v))
                   for k, v in m.items()} for m in eps],
    )


def compare_op(req: S.CompareRequest, out_dir: Path | None = None,
               progress=lambda frac: None) -> list[dict]:
    from ..harness import compare
    cfg = experiment_from_dict(req.config)
    with tempfile.TemporaryDirectory() as tmp:
        rows = compare(cfg, Path(out_dir or tmp), seed=req.seed,
                       episodes=req.episodes, eval_episodes=req.eval_episodes,
                       include_ablation=req.include_ablation)
    progress(1.0)
    return rows
