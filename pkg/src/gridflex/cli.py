"""Command-line client.

Every subcommand speaks the service's request/response models: by default the
handlers run in-process; with ``--server URL`` the same payloads go over HTTP
to a running ``gridflex serve`` instance. Outputs are written client-side as
CSV/JSON.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click

from .config import ConfigError, bundled_config_path, load_experiment
from .grid import NetworkError


def _load_doc(path: str) -> dict:
    p = Path(path)
    if not p.exists() and not path.endswith(".json"):
        bundled = bundled_config_path(path)
        if bundled.exists():
            p = bundled
    doc = json.loads(p.read_text())
    return _resolve_config_paths(doc, p.parent)


def _resolve_config_paths(doc: dict, base_dir: Path) -> dict:
    """Make file references absolute so the payload survives leaving this cwd."""
    if isinstance(doc.get("network"), str) and not doc["network"].startswith("bundled:"):
        netp = Path(doc["network"])
        if not netp.is_absolute():
            doc["network"] = str((base_dir / netp).resolve())
    files = doc.get("profiles", {}).get("files")
    if isinstance(files, dict):
        doc["profiles"]["files"] = {
            k: str((base_dir / v).resolve()) if not Path(v).is_absolute() else v
            for k, v in files.items()
        }
    return doc


def _post(ctx, path: str, payload) -> dict:
    """Route a request model to the server or the in-process handlers."""
    server = ctx.obj.get("server")
    if server:
        import httpx

        r = httpx.post(server.rstrip("/") + path, json=payload.model_dump(),
                       timeout=3600.0)
        r.raise_for_status()
        return r.json()
    from .service import ops

    local = {
        "/network/validate": ops.validate_op,
        "/dispatch": ops.dispatch_op,
        "/carbon": ops.carbon_op,
        "/profiles/synth": ops.profiles_op,
        "/evaluate": ops.evaluate_op,
    }
    return local[path](payload).model_dump()


@click.group()
@click.option("--server", default="", help="Base URL of a running gridflex service; "
                                           "default runs operations in-process.")
@click.pass_context
def main(ctx, server):
    """Low-carbon demand management toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server.strip() or None


@main.command()
@click.option("--config", "config_path", required=True, help="Experiment config JSON "
              "(path or bundled name like config33).")
@click.pass_context
def validate(ctx, config_path):
    """Run every model/config invariant; exit nonzero on the first failure."""
    from .service import schemas as S

    doc = _load_doc(config_path)
    out = _post(ctx, "/network/validate", S.ValidateRequest(config=doc))
    for check in out["checks"]:
        mark = "PASS" if check["passed"] else "FAIL"
        detail = f"  [{check['detail']}]" if check.get("detail") else ""
        click.echo(f"[{mark}] {check['check']}{detail}")
    if not out["passed"]:
        sys.exit(1)


@main.command("synth-profiles")
@click.option("--config", "config_path", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--days", default=30, show_default=True)
@click.option("--out", "out_dir", default="profiles", show_default=True)
@click.pass_context
def synth_profiles(ctx, config_path, seed, days, out_dir):
    """Generate deterministic synthetic day profiles as CSV files."""
    from .profiles import ProfileSet, DayData, write_profile_files
    from .service import schemas as S
    import numpy as np

    doc = _load_doc(config_path)
    out = _post(ctx, "/profiles/synth",
                S.ProfilesRequest(config=doc, seed=seed, days=days))
    days_data = tuple(
        DayData(p_uc=np.asarray(out["uc"][d]), res_cap=np.asarray(out["res_cap"][d]),
                p_adj_max=np.asarray(out["adj_max"][d]),
                background=np.asarray(out["background"][d])[:, 0]
                if np.asarray(out["background"][d]).ndim > 1
                else np.asarray(out["background"][d]))
        for d in range(out["days"])
    )
    prof = ProfileSet(days=days_data)
    n_agents = days_data[0].p_uc.shape[1]
    n_res = days_data[0].res_cap.shape[1]
    paths = write_profile_files(Path(out_dir), prof, seed, n_agents, n_res)
    for k, p in paths.items():
        click.echo(f"wrote {p}")


@main.command()
@click.option("--network", "network_path", required=True, help="Network case JSON "
              "(path or bundled name like case33).")
@click.option("--snapshot", "snapshot_path", required=True,
              help="JSON with load_p, load_q, res_cap, price, grid_cap, hour.")
@click.option("--out", "out_dir", default="dispatch_out", show_default=True)
@click.pass_context
def dispatch(ctx, network_path, snapshot_path, out_dir):
    """Solve one operator dispatch; write solution + DLMP + cone gaps."""
    from .service import schemas as S

    net_doc = _load_doc(network_path)
    snap = json.loads(Path(snapshot_path).read_text())
    out = _post(ctx, "/dispatch", S.DispatchRequest(
        network=net_doc, snapshot=S.DispatchSnapshot(**snap)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "solution.json").write_text(json.dumps(out, indent=1))
    if out["status"] != "optimal":
        click.echo(f"dispatch status: {out['status']}")
        sys.exit(2)
    with (out_dir / "solution.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bus", "dlmp", "v_sq", "load_p"])
        for n, (price, v) in enumerate(zip(out["dlmp"], out["v_sq"])):
            w.writerow([n, repr(price), repr(v), repr(out["load_p"][n])])
    with (out_dir / "flows.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["line", "p_flow_mw", "q_flow_mvar", "i_sq", "flagged"])
        flagged = set(out["flagged_lines"])
        for k, (p, q, i) in enumerate(zip(out["p_flow"], out["q_flow"], out["i_sq"])):
            w.writerow([k, repr(p), repr(q), repr(i), int(k in flagged)])
    click.echo(f"objective: {out['objective']:.4f} $  max cone gap: {out['max_soc_gap']:.2e}"
               f"  exact: {out['exact']}")


@main.command()
@click.option("--network", "network_path", required=True)
@click.option("--solution", "solution_path", required=True,
              help="solution.json produced by the dispatch subcommand.")
@click.option("--out", "out_path", default="carbon.csv", show_default=True)
@click.pass_context
def carbon(ctx, network_path, solution_path, out_path):
    """Nodal carbon intensities for a dispatch solution."""
    from .service import schemas as S

    net_doc = _load_doc(network_path)
    sol = json.loads(Path(solution_path).read_text())
    out = _post(ctx, "/carbon", S.CarbonRequest(
        network=net_doc, solution=S.DispatchResponse(**sol)))
    with Path(out_path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bus", "psi_tco2_per_mwh"])
        for n, psi in enumerate(out["psi"]):
            w.writerow([n, repr(psi)])
    click.echo(f"wrote {out_path}; route agreement {out['max_route_difference']:.2e}, "
               f"conservation residual {out['conservation_residual']:.2e}")


@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="train_out", show_default=True)
@click.option("--episodes", default=None, type=int, help="Override the config budget.")
@click.option("--algorithm", default=None,
              type=click.Choice(["cmacpo", "macpo", "centralized_cpo", "ppo_penalty"]))
@click.option("--log-every", default=10, show_default=True)
@click.pass_context
def train(ctx, config_path, seed, out_dir, episodes, algorithm, log_every):
    """Train the selected algorithm; writes metrics CSV and a checkpoint."""
    doc = _load_doc(config_path)
    out_dir = Path(out_dir)
    if ctx.obj.get("server"):
        from .service import schemas as S
        import httpx

        server = ctx.obj["server"].rstrip("/")
        job = httpx.post(server + "/train", json=S.TrainRequest(
            config=doc, seed=seed, episodes=episodes, algorithm=algorithm
        ).model_dump(), timeout=60.0).json()
        result = _poll_job(server, job["job_id"])
        out_dir.mkdir(parents=True, exist_ok=True)
        import base64
        (out_dir / "checkpoint.bin").write_bytes(
            base64.b64decode(result["checkpoint_b64"]))
        _write_rows(out_dir / "metrics.csv", result["metrics"])
        click.echo(f"final reward {result['final_reward']:.2f}, "
                   f"cost {result['final_cost_total']:.3f}")
        return
    from .config import experiment_from_dict
    from .harness import build_runtime, train_once

    cfg = experiment_from_dict(doc)
    rt = build_runtime(cfg)
    res = train_once(rt, seed, out_dir, algorithm, episodes, log_every=log_every)
    last = res.metrics[-1]
    click.echo(f"final reward {last['reward']:.2f}; checkpoint at {res.checkpoint_path}")


@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--episodes", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default="evaluation.csv", show_default=True)
@click.option("--traces", "trace_dir", default=None,
              help="Directory for per-episode JSON-lines traces (local mode).")
@click.pass_context
def evaluate(ctx, config_path, checkpoint_path, episodes, seed, out_path, trace_dir):
    """Greedy rollout of a checkpoint over held-out days; one table row."""
    import base64
    from .service import schemas as S

    doc = _load_doc(config_path)
    if trace_dir and not ctx.obj.get("server"):
        from .config import experiment_from_dict
        from .harness import build_runtime, evaluate_checkpoint

        rt = build_runtime(experiment_from_dict(doc))
        row, _ = evaluate_checkpoint(rt, Path(checkpoint_path), episodes=episodes,
                                     seed=seed, trace_dir=Path(trace_dir))
        _write_rows(Path(out_path), [row])
        click.echo(json.dumps(row, indent=1))
        return
    payload = S.EvaluateRequest(
        config=doc,
        checkpoint_b64=base64.b64encode(Path(checkpoint_path).read_bytes()).decode(),
        episodes=episodes,
        seed=seed,
    )
    out = _post(ctx, "/evaluate", payload)
    row = {k: out[k] for k in ("method", "reward", "violation_rate", "emission",
                               "satisfied_fraction")}
    _write_rows(Path(out_path), [row])
    click.echo(json.dumps(row, indent=1))


@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--out", "out_dir", default="compare_out", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--episodes", default=None, type=int)
@click.option("--eval-episodes", default=100, show_default=True)
@click.option("--include-ablation", is_flag=True,
              help="Add the no-flexibility row to the comparison table.")
@click.pass_context
def compare(ctx, config_path, out_dir, seed, episodes, eval_episodes, include_ablation):
    """Train all four algorithms on identical data; combined table + curves."""
    doc = _load_doc(config_path)
    if ctx.obj.get("server"):
        from .service import schemas as S
        import httpx

        server = ctx.obj["server"].rstrip("/")
        job = httpx.post(server + "/compare", json=S.CompareRequest(
            config=doc, seed=seed, episodes=episodes, eval_episodes=eval_episodes,
            include_ablation=include_ablation).model_dump(), timeout=60.0).json()
        result = _poll_job(server, job["job_id"])
        rows = result["rows"]
    else:
        from .config import experiment_from_dict
        from .harness import compare as compare_local

        cfg = experiment_from_dict(doc)
        rows = compare_local(cfg, Path(out_dir), seed=seed, episodes=episodes,
                             eval_episodes=eval_episodes,
                             include_ablation=include_ablation)
    for r in rows:
        click.echo(f"{r['method']:16s} reward={r['reward']:10.2f} "
                   f"violation={r['violation_rate']:6.2f}% "
                   f"emission={r['emission']:.3f} t")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("gridflex.service.app:app", host=host, port=port)


def _poll_job(server: str, job_id: str) -> dict:
    import httpx

    while True:
        status = httpx.get(f"{server}/jobs/{job_id}", timeout=60.0).json()
        if status["state"] == "done":
            return status["result"]
        if status["state"] == "failed":
            raise click.ClickException(f"job failed: {status['detail']}")
        time.sleep(1.0)


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})


if __name__ == "__main__":
    main()
