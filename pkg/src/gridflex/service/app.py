"""FastAPI application wrapping the core package.

Stateless operations respond inline; training and comparison run as
background jobs polled through /jobs/{job_id}.
"""

from __future__ import annotations

import threading
import uuid

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError
from ..dispatch import DispatchError
from ..grid import NetworkError
from . import ops
from . import schemas as S

app = FastAPI(
    title="gridflex",
    version=__version__,
    description="Dispatch, carbon attribution and safe multi-agent load "
                "scheduling for radial distribution networks.",
)

_jobs: dict[str, S.JobStatus] = {}
_results: dict[str, dict] = {}
_lock = threading.Lock()


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/network/validate", response_model=S.ValidateResponse)
def validate(req: S.ValidateRequest):
    return ops.validate_op(req)


@app.post("/dispatch", response_model=S.DispatchResponse)
def dispatch(req: S.DispatchRequest):
    try:
        return ops.dispatch_op(req)
    except (NetworkError, DispatchError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))


@app.post("/carbon", response_model=S.CarbonResponse)
def carbon(req: S.CarbonRequest):
    try:
        return ops.carbon_op(req)
    except (NetworkError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))


@app.post("/profiles/synth", response_model=S.ProfilesResponse)
def profiles(req: S.ProfilesRequest):
    try:
        return ops.profiles_op(req)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc))


@app.post("/evaluate", response_model=S.EvaluateResponse)
def evaluate(req: S.EvaluateRequest):
    try:
        return ops.evaluate_op(req)
    except (ConfigError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))


def _spawn(kind: str, target) -> S.JobStatus:
    job_id = uuid.uuid4().hex[:12]
    status = S.JobStatus(job_id=job_id, state="queued", kind=kind)
    with _lock:
        _jobs[job_id] = status

    def progress(frac: float):
        with _lock:
            _jobs[job_id].progress = float(frac)

    def run():
        with _lock:
            _jobs[job_id].state = "running"
        try:
            result = target(progress)
            with _lock:
                _results[job_id] = result
                _jobs[job_id].state = "done"
                _jobs[job_id].progress = 1.0
        except Exception as exc:
            with _lock:
                _jobs[job_id].state = "failed"
                _jobs[job_id].detail = str(exc)

    threading.Thread(target=run, daemon=True).start()
    return status


@app.post("/train", response_model=S.JobStatus)
def train(req: S.TrainRequest):
    return _spawn("train", lambda cb: ops.train_op(req, progress=cb).model_dump())


@app.post("/compare", response_model=S.JobStatus)
def compare(req: S.CompareRequest):
    return _spawn("compare", lambda cb: {"rows": ops.compare_op(req, progress=cb)})


@app.get("/jobs/{job_id}", response_model=S.JobStatus)
def job_status(job_id: str):
    with _lock:
        if job_id not in _jobs:
            raise HTTPException(status_code=404, detail="unknown job")
        status = _jobs[job_id].model_copy()
        if status.state == "done":
            status.result = _results.get(job_id)
    return status
