"""Request/response models for the service API and the thin CLI client.

Network cases and experiment configs travel inline as their JSON documents;
binary checkpoints are base64 fields.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class DispatchSnapshot(BaseModel):
    load_p: list[float]
    load_q: list[float]
    res_cap: list[float] = Field(default_factory=list)
    price: float
    grid_cap: float = 5.0
    hour: int = 0


class DispatchRequest(BaseModel):
    network: dict
    snapshot: DispatchSnapshot


class DispatchResponse(BaseModel):
    status: str
    hour: int = 0
    objective: float | None = None
    p_gen: list[float] = Field(default_factory=list)
    p_grid: float = 0.0
    p_flow: list[float] = Field(default_factory=list)
    q_flow: list[float] = Field(default_factory=list)
    v_sq: list[float] = Field(default_factory=list)
    i_sq: list[float] = Field(default_factory=list)
    dlmp: list[float] = Field(default_factory=list)
    q_slack: float = 0.0
    load_p: list[float] = Field(default_factory=list)
    max_soc_gap: float | None = None
    exact: bool | None = None
    flagged_lines: list[int] = Field(default_factory=list)
    solve_info: dict = Field(default_factory=dict)


class CarbonRequest(BaseModel):
    network: dict
    solution: DispatchResponse


class CarbonResponse(BaseModel):
    psi: list[float]
    psi_iterative: list[float]
    max_route_difference: float
    conservation_residual: float


class ValidateRequest(BaseModel):
    config: dict


class CheckResult(BaseModel):
    check: str
    passed: bool
    detail: str = ""


class ValidateResponse(BaseModel):
    passed: bool
    checks: list[CheckResult]


class ProfilesRequest(BaseModel):
    config: dict
    seed: int = 0
    days: int = 1
    which: str = "train"


class ProfilesResponse(BaseModel):
    days: int
    uc: list[list[list[float]]]
    res_cap: list[list[list[float]]]
    adj_max: list[list[list[float]]]
    background: list[list[float]]


class TrainRequest(BaseModel):
    config: dict
    seed: int = 0
    episodes: int | None = None
    algorithm: str | None = None


class EvaluateRequest(BaseModel):
    config: dict
    checkpoint_b64: str
    episodes: int = 100
    seed: int = 0


class EvaluateResponse(BaseModel):
    method: str
    reward: float
    violation_rate: float
    emission: float
    satisfied_fraction: float
    episodes: list[dict] = Field(default_factory=list)


class CompareRequest(BaseModel):
    config: dict
    seed: int = 0
    episodes: int | None = None
    eval_episodes: int = 100
    include_ablation: bool = False


class JobStatus(BaseModel):
    job_id: str
    state: str              # queued | running | done | failed
    kind: str
    progress: float = 0.0
    detail: str = ""
    result: dict | None = None


class TrainResultPayload(BaseModel):
    checkpoint_b64: str
    metrics: list[dict]
    final_reward: float
    final_cost_total: float
    initial_disagreement: float
    final_disagreement: float
