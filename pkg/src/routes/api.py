# src/routes/api.py

from dotenv import load_dotenv
load_dotenv()

from typing import List, Optional, Union

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, ConfigDict, Field

from src.config.logging_config import setup_logging
from src.models.config import HardwareSpec, ModelConfig, ParallelismConfig
from src.models.cost import DeltaReport
from src.models.report import IterationBreakdown, SweepRow
from src.services.config_io import param_count, preset, preset_names, validate_parallelism
from src.services.exceptions import BertPerfError, ConfigError
from src.services.opgraph import Granularity, build_iteration, dump_record
from src.services.report import analyze as analyze_iteration, sweep as run_sweep
from src.services.whatif import apply_transform, compare

logger = setup_logging()

app = FastAPI(title="bertperf")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class ConfigDocument(BaseModel):
    """Same sections as a config file; missing sections take their defaults"""
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    hardware: HardwareSpec = Field(default_factory=HardwareSpec)
    parallelism: ParallelismConfig = Field(default_factory=ParallelismConfig)


class AnalyzeRequest(ConfigDocument):
    granularity: Granularity = Granularity.GROUPED


class SweepRequest(ConfigDocument):
    axis: str
    values: List[Union[int, str]] = Field(min_length=1)
    workers: int = Field(default=1, ge=1, le=32)


class WhatIfRequest(ConfigDocument):
    transform: str


class PresetInfo(BaseModel):
    name: str
    model: ModelConfig
    parameters: int


def _raise_http(e: BertPerfError):
    if isinstance(e, ConfigError):
        raise HTTPException(status_code=422, detail={"message": str(e), "keys": e.keys})
    raise HTTPException(status_code=400, detail=str(e))


@app.get("/health")
async def health():
    return {"status": "ok"}


@app.get("/presets", response_model=List[PresetInfo])
async def list_presets():
    return [
        PresetInfo(name=name, model=preset(name), parameters=param_count(preset(name)).total)
        for name in preset_names()
    ]


@app.post("/analyze", response_model=IterationBreakdown)
def analyze(request: AnalyzeRequest):
    try:
        validate_parallelism(request.model, request.parallelism)
        return analyze_iteration(request.model, request.hardware, request.parallelism, request.granularity)
    except BertPerfError as e:
        logger.warning(f"Analyze rejected: {e}")
        _raise_http(e)


@app.post("/sweep", response_model=List[SweepRow])
def sweep(request: SweepRequest):
    try:
        return run_sweep(request.axis, request.values, request.model, request.hardware,
                         request.parallelism, workers=request.workers)
    except BertPerfError as e:
        logger.warning(f"Sweep rejected: {e}")
        _raise_http(e)


@app.post("/whatif", response_model=DeltaReport)
def whatif(request: WhatIfRequest):
    try:
        validate_parallelism(request.model, request.parallelism)
        baseline, variant = apply_transform(request.model, request.transform, request.parallelism.model_degree)
        return compare(baseline, variant, request.hardware, variant_label=request.transform)
    except BertPerfError as e:
        logger.warning(f"What-if rejected: {e}")
        _raise_http(e)


@app.get("/graph/{preset_name}")
def graph(preset_name: str, granularity: Granularity = Granularity.GROUPED, model_degree: int = 1,
          limit: Optional[int] = None):
    try:
        ops = build_iteration(preset(preset_name), granularity, model_degree)
    except ConfigError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except BertPerfError as e:
        _raise_http(e)
    records = [dump_record(op) for op in ops]
    return {"preset": preset_name, "count": len(records), "ops": records[:limit] if limit else records}
