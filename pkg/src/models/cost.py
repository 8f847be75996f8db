# src/models/cost.py

from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from src.models.ops import Category, OpDescriptor


class Bound(str, Enum):
    COMPUTE = "Compute"
    BANDWIDTH = "Bandwidth"
    LATENCY = "Latency"


class CostEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    flops: int = Field(ge=0)
    bytes_read: int = Field(ge=0)
    bytes_written: int = Field(ge=0)
    arithmetic_intensity: float = Field(ge=0)
    time: float = Field(ge=0)
    bound: Bound

    @property
    def bytes_total(self) -> int:
        return self.bytes_read + self.bytes_written


class Collective(str, Enum):
    ALL_REDUCE = "AllReduce"


class CommEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    payload_bytes: int = Field(gt=0)
    collective: Collective = Collective.ALL_REDUCE
    overlappable: bool
    anchor_layer: int = Field(ge=0)
    devices: int = Field(ge=1)
    # bytes each device sends under the ring algorithm
    wire_bytes: float = Field(ge=0)
    label: str = ""


class ScheduleEntry(BaseModel):
    """One costed step of a schedule: a compute op or a communication event"""
    model_config = ConfigDict(frozen=True)

    name: str
    category: Category
    layer_index: Optional[int] = None
    duration: float = Field(ge=0)
    exposed: float = Field(ge=0)
    op: Optional[OpDescriptor] = None
    estimate: Optional[CostEstimate] = None
    comm: Optional[CommEvent] = None

    @property
    def overlapped(self) -> bool:
        return self.exposed < self.duration


class ScheduledGraph(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: List[ScheduleEntry] = Field(default_factory=list)
    total_time: float = 0.0
    data_degree: int = 1
    model_degree: int = 1
    micro_batches: int = 1
    per_device_batch: int = 0

    @property
    def compute_entries(self) -> List[ScheduleEntry]:
        return [e for e in self.entries if e.op is not None]

    @property
    def comm_entries(self) -> List[ScheduleEntry]:
        return [e for e in self.entries if e.comm is not None]

    @property
    def compute_time(self) -> float:
        return sum(e.duration for e in self.compute_entries)

    @property
    def exposed_comm_time(self) -> float:
        return sum(e.exposed for e in self.comm_entries)

    @property
    def ops(self) -> List[OpDescriptor]:
        return [e.op for e in self.compute_entries]

    @property
    def estimates(self) -> List[CostEstimate]:
        return [e.estimate for e in self.compute_entries]


class CostTotals(BaseModel):
    model_config = ConfigDict(frozen=True)

    flops: int = 0
    bytes: int = 0
    time: float = 0.0
    kernels: int = 0


class DeltaReport(BaseModel):
    """Variant minus baseline"""
    model_config = ConfigDict(frozen=True)

    baseline_label: str = "baseline"
    variant_label: str = "variant"
    baseline: CostTotals
    variant: CostTotals
    delta: CostTotals
    per_category: Dict[Category, CostTotals] = Field(default_factory=dict)
