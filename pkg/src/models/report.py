# src/models/report.py

from enum import Enum
from typing import Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from src.models.ops import Category


class CategoryGroup(str, Enum):
    TRANSFORMER = "Transformer"
    EMBEDDING = "Embedding"
    OUTPUT_LAYER = "OutputLayer"
    LAMB_UPDATE = "LambUpdate"
    COMMUNICATION = "Communication"
    GRAD_ACCUMULATE = "GradAccumulate"


# forward and backward of a layer count together; the update is shown on its own
CATEGORY_GROUPS: Dict[Category, CategoryGroup] = {
    Category.LINEAR_TRANSFORM_GEMM: CategoryGroup.TRANSFORMER,
    Category.ATTENTION_BGEMM: CategoryGroup.TRANSFORMER,
    Category.ATTN_SCALE_MASK_SOFTMAX_DROPOUT: CategoryGroup.TRANSFORMER,
    Category.FC_GEMM: CategoryGroup.TRANSFORMER,
    Category.GELU: CategoryGroup.TRANSFORMER,
    Category.DROP_RESIDUAL_LAYERNORM: CategoryGroup.TRANSFORMER,
    Category.EMBEDDING: CategoryGroup.EMBEDDING,
    Category.OUTPUT_LAYER: CategoryGroup.OUTPUT_LAYER,
    Category.LAMB_STAGE1: CategoryGroup.LAMB_UPDATE,
    Category.LAMB_STAGE2: CategoryGroup.LAMB_UPDATE,
    Category.GLOBAL_GRAD_NORM: CategoryGroup.LAMB_UPDATE,
    Category.ALL_REDUCE: CategoryGroup.COMMUNICATION,
    Category.GRAD_ACCUMULATE: CategoryGroup.GRAD_ACCUMULATE,
}

# columns of a sweep table, in order
CONFIG_AXES = (
    "batch_size",
    "seq_len",
    "hidden_dim",
    "num_layers",
    "model_degree",
    "data_degree",
    "precision",
)


class Share(BaseModel):
    model_config = ConfigDict(frozen=True)

    time: float = Field(ge=0)
    fraction: float = Field(ge=0)


class IterationBreakdown(BaseModel):
    """Where one training iteration's time goes, by category group"""
    model_config = ConfigDict(frozen=True)

    total_time: float = 0.0
    groups: Dict[CategoryGroup, Share] = Field(default_factory=dict)
    categories: Dict[Category, Share] = Field(default_factory=dict)
    config: Dict[str, Union[int, str]] = Field(default_factory=dict)
    sequences_per_second: float = 0.0
    devices: int = 1

    def fraction(self, group: CategoryGroup) -> float:
        share = self.groups.get(group)
        return share.fraction if share else 0.0

    def within_group(self, group: CategoryGroup) -> Dict[Category, float]:
        """Each category's share of its group's time"""
        group_time = self.groups[group].time if group in self.groups else 0.0
        if group_time == 0:
            return {}
        return {
            cat: share.time / group_time
            for cat, share in self.categories.items()
            if CATEGORY_GROUPS[cat] is group
        }


class SweepRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    axis: str
    value: Union[int, str]
    breakdown: Optional[IterationBreakdown] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None
