# src/models/ops.py

from enum import Enum
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.config import ElementPrecision


class Phase(str, Enum):
    FORWARD = "Forward"
    BACKWARD_ACT_GRAD = "BackwardActGrad"
    BACKWARD_WEIGHT_GRAD = "BackwardWeightGrad"
    UPDATE = "Update"
    COMMUNICATION = "Communication"

    @property
    def is_backward(self) -> bool:
        return self in (Phase.BACKWARD_ACT_GRAD, Phase.BACKWARD_WEIGHT_GRAD)


class Category(str, Enum):
    LINEAR_TRANSFORM_GEMM = "LinearTransformGEMM"
    ATTENTION_BGEMM = "AttentionBGEMM"
    FC_GEMM = "FCGEMM"
    ATTN_SCALE_MASK_SOFTMAX_DROPOUT = "AttnScaleMaskSoftmaxDropout"
    GELU = "GeLU"
    DROP_RESIDUAL_LAYERNORM = "DropResidualLayerNorm"
    EMBEDDING = "Embedding"
    OUTPUT_LAYER = "OutputLayer"
    LAMB_STAGE1 = "LambStage1"
    LAMB_STAGE2 = "LambStage2"
    GLOBAL_GRAD_NORM = "GlobalGradNorm"
    ALL_REDUCE = "AllReduce"
    GRAD_ACCUMULATE = "GradAccumulate"


GEMM_CATEGORIES = frozenset({
    Category.LINEAR_TRANSFORM_GEMM,
    Category.ATTENTION_BGEMM,
    Category.FC_GEMM,
})

LAMB_CATEGORIES = frozenset({
    Category.LAMB_STAGE1,
    Category.LAMB_STAGE2,
    Category.GLOBAL_GRAD_NORM,
})

# attention head ops, dropout+residual+LayerNorm and GeLU
FUSABLE_CATEGORIES = frozenset({
    Category.ATTN_SCALE_MASK_SOFTMAX_DROPOUT,
    Category.DROP_RESIDUAL_LAYERNORM,
    Category.GELU,
})


class GemmLayer(str, Enum):
    """Row of the GEMM size table"""
    LINEAR_TRANS = "LinearTrans"
    ATTN_SCORE = "AttnScore"
    ATTN_OUTPUT = "AttnOutput"
    FC1 = "FC1"
    FC2 = "FC2"


class GemmPass(str, Enum):
    FWD = "FWD"
    BWD_ACT_GRAD = "BwdActGrad"
    BWD_WT_GRAD = "BwdWtGrad"

    @property
    def phase(self) -> Phase:
        return {
            GemmPass.FWD: Phase.FORWARD,
            GemmPass.BWD_ACT_GRAD: Phase.BACKWARD_ACT_GRAD,
            GemmPass.BWD_WT_GRAD: Phase.BACKWARD_WEIGHT_GRAD,
        }[self]


class GemmShape(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    m: int = Field(ge=1)
    n: int = Field(ge=1)
    k: int = Field(ge=1)
    batch: int = Field(default=1, ge=1)
    trans_a: bool = False
    trans_b: bool = False

    def label(self) -> str:
        # "M, N, K, transposeA, transposeB"
        return f"{self.m}x{self.n}x{self.k}{'T' if self.trans_a else 'N'}{'T' if self.trans_b else 'N'}"


class GemmKind(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["gemm"] = "gemm"
    shape: GemmShape


class ElementwiseKind(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["elementwise"] = "elementwise"
    elements: int = Field(ge=0)
    flops_per_element: int = Field(ge=0)
    operand_reads: int = Field(ge=0)
    operand_writes: int = Field(ge=0)
    reduction_passes: int = Field(default=0, ge=0)


class ReductionKind(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["reduction"] = "reduction"
    elements: int = Field(ge=0)
    passes: int = Field(default=1, ge=1)
    flops_per_element: int = Field(default=2, ge=0)


class CollectiveKind(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["collective"] = "collective"
    payload_bytes: int = Field(gt=0)


OpKind = Annotated[
    Union[GemmKind, ElementwiseKind, ReductionKind, CollectiveKind],
    Field(discriminator="kind"),
]

_ADMISSIBLE_KINDS = {
    Category.LINEAR_TRANSFORM_GEMM: ("gemm",),
    Category.ATTENTION_BGEMM: ("gemm",),
    Category.FC_GEMM: ("gemm",),
    Category.ATTN_SCALE_MASK_SOFTMAX_DROPOUT: ("elementwise",),
    Category.GELU: ("elementwise",),
    Category.DROP_RESIDUAL_LAYERNORM: ("elementwise",),
    Category.EMBEDDING: ("elementwise",),
    Category.OUTPUT_LAYER: ("elementwise",),
    Category.LAMB_STAGE1: ("elementwise",),
    Category.LAMB_STAGE2: ("elementwise",),
    Category.GLOBAL_GRAD_NORM: ("reduction",),
    Category.ALL_REDUCE: ("collective",),
    Category.GRAD_ACCUMULATE: ("elementwise",),
}


class OpDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    layer_index: Optional[int] = None
    phase: Phase
    category: Category
    site: str
    kind: OpKind
    precision: ElementPrecision
    micro_batch: int = Field(default=0, ge=0)
    gemm_layer: Optional[GemmLayer] = None
    gemm_pass: Optional[GemmPass] = None

    @model_validator(mode="after")
    def check_kind(self):
        allowed = _ADMISSIBLE_KINDS[self.category]
        if self.kind.kind not in allowed:
            raise ValueError(f"{self.category.value} ops must be {allowed[0]}, got {self.kind.kind}")
        return self

    @property
    def is_gemm(self) -> bool:
        return self.kind.kind == "gemm"

    @property
    def is_collective(self) -> bool:
        return self.kind.kind == "collective"
