# src/models/config.py

from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_core import PydanticCustomError


class Precision(str, Enum):
    """Training precision mode of a whole iteration"""
    FP32 = "fp32"
    MIXED = "mixed"


class ElementPrecision(str, Enum):
    """Storage precision of one operand stream"""
    FP32 = "fp32"
    FP16 = "fp16"

    @property
    def bytes(self) -> int:
        return 4 if self is ElementPrecision.FP32 else 2


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_layers: int = Field(default=24, ge=1)
    hidden_dim: int = Field(default=1024, ge=1)
    num_heads: int = Field(default=16, ge=1)
    intermediate_dim: int = Field(default=4096, ge=1)
    seq_len: int = Field(default=128, ge=1)
    batch_size: int = Field(default=32, ge=1)
    vocab_size: int = Field(default=30522, ge=1)
    max_positions: int = Field(default=512, ge=1)
    precision: Precision = Precision.FP32

    @field_validator("precision", mode="before")
    @classmethod
    def normalize_precision(cls, v):
        # accept "FP32" / "Mixed" spellings
        return v.lower() if isinstance(v, str) else v

    @model_validator(mode="after")
    def check_shapes(self):
        if self.hidden_dim % self.num_heads != 0:
            raise PydanticCustomError(
                "not_divisible",
                "hidden_dim ({hidden_dim}) is not divisible by num_heads ({num_heads})",
                {"hidden_dim": self.hidden_dim, "num_heads": self.num_heads, "fields": ["hidden_dim", "num_heads"]},
            )
        if self.seq_len > self.max_positions:
            raise PydanticCustomError(
                "too_long",
                "seq_len ({seq_len}) exceeds max_positions ({max_positions})",
                {"seq_len": self.seq_len, "max_positions": self.max_positions, "fields": ["seq_len", "max_positions"]},
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def tokens(self) -> int:
        """n*B, the token count of one (micro-)batch"""
        return self.seq_len * self.batch_size

    @property
    def activation_precision(self) -> ElementPrecision:
        """Operand precision of forward/backward kernels"""
        return ElementPrecision.FP16 if self.precision is Precision.MIXED else ElementPrecision.FP32

    @property
    def optimizer_precision(self) -> ElementPrecision:
        # master weights and optimizer state stay single precision in both modes
        return ElementPrecision.FP32


class HardwareSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    peak_flops_fp32: float = Field(default=23.1e12, gt=0)
    peak_flops_fp16: float = Field(default=184.6e12, gt=0)
    mem_bandwidth: float = Field(default=1.2e12, gt=0)
    launch_overhead: float = Field(default=5e-6, gt=0)
    link_bandwidth: float = Field(default=32e9, gt=0)
    compute_efficiency: float = Field(default=0.85, gt=0, le=1)
    bandwidth_efficiency: float = Field(default=0.80, gt=0, le=1)

    @model_validator(mode="after")
    def check_peaks(self):
        if self.peak_flops_fp16 < self.peak_flops_fp32:
            raise PydanticCustomError(
                "peak_order",
                "peak_flops_fp16 must be at least peak_flops_fp32",
                {"fields": ["peak_flops_fp16", "peak_flops_fp32"]},
            )
        return self

    def peak_flops(self, precision: ElementPrecision) -> float:
        if precision is ElementPrecision.FP16:
            return self.peak_flops_fp16
        return self.peak_flops_fp32

    def effective_flops(self, precision: ElementPrecision) -> float:
        return self.peak_flops(precision) * self.compute_efficiency

    @property
    def effective_bandwidth(self) -> float:
        return self.mem_bandwidth * self.bandwidth_efficiency

    def scaled(self, factor: float) -> "HardwareSpec":
        """Every rate multiplied by factor, launch overhead divided by it"""
        return self.model_copy(update={
            "peak_flops_fp32": self.peak_flops_fp32 * factor,
            "peak_flops_fp16": self.peak_flops_fp16 * factor,
            "mem_bandwidth": self.mem_bandwidth * factor,
            "link_bandwidth": self.link_bandwidth * factor,
            "launch_overhead": self.launch_overhead / factor,
        })


class ParallelismConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    data_degree: int = Field(default=1, ge=1)
    model_degree: int = Field(default=1, ge=1)
    overlap_comm: bool = True
    micro_batches: int = Field(default=1, ge=1)

    @property
    def devices(self) -> int:
        return self.data_degree * self.model_degree


class ParamReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    per_transformer_layer: int
    embeddings: int
    total: int


class ShardedView(BaseModel):
    """What one device of an M-way intra-layer split holds"""
    model_config = ConfigDict(frozen=True)

    model: ModelConfig
    model_degree: int = Field(ge=1)
    heads_per_device: int
    ff_per_device: int
    attn_dim_per_device: int
    lamb_elements_per_layer: int
    lamb_elements_embeddings: int
