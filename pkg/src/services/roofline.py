# src/services/roofline.py
import logging
from typing import List

from src.models.config import ElementPrecision, HardwareSpec
from src.models.cost import Bound, CostEstimate
from src.models.ops import GemmShape, OpDescriptor
from src.services.exceptions import GraphError

logger = logging.getLogger("bertperf.roofline")


def roofline_time(flops: int, bytes_moved: int, precision: ElementPrecision, hw: HardwareSpec):
    """Launch overhead plus max(compute, memory) time, and the binding resource"""
    compute_time = flops / hw.effective_flops(precision)
    memory_time = bytes_moved / hw.effective_bandwidth
    if hw.launch_overhead > compute_time and hw.launch_overhead > memory_time:
        bound = Bound.LATENCY
    elif compute_time > memory_time:
        bound = Bound.COMPUTE
    else:
        bound = Bound.BANDWIDTH
    return hw.launch_overhead + max(compute_time, memory_time), bound


def _estimate(flops: int, bytes_read: int, bytes_written: int, precision: ElementPrecision, hw: HardwareSpec) -> CostEstimate:
    moved = bytes_read + bytes_written
    time, bound = roofline_time(flops, moved, precision, hw)
    return CostEstimate(
        flops=flops,
        bytes_read=bytes_read,
        bytes_written=bytes_written,
        arithmetic_intensity=flops / moved if moved > 0 else 0.0,
        time=time,
        bound=bound,
    )


def gemm_cost(shape: GemmShape, precision: ElementPrecision, hw: HardwareSpec) -> CostEstimate:
    # every operand touches DRAM exactly once; batches share nothing
    if min(shape.m, shape.n, shape.k, shape.batch) < 1:
        raise GraphError(f"Zero-dimension GEMM {shape}")
    bpe = precision.bytes
    flops = 2 * shape.m * shape.n * shape.k * shape.batch
    bytes_read = (shape.m * shape.k + shape.k * shape.n) * shape.batch * bpe
    bytes_written = shape.m * shape.n * shape.batch * bpe
    return _estimate(flops, bytes_read, bytes_written, precision, hw)


def elementwise_cost(op: OpDescriptor, hw: HardwareSpec) -> CostEstimate:
    kind = op.kind
    bpe = op.precision.bytes
    if kind.kind == "elementwise":
        flops = kind.elements * kind.flops_per_element
        bytes_read = kind.elements * (kind.operand_reads + kind.reduction_passes) * bpe
        bytes_written = kind.elements * kind.operand_writes * bpe
    elif kind.kind == "reduction":
        flops = kind.elements * kind.flops_per_element
        bytes_read = kind.elements * kind.passes * bpe
        bytes_written = 0
    else:
        raise GraphError(f"{op.id} is a {kind.kind} op, not elementwise or reduction")
    return _estimate(flops, bytes_read, bytes_written, op.precision, hw)


def op_cost(op: OpDescriptor, hw: HardwareSpec) -> CostEstimate:
    if op.is_collective:
        raise GraphError(f"Collective op {op.id} must be costed by the parallel schedule")
    if op.is_gemm:
        return gemm_cost(op.kind.shape, op.precision, hw)
    return elementwise_cost(op, hw)


def estimate_graph(graph: List[OpDescriptor], hw: HardwareSpec) -> List[CostEstimate]:
    """Cost estimates parallel-indexed to graph"""
    estimates = [op_cost(op, hw) for op in graph]
    logger.debug(f"Costed {len(estimates)} ops, {sum(e.time for e in estimates):.6f}s serial")
    return estimates
