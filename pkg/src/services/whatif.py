# src/services/whatif.py
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from src.models.config import HardwareSpec, ModelConfig
from src.models.cost import CostTotals, DeltaReport
from src.models.ops import (
    FUSABLE_CATEGORIES,
    Category,
    ElementwiseKind,
    GemmKind,
    GemmLayer,
    GemmPass,
    GemmShape,
    OpDescriptor,
    Phase,
)
from src.services.config_io import embedding_param_count, layer_param_count
from src.services.exceptions import ConfigError, FusionError
from src.services.opgraph import (
    QKV_SITES,
    Granularity,
    build_forward_backward,
    build_iteration,
    build_update,
    partitioned_count,
)
from src.services.roofline import estimate_graph

logger = logging.getLogger("bertperf.whatif")

FLOPS_GRAD_ACCUMULATE = 2  # scale + add


def _resolve(graph: List[OpDescriptor], group: Sequence[Union[str, OpDescriptor]]) -> List[int]:
    positions = {op.id: idx for idx, op in enumerate(graph)}
    indices = []
    for item in group:
        op_id = item.id if isinstance(item, OpDescriptor) else item
        if op_id not in positions:
            raise FusionError(f"Op {op_id} is not in the graph")
        indices.append(positions[op_id])
    return indices


def _check_chain(ops: List[OpDescriptor], indices: List[int]) -> None:
    first = ops[0]
    if indices != list(range(indices[0], indices[0] + len(indices))):
        raise FusionError("Fusion group must be contiguous in graph order")
    for op in ops:
        if op.kind.kind != "elementwise":
            raise FusionError(f"{op.id} is not an elementwise op")
        if op.layer_index != first.layer_index:
            raise FusionError(
                f"{op.id} belongs to layer {op.layer_index}, not {first.layer_index}; "
                f"ops of different layers share no data"
            )
        if op.category not in FUSABLE_CATEGORIES:
            raise FusionError(f"{op.category.value} ops are not a producer-consumer chain")
        if (op.phase, op.micro_batch, op.site, op.category) != (first.phase, first.micro_batch, first.site, first.category):
            raise FusionError(f"{op.id} is not in the same site as {first.id}")
        if op.kind.elements != first.kind.elements or op.precision is not first.precision:
            raise FusionError(f"{op.id} does not consume {first.id}'s output shape")
    for op in ops[1:]:
        if op.kind.operand_reads < 1:
            raise FusionError(f"{op.id} reads nothing from its producer")


def fuse_ops(ops: List[OpDescriptor]) -> OpDescriptor:
    """One kernel doing the whole chain; intermediates stay on chip"""
    first, last = ops[0], ops[-1]
    kind = ElementwiseKind(
        elements=first.kind.elements,
        flops_per_element=sum(op.kind.flops_per_element for op in ops),
        # each consumer's read of its producer's output disappears
        operand_reads=first.kind.operand_reads + sum(op.kind.operand_reads - 1 for op in ops[1:]),
        operand_writes=last.kind.operand_writes,
        reduction_passes=sum(op.kind.reduction_passes for op in ops),
    )
    suffix = "+".join(op.id.rsplit(".", 1)[-1] for op in ops[1:])
    return first.model_copy(update={"id": f"{first.id}+{suffix}", "kind": kind})


def fuse_elementwise(graph: List[OpDescriptor], group: Sequence[Union[str, OpDescriptor]]) -> List[OpDescriptor]:
    """Replace a contiguous producer-consumer chain of elementwise ops with one op"""
    if len(group) <= 1:
        return list(graph)
    indices = _resolve(graph, group)
    ops = [graph[i] for i in indices]
    _check_chain(ops, indices)
    fused = fuse_ops(ops)
    return graph[:indices[0]] + [fused] + graph[indices[-1] + 1:]


def _site_key(op: OpDescriptor) -> Optional[Tuple]:
    if op.kind.kind != "elementwise" or op.category not in FUSABLE_CATEGORIES:
        return None
    return (op.micro_batch, op.layer_index, op.phase, op.site)


def fuse_all_elementwise(graph: List[OpDescriptor]) -> List[OpDescriptor]:
    """Fuse every maximal chain of the attention, GeLU and dropout+residual+LN sites"""
    result: List[OpDescriptor] = []
    run: List[OpDescriptor] = []
    fused_chains = 0

    def flush():
        nonlocal fused_chains
        if len(run) > 1:
            result.append(fuse_ops(run))
            fused_chains += 1
        else:
            result.extend(run)
        run.clear()

    for op in graph:
        key = _site_key(op)
        if key is not None and run and _site_key(run[-1]) == key:
            run.append(op)
            continue
        flush()
        if key is not None:
            run.append(op)
        else:
            result.append(op)
    flush()
    logger.debug(f"Fused {fused_chains} elementwise chains")
    return result


def _fused_qkv_shape(shapes: List[GemmShape], gemm_pass: GemmPass) -> GemmShape:
    first = shapes[0]
    # FWD stacks the three weights along M, act-grad along K, weight-grad along N
    if gemm_pass is GemmPass.BWD_WT_GRAD:
        if any((s.m, s.k, s.batch) != (first.m, first.k, first.batch) for s in shapes):
            raise FusionError("Q/K/V weight-gradient GEMMs do not share their input activation")
        return first.model_copy(update={"n": sum(s.n for s in shapes)})
    if gemm_pass is GemmPass.BWD_ACT_GRAD:
        if any((s.m, s.n, s.batch) != (first.m, first.n, first.batch) for s in shapes):
            raise FusionError("Q/K/V activation-gradient GEMMs do not share M and N")
        return first.model_copy(update={"k": sum(s.k for s in shapes)})
    if any((s.n, s.k, s.batch) != (first.n, first.k, first.batch) for s in shapes):
        raise FusionError("Q/K/V GEMMs do not share their input operand")
    return first.model_copy(update={"m": sum(s.m for s in shapes)})


def fuse_linear_gemms(graph: List[OpDescriptor]) -> List[OpDescriptor]:
    """Merge each layer's Q, K and V projection GEMMs into one per pass"""
    if any(op.site == "qkv" for op in graph):
        raise FusionError("Graph already has fused Q/K/V GEMMs")

    groups: Dict[Tuple, List[OpDescriptor]] = defaultdict(list)
    for op in graph:
        if op.is_gemm and op.site in QKV_SITES:
            groups[(op.micro_batch, op.layer_index, op.gemm_pass)].append(op)

    fused_ops: Dict[Tuple, OpDescriptor] = {}
    for key, ops in groups.items():
        if sorted(op.site for op in ops) != sorted(QKV_SITES):
            raise FusionError(f"Layer {key[1]} {key[2].value} does not have exactly one Q, K and V GEMM")
        gemm_pass = key[2]
        query = next(op for op in ops if op.site == "query")
        shape = _fused_qkv_shape([op.kind.shape for op in ops], gemm_pass)
        fused_ops[key] = query.model_copy(update={
            "id": query.id.replace(".query.", ".qkv."),
            "site": "qkv",
            "kind": GemmKind(shape=shape),
            "gemm_layer": GemmLayer.LINEAR_TRANS,
        })

    result = []
    emitted = set()
    for op in graph:
        if op.is_gemm and op.site in QKV_SITES:
            key = (op.micro_batch, op.layer_index, op.gemm_pass)
            if key not in emitted:
                result.append(fused_ops[key])
                emitted.add(key)
            continue
        result.append(op)
    logger.debug(f"Fused {len(fused_ops)} Q/K/V GEMM triples")
    return result


def grad_accumulate_op(cfg: ModelConfig, micro_batch: int, model_degree: int = 1) -> OpDescriptor:
    params = (
        cfg.num_layers * partitioned_count(layer_param_count(cfg.hidden_dim, cfg.intermediate_dim), model_degree)
        + partitioned_count(embedding_param_count(cfg), model_degree)
    )
    return OpDescriptor(
        id=f"mb{micro_batch}.G.grad_accumulate.UPD",
        layer_index=None,
        phase=Phase.UPDATE,
        category=Category.GRAD_ACCUMULATE,
        site="grad_accumulate",
        # reads the gradient and the accumulator, writes the accumulator
        kind=ElementwiseKind(elements=params, flops_per_element=FLOPS_GRAD_ACCUMULATE,
                             operand_reads=2, operand_writes=1),
        precision=cfg.optimizer_precision,
        micro_batch=micro_batch,
    )


def apply_microbatching(
    cfg: ModelConfig,
    micro_batches: int,
    granularity: Granularity = Granularity.GROUPED,
    model_degree: int = 1,
) -> List[OpDescriptor]:
    """k forward/backward passes at B/k, gradient accumulation, one LAMB update"""
    if micro_batches < 1 or cfg.batch_size % micro_batches != 0:
        raise ConfigError(
            f"batch_size ({cfg.batch_size}) is not divisible by micro_batches ({micro_batches})",
            keys=["model.batch_size", "parallelism.micro_batches"],
        )
    if micro_batches == 1:
        return build_iteration(cfg, granularity, model_degree)

    micro_cfg = cfg.model_copy(update={"batch_size": cfg.batch_size // micro_batches})
    graph: List[OpDescriptor] = []
    for j in range(micro_batches):
        graph.extend(build_forward_backward(micro_cfg, granularity, model_degree, micro_batch=j))
        graph.append(grad_accumulate_op(cfg, j, model_degree))
    graph.extend(build_update(cfg, model_degree))
    return graph


def graph_totals(graph: Iterable[OpDescriptor], hw: HardwareSpec) -> Tuple[CostTotals, Dict[Category, CostTotals]]:
    compute_ops = [op for op in graph if not op.is_collective]
    estimates = estimate_graph(compute_ops, hw)
    per_category: Dict[Category, Dict[str, float]] = defaultdict(lambda: {"flops": 0, "bytes": 0, "time": 0.0, "kernels": 0})
    for op, est in zip(compute_ops, estimates):
        bucket = per_category[op.category]
        bucket["flops"] += est.flops
        bucket["bytes"] += est.bytes_total
        bucket["time"] += est.time
        bucket["kernels"] += 1
    totals = CostTotals(
        flops=sum(e.flops for e in estimates),
        bytes=sum(e.bytes_total for e in estimates),
        time=sum(e.time for e in estimates),
        kernels=len(compute_ops),
    )
    return totals, {cat: CostTotals(**vals) for cat, vals in per_category.items()}


def _minus(a: CostTotals, b: CostTotals) -> CostTotals:
    return CostTotals(flops=a.flops - b.flops, bytes=a.bytes - b.bytes, time=a.time - b.time, kernels=a.kernels - b.kernels)


def compare(
    graph_a: List[OpDescriptor],
    graph_b: List[OpDescriptor],
    hw: HardwareSpec,
    baseline_label: str = "baseline",
    variant_label: str = "variant",
) -> DeltaReport:
    """graph_b minus graph_a, serial single-device costs"""
    base, base_cats = graph_totals(graph_a, hw)
    var, var_cats = graph_totals(graph_b, hw)
    empty = CostTotals()
    per_category = {
        cat: _minus(var_cats.get(cat, empty), base_cats.get(cat, empty))
        for cat in Category
        if cat in base_cats or cat in var_cats
    }
    return DeltaReport(
        baseline_label=baseline_label,
        variant_label=variant_label,
        baseline=base,
        variant=var,
        delta=_minus(var, base),
        per_category=per_category,
    )


def apply_transform(
    cfg: ModelConfig,
    transform: str,
    model_degree: int = 1,
) -> Tuple[List[OpDescriptor], List[OpDescriptor]]:
    """
    Baseline and variant graphs for a named transform:
    fuse-linear, fuse-elementwise, fuse-all or microbatch:k.
    """
    if transform == "fuse-linear":
        baseline = build_iteration(cfg, model_degree=model_degree)
        return baseline, fuse_linear_gemms(baseline)
    if transform in ("fuse-elementwise", "fuse-all"):
        baseline = build_iteration(cfg, Granularity.KERNEL, model_degree)
        variant = fuse_all_elementwise(baseline)
        if transform == "fuse-all":
            variant = fuse_linear_gemms(variant)
        return baseline, variant
    if transform.startswith("microbatch:"):
        try:
            k = int(transform.split(":", 1)[1])
        except ValueError as e:
            raise ConfigError(f"Bad micro-batch count in '{transform}'", keys=["transform"]) from e
        baseline = build_iteration(cfg, model_degree=model_degree)
        return baseline, apply_microbatching(cfg, k, model_degree=model_degree)
    raise ConfigError(f"Unknown transform '{transform}'", keys=["transform"])
