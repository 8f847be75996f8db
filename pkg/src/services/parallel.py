# src/services/parallel.py
"""
Multi-device schedules.

Data parallelism replicates the per-device graph and AllReduces each layer's
gradients over a ring of D devices; layer L's gradients travel while layer
L-1 back-propagates, so each consecutive pair costs max(compute, comm) and
only the last-computed (first) layer's transfer is fully exposed.

Model parallelism splits attention heads and the FC intermediate dimension
over M devices (Megatron-style) and adds four serialized AllReduces of the
full activation per layer: two in forward, two in backward.
"""
import json
import logging
from typing import Dict, List, Optional, Tuple

from src.models.config import HardwareSpec, ModelConfig, ParallelismConfig, ShardedView
from src.models.cost import CommEvent, ScheduledGraph, ScheduleEntry
from src.models.ops import Category, GemmPass, OpDescriptor, Phase
from src.services.config_io import embedding_param_count, layer_param_count
from src.services.exceptions import ParallelismError
from src.services.opgraph import Granularity, check_model_split, partitioned_count
from src.services.roofline import estimate_graph
from src.services.whatif import apply_microbatching

logger = logging.getLogger("bertperf.parallel")

# where the model-parallel AllReduces sit: (phase, site, gemm pass) of the op they follow
_MP_ANCHORS = {
    (Phase.FORWARD, "attn_proj", GemmPass.FWD): "fwd_attention",
    (Phase.FORWARD, "fc2", GemmPass.FWD): "fwd_ffn",
    (Phase.BACKWARD_WEIGHT_GRAD, "fc1", GemmPass.BWD_WT_GRAD): "bwd_ffn",
    (Phase.BACKWARD_WEIGHT_GRAD, "query", GemmPass.BWD_WT_GRAD): "bwd_attention",
    (Phase.BACKWARD_WEIGHT_GRAD, "qkv", GemmPass.BWD_WT_GRAD): "bwd_attention",
}


def ring_allreduce_bytes(payload: float, devices: int) -> float:
    """Bytes each device sends (and receives) in a ring AllReduce"""
    if devices < 1:
        raise ParallelismError(f"Ring AllReduce needs at least one device, got {devices}")
    return payload * 2 * (devices - 1) / devices


def comm_time(payload: float, devices: int, hw: HardwareSpec) -> float:
    return ring_allreduce_bytes(payload, devices) / hw.link_bandwidth


def per_device_batch(global_batch: int, data_degree: int) -> int:
    if data_degree < 1 or global_batch % data_degree != 0:
        raise ParallelismError(f"Global batch {global_batch} does not split over {data_degree} devices")
    return global_batch // data_degree


def sharded_view(cfg: ModelConfig, model_degree: int) -> ShardedView:
    check_model_split(cfg, model_degree)
    return ShardedView(
        model=cfg,
        model_degree=model_degree,
        heads_per_device=cfg.num_heads // model_degree,
        ff_per_device=cfg.intermediate_dim // model_degree,
        attn_dim_per_device=cfg.hidden_dim // model_degree,
        lamb_elements_per_layer=partitioned_count(layer_param_count(cfg.hidden_dim, cfg.intermediate_dim), model_degree),
        lamb_elements_embeddings=partitioned_count(embedding_param_count(cfg), model_degree),
    )


def _compute_entries(graph: List[OpDescriptor], hw: HardwareSpec) -> List[ScheduleEntry]:
    estimates = estimate_graph(graph, hw)
    return [
        ScheduleEntry(
            name=op.id,
            category=op.category,
            layer_index=op.layer_index,
            duration=est.time,
            exposed=est.time,
            op=op,
            estimate=est,
        )
        for op, est in zip(graph, estimates)
    ]


def _comm_entry(event: CommEvent, duration: float, exposed: float) -> ScheduleEntry:
    return ScheduleEntry(
        name=event.label,
        category=Category.ALL_REDUCE,
        layer_index=event.anchor_layer,
        duration=duration,
        exposed=exposed,
        comm=event,
    )


def _model_parallel_events(
    entries: List[ScheduleEntry], cfg: ModelConfig, model_degree: int, hw: HardwareSpec
) -> Dict[int, List[ScheduleEntry]]:
    """Serialized activation AllReduces keyed by the index of the op they follow"""
    if model_degree == 1:
        return {}
    payload = cfg.tokens * cfg.hidden_dim * cfg.activation_precision.bytes
    duration = comm_time(payload, model_degree, hw)
    events: Dict[int, List[ScheduleEntry]] = {}
    for idx, entry in enumerate(entries):
        op = entry.op
        label = _MP_ANCHORS.get((op.phase, op.site, op.gemm_pass))
        if label is None:
            continue
        event = CommEvent(
            payload_bytes=payload,
            overlappable=False,
            anchor_layer=op.layer_index,
            devices=model_degree,
            wire_bytes=ring_allreduce_bytes(payload, model_degree),
            label=f"mb{op.micro_batch}.L{op.layer_index:02d}.allreduce.{label}",
        )
        events.setdefault(idx, []).append(_comm_entry(event, duration, duration))
    return events


def _data_parallel_events(
    entries: List[ScheduleEntry],
    cfg: ModelConfig,
    par: ParallelismConfig,
    hw: HardwareSpec,
) -> Dict[int, List[ScheduleEntry]]:
    """Gradient AllReduces over D devices, exposure per the overlap rule"""
    data_degree, model_degree = par.data_degree, par.model_degree
    if data_degree == 1:
        return {}

    bpe = cfg.activation_precision.bytes
    layer_bytes = partitioned_count(layer_param_count(cfg.hidden_dim, cfg.intermediate_dim), model_degree) * bpe
    embedding_bytes = partitioned_count(embedding_param_count(cfg), model_degree) * bpe
    num_layers = cfg.num_layers

    # gradients are final only after the last micro-batch's backward
    last_micro = max((e.op.micro_batch for e in entries), default=0)
    backward_time = [0.0] * num_layers
    last_backward_idx: Dict[int, int] = {}
    for idx, entry in enumerate(entries):
        op = entry.op
        if op.phase.is_backward and op.layer_index is not None and op.micro_batch == last_micro:
            backward_time[op.layer_index] += entry.duration
            last_backward_idx[op.layer_index] = idx

    # embedding gradients ride in the bucket computed last (layer 0)
    payloads = [layer_bytes + (embedding_bytes if layer == 0 else 0) for layer in range(num_layers)]

    if not par.overlap_comm:
        total = sum(payloads)
        event = CommEvent(
            payload_bytes=total,
            overlappable=True,
            anchor_layer=0,
            devices=data_degree,
            wire_bytes=ring_allreduce_bytes(total, data_degree),
            label="allreduce.gradients",
        )
        duration = comm_time(total, data_degree, hw)
        return {last_backward_idx[0]: [_comm_entry(event, duration, duration)]}

    events: Dict[int, List[ScheduleEntry]] = {}
    for layer in range(num_layers):
        duration = comm_time(payloads[layer], data_degree, hw)
        if layer == 0:
            exposed = duration
        else:
            # hidden behind layer-1's backprop
            exposed = max(0.0, duration - backward_time[layer - 1])
        event = CommEvent(
            payload_bytes=payloads[layer],
            overlappable=True,
            anchor_layer=layer,
            devices=data_degree,
            wire_bytes=ring_allreduce_bytes(payloads[layer], data_degree),
            label=f"L{layer:02d}.allreduce.gradients",
        )
        events.setdefault(last_backward_idx[layer], []).append(_comm_entry(event, duration, exposed))
    return events


def _assemble(
    entries: List[ScheduleEntry],
    event_sets: List[Dict[int, List[ScheduleEntry]]],
    cfg: ModelConfig,
    par: ParallelismConfig,
) -> ScheduledGraph:
    scheduled: List[ScheduleEntry] = []
    for idx, entry in enumerate(entries):
        scheduled.append(entry)
        for events in event_sets:
            scheduled.extend(events.get(idx, []))
    total = sum(e.exposed for e in scheduled)
    return ScheduledGraph(
        entries=scheduled,
        total_time=total,
        data_degree=par.data_degree,
        model_degree=par.model_degree,
        micro_batches=par.micro_batches,
        per_device_batch=cfg.batch_size,
    )


def schedule_single_device(graph: List[OpDescriptor], hw: HardwareSpec, cfg: Optional[ModelConfig] = None) -> ScheduledGraph:
    """Serial schedule: every op exposed, no communication"""
    entries = _compute_entries(graph, hw)
    return ScheduledGraph(
        entries=entries,
        total_time=sum(e.exposed for e in entries),
        per_device_batch=cfg.batch_size if cfg is not None else 0,
    )


def apply_data_parallel(
    graph: List[OpDescriptor],
    cfg: ModelConfig,
    par: ParallelismConfig,
    hw: HardwareSpec,
) -> ScheduledGraph:
    """
    Replicated compute plus per-layer gradient AllReduce over par.data_degree.
    graph is the per-device graph at the per-device batch size.
    """
    entries = _compute_entries(graph, hw)
    schedule = _assemble(entries, [_data_parallel_events(entries, cfg, par, hw)], cfg, par)
    logger.debug(
        f"Data parallel D={par.data_degree} overlap={par.overlap_comm}: "
        f"total={schedule.total_time:.6f}s exposed comm={schedule.exposed_comm_time:.6f}s"
    )
    return schedule


def _per_device_graph(cfg: ModelConfig, par: ParallelismConfig, granularity: Granularity) -> List[OpDescriptor]:
    return apply_microbatching(cfg, par.micro_batches, granularity=granularity, model_degree=par.model_degree)


def apply_model_parallel(
    cfg: ModelConfig,
    par: ParallelismConfig,
    hw: HardwareSpec,
    granularity: Granularity = Granularity.GROUPED,
) -> Tuple[ShardedView, List[OpDescriptor], ScheduledGraph]:
    view = sharded_view(cfg, par.model_degree)
    graph = _per_device_graph(cfg, par, granularity)
    entries = _compute_entries(graph, hw)
    micro_cfg = cfg.model_copy(update={"batch_size": cfg.batch_size // par.micro_batches})
    mp_events = _model_parallel_events(entries, micro_cfg, par.model_degree, hw)
    single_group = par.model_copy(update={"data_degree": 1})
    schedule = _assemble(entries, [mp_events], cfg, single_group)
    logger.debug(
        f"Model parallel M={par.model_degree}: {len(schedule.comm_entries)} AllReduces, "
        f"total={schedule.total_time:.6f}s"
    )
    return view, graph, schedule


def apply_hybrid(
    cfg: ModelConfig,
    par: ParallelismConfig,
    hw: HardwareSpec,
    granularity: Granularity = Granularity.GROUPED,
) -> ScheduledGraph:
    """M-way model split inside each of D data-parallel replicas"""
    check_model_split(cfg, par.model_degree)
    graph = _per_device_graph(cfg, par, granularity)
    entries = _compute_entries(graph, hw)
    micro_cfg = cfg.model_copy(update={"batch_size": cfg.batch_size // par.micro_batches})
    mp_events = _model_parallel_events(entries, micro_cfg, par.model_degree, hw)
    dp_events = _data_parallel_events(entries, cfg, par, hw)
    schedule = _assemble(entries, [mp_events, dp_events], cfg, par)
    logger.info(
        f"Hybrid M={par.model_degree} D={par.data_degree} k={par.micro_batches}: "
        f"total={schedule.total_time:.6f}s, exposed comm={schedule.exposed_comm_time:.6f}s"
    )
    return schedule


def dump_schedule(schedule: ScheduledGraph) -> str:
    """JSON lines of (event, duration, exposed, overlapped) in schedule order"""
    lines = [
        json.dumps({
            "event": entry.name,
            "category": entry.category.value,
            "duration": entry.duration,
            "exposed": entry.exposed,
            "overlapped": entry.overlapped,
        })
        for entry in schedule.entries
    ]
    return "".join(line + "\n" for line in lines)
