# test_roofline.py
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from src.models.config import ElementPrecision, HardwareSpec, ModelConfig
from src.models.cost import Bound
from src.models.ops import Category, CollectiveKind, GemmLayer, GemmPass, GemmShape, OpDescriptor, Phase
from src.services.exceptions import GraphError
from src.services.opgraph import build_iteration, gemm_dims
from src.services.roofline import elementwise_cost, estimate_graph, gemm_cost, op_cost, roofline_time

FP32 = ElementPrecision.FP32
FP16 = ElementPrecision.FP16


def test_fc1_arithmetic_intensity(large1, mi100):
    est = gemm_cost(gemm_dims(GemmLayer.FC1, GemmPass.FWD, large1), FP32, mi100)
    assert est.flops == 2 * 4096 * 4096 * 1024
    assert est.bytes_read == (4096 * 1024 + 1024 * 4096) * 4
    assert est.bytes_written == 4096 * 4096 * 4
    assert est.arithmetic_intensity == pytest.approx(1024 / 3, rel=1e-9)
    assert est.bound is Bound.COMPUTE


def test_attention_score_arithmetic_intensity(large1, mi100):
    est = gemm_cost(gemm_dims(GemmLayer.ATTN_SCORE, GemmPass.FWD, large1), FP32, mi100)
    assert est.arithmetic_intensity == pytest.approx(16.0, rel=1e-9)


def test_gemm_intensity_ordering(large1, mi100):
    def ai(layer):
        return gemm_cost(gemm_dims(layer, GemmPass.FWD, large1), FP32, mi100).arithmetic_intensity

    assert ai(GemmLayer.FC1) > ai(GemmLayer.LINEAR_TRANS) > ai(GemmLayer.ATTN_SCORE)
    assert ai(GemmLayer.LINEAR_TRANS) > ai(GemmLayer.ATTN_OUTPUT)


def test_tiny_gemm_is_latency_bound(mi100):
    est = gemm_cost(GemmShape(m=1, n=1, k=1), FP32, mi100)
    assert est.bound is Bound.LATENCY
    assert est.time >= mi100.launch_overhead


def test_zero_dimension_is_rejected():
    with pytest.raises(ValidationError):
        GemmShape(m=0, n=4, k=4)


def test_softmax_group_is_bandwidth_bound(large1, mi100):
    graph = build_iteration(large1)
    op = next(op for op in graph if op.id == "L00.attn_softmax.FWD")
    est = elementwise_cost(op, mi100)
    elements = 32 * 16 * 128 * 128
    # 2 reads + 1 reduction pass + 1 write
    assert est.bytes_read == elements * 3 * 4
    assert est.bytes_written == elements * 4
    assert est.bound is Bound.BANDWIDTH


def test_roofline_formula(mi100):
    time, bound = roofline_time(10 ** 12, 10 ** 9, FP32, mi100)
    compute = 10 ** 12 / (23.1e12 * 0.85)
    memory = 10 ** 9 / (1.2e12 * 0.80)
    assert time == pytest.approx(5e-6 + max(compute, memory), rel=1e-12)
    assert bound is (Bound.COMPUTE if compute > memory else Bound.BANDWIDTH)


def test_collective_cannot_be_costed_here(mi100):
    op = OpDescriptor(id="x", phase=Phase.COMMUNICATION, category=Category.ALL_REDUCE, site="allreduce",
                      kind=CollectiveKind(payload_bytes=1024), precision=FP32)
    with pytest.raises(GraphError):
        op_cost(op, mi100)
    with pytest.raises(GraphError):
        estimate_graph([op], mi100)


def test_category_must_match_kind():
    with pytest.raises(ValidationError):
        OpDescriptor(id="x", phase=Phase.UPDATE, category=Category.LAMB_STAGE1, site="layer_params",
                     kind=CollectiveKind(payload_bytes=8), precision=FP32)


def test_every_estimate_respects_launch_overhead(tiny, mi100):
    graph = build_iteration(tiny)
    estimates = estimate_graph(graph, mi100)
    assert len(estimates) == len(graph)
    for est in estimates:
        assert est.time >= mi100.launch_overhead
        if est.bytes_total:
            assert est.arithmetic_intensity == est.flops / est.bytes_total


def test_mixed_precision_gemms_never_slower(large1, mi100):
    fp32_graph = build_iteration(large1)
    mixed_graph = build_iteration(ModelConfig(**{**large1.model_dump(), "precision": "mixed"}))
    for a, b in zip(estimate_graph(fp32_graph, mi100), estimate_graph(mixed_graph, mi100)):
        assert b.time <= a.time


def test_mixed_precision_elementwise_keeps_latency_floor(tiny, mi100):
    fp32 = build_iteration(tiny)
    fp16 = build_iteration(ModelConfig(**{**tiny.model_dump(), "precision": "mixed"}))
    for a, b, ea, eb in zip(fp32, fp16, estimate_graph(fp32, mi100), estimate_graph(fp16, mi100)):
        if a.kind.kind == "elementwise" and a.phase is not Phase.UPDATE:
            assert eb.bytes_total * 2 == ea.bytes_total
            assert eb.time >= mi100.launch_overhead


@settings(max_examples=30)
@given(
    m=st.integers(1, 512), n=st.integers(1, 512), k=st.integers(1, 512),
    batch=st.integers(1, 64), factor=st.integers(2, 16),
)
def test_intensity_invariant_under_batch(m, n, k, batch, factor):
    hw = HardwareSpec()
    one = gemm_cost(GemmShape(m=m, n=n, k=k, batch=batch), FP32, hw)
    many = gemm_cost(GemmShape(m=m, n=n, k=k, batch=batch * factor), FP32, hw)
    assert many.arithmetic_intensity == one.arithmetic_intensity
    assert many.flops == factor * one.flops


@settings(max_examples=30)
@given(
    flops=st.integers(0, 10 ** 13), moved=st.integers(0, 10 ** 11),
    boost=st.floats(min_value=1.0, max_value=8.0),
)
def test_time_monotone_in_rates(flops, moved, boost):
    hw = HardwareSpec()
    base, _ = roofline_time(flops, moved, FP32, hw)
    faster_compute = hw.model_copy(update={"peak_flops_fp32": hw.peak_flops_fp32 * boost,
                                           "peak_flops_fp16": hw.peak_flops_fp16 * boost})
    faster_memory = hw.model_copy(update={"mem_bandwidth": hw.mem_bandwidth * boost})
    slower_launch = hw.model_copy(update={"launch_overhead": hw.launch_overhead * boost})
    assert roofline_time(flops, moved, FP32, faster_compute)[0] <= base
    assert roofline_time(flops, moved, FP32, faster_memory)[0] <= base
    assert roofline_time(flops, moved, FP32, slower_launch)[0] >= base


def test_uniform_rescale_divides_time(large1, mi100):
    graph = build_iteration(large1)
    fast = mi100.scaled(4.0)
    for a, b in zip(estimate_graph(graph, mi100), estimate_graph(graph, fast)):
        assert b.time == pytest.approx(a.time / 4.0, rel=1e-12)
        assert b.bound is a.bound


def test_fp16_uses_fp16_peak(mi100):
    shape = GemmShape(m=4096, n=4096, k=4096)
    fp32 = gemm_cost(shape, FP32, mi100)
    fp16 = gemm_cost(shape, FP16, mi100)
    assert fp16.bytes_total * 2 == fp32.bytes_total
    assert fp16.time < fp32.time / 4
