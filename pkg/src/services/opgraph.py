# src/services/opgraph.py
"""
Enumeration of every kernel of one training iteration.

A layer's forward pass is enumerated in dataflow order (Q/K/V projections,
attention score B-GEMM, scale/mask/softmax/dropout, attention output B-GEMM,
output projection, dropout+residual+LayerNorm, FC-1, GeLU, FC-2,
dropout+residual+LayerNorm). Backward walks layers last-to-first with each
GEMM split into its activation-gradient and weight-gradient GEMMs. The update
phase is one global gradient-norm reduction followed by the two LAMB stages
per layer and once more for the embeddings.

GEMM sizes follow the architecture-agnostic table:

    layer        FWD (M, N, K, batch)       BwdActGrad                 BwdWtGrad
    LinearTrans  d, n*B, d, -               d, n*B, d, -               d, d, n*B, -
    AttnScore    n, n, d/h, B*h             n, d/h, n, B*h             d/h, n, n, B*h
    AttnOutput   d/h, n, n, B*h             d/h, n, n, B*h             n, n, d/h, B*h
    FC1          d_ff, n*B, d, -            d, n*B, d_ff, -            d, d_ff, n*B, -
    FC2          d, n*B, d_ff, -            d_ff, n*B, d, -            d_ff, d, n*B, -
"""
import json
import logging
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel

from src.models.config import ModelConfig
from src.models.ops import (
    Category,
    ElementwiseKind,
    GemmKind,
    GemmLayer,
    GemmPass,
    GemmShape,
    OpDescriptor,
    Phase,
    ReductionKind,
)
from src.services.config_io import embedding_param_count, layer_param_count
from src.services.exceptions import GraphError, ParallelismError

logger = logging.getLogger("bertperf.opgraph")

# flops per element of the non-GEMM building blocks
FLOPS_SIMPLE = 1        # add, mul, scale, dropout, residual
FLOPS_SOFTMAX = 5
FLOPS_GELU = 10
FLOPS_LAYERNORM = 6
FLOPS_LAMB_STAGE1 = 12
FLOPS_LAMB_STAGE2 = 3


class Granularity(str, Enum):
    GROUPED = "grouped"
    KERNEL = "kernel"


# GEMM site -> (size-table row, category)
GEMM_SITES: Dict[str, Tuple[GemmLayer, Category]] = {
    "query": (GemmLayer.LINEAR_TRANS, Category.LINEAR_TRANSFORM_GEMM),
    "key": (GemmLayer.LINEAR_TRANS, Category.LINEAR_TRANSFORM_GEMM),
    "value": (GemmLayer.LINEAR_TRANS, Category.LINEAR_TRANSFORM_GEMM),
    "attn_score": (GemmLayer.ATTN_SCORE, Category.ATTENTION_BGEMM),
    "attn_output": (GemmLayer.ATTN_OUTPUT, Category.ATTENTION_BGEMM),
    "attn_proj": (GemmLayer.LINEAR_TRANS, Category.LINEAR_TRANSFORM_GEMM),
    "fc1": (GemmLayer.FC1, Category.FC_GEMM),
    "fc2": (GemmLayer.FC2, Category.FC_GEMM),
}

QKV_SITES = ("query", "key", "value")

FORWARD_SITES = (
    "query", "key", "value",
    "attn_score", "attn_softmax", "attn_output",
    "attn_proj", "attn_ln",
    "fc1", "gelu", "fc2", "ffn_ln",
)

# one kernel as launched by an unfused framework: (name, reads, writes, flops, reduction passes)
_Kernel = Tuple[str, int, int, int, int]

ELEMENTWISE_GROUPS: Dict[str, Tuple[Category, Tuple[_Kernel, ...]]] = {
    "attn_softmax": (Category.ATTN_SCALE_MASK_SOFTMAX_DROPOUT, (
        ("scale", 1, 1, FLOPS_SIMPLE, 0),
        ("mask", 2, 1, FLOPS_SIMPLE, 0),
        ("softmax", 1, 1, FLOPS_SOFTMAX, 1),
        ("dropout", 1, 1, FLOPS_SIMPLE, 0),
    )),
    "gelu": (Category.GELU, (
        ("gelu", 1, 1, FLOPS_GELU, 0),
    )),
    "attn_ln": (Category.DROP_RESIDUAL_LAYERNORM, (
        ("dropout", 1, 1, FLOPS_SIMPLE, 0),
        ("residual", 2, 1, FLOPS_SIMPLE, 0),
        ("layernorm", 1, 1, FLOPS_LAYERNORM, 1),
    )),
    "ffn_ln": (Category.DROP_RESIDUAL_LAYERNORM, (
        ("dropout", 1, 1, FLOPS_SIMPLE, 0),
        ("residual", 2, 1, FLOPS_SIMPLE, 0),
        ("layernorm", 1, 1, FLOPS_LAYERNORM, 1),
    )),
}


class ChainMismatch(BaseModel):
    producer: str
    consumer: str
    dim: str
    expected: int
    actual: int
    layer_index: Optional[int] = None

    def __str__(self) -> str:
        return (f"layer {self.layer_index}: {self.producer} -> {self.consumer} "
                f"dim {self.dim} expected {self.expected}, got {self.actual}")


def _transpose_flags(gemm_pass: GemmPass) -> Tuple[bool, bool]:
    if gemm_pass is GemmPass.BWD_ACT_GRAD:
        return True, False      # weight operand transposed
    if gemm_pass is GemmPass.BWD_WT_GRAD:
        return False, True      # activation operand transposed
    return False, False


def _linear_shape(out_dim: int, in_dim: int, tokens: int, gemm_pass: GemmPass) -> Tuple[int, int, int]:
    if gemm_pass is GemmPass.FWD:
        return out_dim, tokens, in_dim
    if gemm_pass is GemmPass.BWD_ACT_GRAD:
        return in_dim, tokens, out_dim
    return in_dim, out_dim, tokens


def site_gemm_dims(site: str, gemm_pass: GemmPass, cfg: ModelConfig, model_degree: int = 1) -> GemmShape:
    """Per-device shape of one GEMM site under an M-way intra-layer split"""
    d, ff, n, tokens = cfg.hidden_dim, cfg.intermediate_dim, cfg.seq_len, cfg.tokens
    dh = cfg.head_dim
    m_deg = model_degree
    trans_a, trans_b = _transpose_flags(gemm_pass)

    # column-parallel sites split their output features, row-parallel sites their inputs
    linear_dims = {
        "query": (d // m_deg, d),
        "key": (d // m_deg, d),
        "value": (d // m_deg, d),
        "attn_proj": (d, d // m_deg),
        "fc1": (ff // m_deg, d),
        "fc2": (d, ff // m_deg),
    }
    if site in linear_dims:
        out_dim, in_dim = linear_dims[site]
        m, n_dim, k = _linear_shape(out_dim, in_dim, tokens, gemm_pass)
        return GemmShape(m=m, n=n_dim, k=k, batch=1, trans_a=trans_a, trans_b=trans_b)

    batch = cfg.batch_size * cfg.num_heads // m_deg
    if site == "attn_score":
        dims = {
            GemmPass.FWD: (n, n, dh),
            GemmPass.BWD_ACT_GRAD: (n, dh, n),
            GemmPass.BWD_WT_GRAD: (dh, n, n),
        }[gemm_pass]
    elif site == "attn_output":
        dims = {
            GemmPass.FWD: (dh, n, n),
            GemmPass.BWD_ACT_GRAD: (dh, n, n),
            GemmPass.BWD_WT_GRAD: (n, n, dh),
        }[gemm_pass]
    else:
        raise GraphError(f"Unknown GEMM site '{site}'")
    m, n_dim, k = dims
    return GemmShape(m=m, n=n_dim, k=k, batch=batch, trans_a=trans_a, trans_b=trans_b)


_TABLE_SITE = {
    GemmLayer.LINEAR_TRANS: "query",
    GemmLayer.ATTN_SCORE: "attn_score",
    GemmLayer.ATTN_OUTPUT: "attn_output",
    GemmLayer.FC1: "fc1",
    GemmLayer.FC2: "fc2",
}


def gemm_dims(layer: GemmLayer, gemm_pass: GemmPass, cfg: ModelConfig) -> GemmShape:
    """Single-device GEMM shape for one row/column of the size table"""
    return site_gemm_dims(_TABLE_SITE[layer], gemm_pass, cfg)


def nongemm_element_counts(cfg: ModelConfig, model_degree: int = 1) -> Dict[Category, int]:
    """Per-layer element counts of the non-GEMM groups (DropResidualLayerNorm is per site)"""
    return {
        Category.ATTN_SCALE_MASK_SOFTMAX_DROPOUT:
            cfg.batch_size * (cfg.num_heads // model_degree) * cfg.seq_len * cfg.seq_len,
        Category.GELU: cfg.batch_size * cfg.seq_len * (cfg.intermediate_dim // model_degree),
        # replicated on every device under model parallelism
        Category.DROP_RESIDUAL_LAYERNORM: cfg.batch_size * cfg.seq_len * cfg.hidden_dim,
    }


def check_model_split(cfg: ModelConfig, model_degree: int) -> None:
    if model_degree < 1:
        raise ParallelismError(f"model_degree must be at least 1, got {model_degree}")
    if cfg.num_heads % model_degree != 0:
        raise ParallelismError(f"num_heads ({cfg.num_heads}) is not divisible by model_degree ({model_degree})")
    if cfg.intermediate_dim % model_degree != 0:
        raise ParallelismError(
            f"intermediate_dim ({cfg.intermediate_dim}) is not divisible by model_degree ({model_degree})"
        )


def partitioned_count(count: int, model_degree: int) -> int:
    """Elements owned by one of model_degree devices"""
    return -(-count // model_degree)


def _op_id(micro_batch: Optional[int], layer: Optional[int], site: str, tag: str) -> str:
    parts = []
    if micro_batch is not None:
        parts.append(f"mb{micro_batch}")
    parts.append(f"L{layer:02d}" if layer is not None else "G")
    parts.append(site)
    parts.append(tag)
    return ".".join(parts)


class _Builder:
    def __init__(self, cfg: ModelConfig, granularity: Granularity, model_degree: int, micro_batch: Optional[int]):
        self.cfg = cfg
        self.granularity = granularity
        self.model_degree = model_degree
        self.micro_batch = micro_batch
        self.precision = cfg.activation_precision
        self.elements = nongemm_element_counts(cfg, model_degree)
        self.ops: List[OpDescriptor] = []

    def gemm(self, layer: int, site: str, gemm_pass: GemmPass):
        table_row, category = GEMM_SITES[site]
        self.ops.append(OpDescriptor(
            id=_op_id(self.micro_batch, layer, site, gemm_pass.value),
            layer_index=layer,
            phase=gemm_pass.phase,
            category=category,
            site=site,
            kind=GemmKind(shape=site_gemm_dims(site, gemm_pass, self.cfg, self.model_degree)),
            precision=self.precision,
            micro_batch=self.micro_batch or 0,
            gemm_layer=table_row,
            gemm_pass=gemm_pass,
        ))

    def elementwise_group(self, layer: int, site: str, backward: bool):
        category, kernels = ELEMENTWISE_GROUPS[site]
        elements = self.elements[category]
        phase = Phase.BACKWARD_ACT_GRAD if backward else Phase.FORWARD
        tag = "BWD" if backward else "FWD"

        if self.granularity is Granularity.GROUPED:
            # one group op: external reads of the chain, one write, all reduction passes
            reads = kernels[0][1] + sum(k[1] - 1 for k in kernels[1:])
            kinds = [(
                None,
                ElementwiseKind(
                    elements=elements,
                    flops_per_element=sum(k[3] for k in kernels),
                    operand_reads=reads + (1 if backward else 0),
                    operand_writes=1,
                    reduction_passes=sum(k[4] for k in kernels),
                ),
            )]
        else:
            ordered = list(reversed(kernels)) if backward else list(kernels)
            kinds = []
            for i, (name, reads, writes, flops, passes) in enumerate(ordered):
                # the first backward kernel also reads the incoming gradient
                extra = 1 if backward and i == 0 else 0
                kinds.append((name, ElementwiseKind(
                    elements=elements,
                    flops_per_element=flops,
                    operand_reads=reads + extra,
                    operand_writes=writes,
                    reduction_passes=passes,
                )))

        for name, kind in kinds:
            op_tag = tag if name is None else f"{tag}.{name}"
            self.ops.append(OpDescriptor(
                id=_op_id(self.micro_batch, layer, site, op_tag),
                layer_index=layer,
                phase=phase,
                category=category,
                site=site,
                kind=kind,
                precision=self.precision,
                micro_batch=self.micro_batch or 0,
            ))

    def placeholder(self, category: Category, site: str):
        self.ops.append(OpDescriptor(
            id=_op_id(self.micro_batch, None, site, "FWD"),
            layer_index=None,
            phase=Phase.FORWARD,
            category=category,
            site=site,
            kind=ElementwiseKind(elements=0, flops_per_element=0, operand_reads=0, operand_writes=0),
            precision=self.precision,
            micro_batch=self.micro_batch or 0,
        ))

    def forward(self, layer: int):
        for site in FORWARD_SITES:
            if site in GEMM_SITES:
                self.gemm(layer, site, GemmPass.FWD)
            else:
                self.elementwise_group(layer, site, backward=False)

    def backward(self, layer: int):
        for site in reversed(FORWARD_SITES):
            if site in GEMM_SITES:
                self.gemm(layer, site, GemmPass.BWD_ACT_GRAD)
                self.gemm(layer, site, GemmPass.BWD_WT_GRAD)
            else:
                self.elementwise_group(layer, site, backward=True)


def build_forward_backward(
    cfg: ModelConfig,
    granularity: Granularity = Granularity.GROUPED,
    model_degree: int = 1,
    micro_batch: Optional[int] = None,
) -> List[OpDescriptor]:
    check_model_split(cfg, model_degree)
    builder = _Builder(cfg, granularity, model_degree, micro_batch)
    builder.placeholder(Category.EMBEDDING, "embeddings")
    for layer in range(cfg.num_layers):
        builder.forward(layer)
    builder.placeholder(Category.OUTPUT_LAYER, "output_head")
    for layer in reversed(range(cfg.num_layers)):
        builder.backward(layer)
    return builder.ops


def build_update(cfg: ModelConfig, model_degree: int = 1) -> List[OpDescriptor]:
    """Global gradient norm, then LAMB stage 1 and 2 per layer and for the embeddings"""
    check_model_split(cfg, model_degree)
    precision = cfg.optimizer_precision
    per_layer = partitioned_count(layer_param_count(cfg.hidden_dim, cfg.intermediate_dim), model_degree)
    embeddings = partitioned_count(embedding_param_count(cfg), model_degree)
    total = cfg.num_layers * per_layer + embeddings

    ops = [OpDescriptor(
        id=_op_id(None, None, "grad_norm", "UPD"),
        layer_index=None,
        phase=Phase.UPDATE,
        category=Category.GLOBAL_GRAD_NORM,
        site="grad_norm",
        kind=ReductionKind(elements=total, passes=1),
        precision=precision,
    )]

    def lamb_pair(layer: Optional[int], site: str, elements: int):
        # stage 1 reads w, g, m, v and writes m, v, u; stage 2 reads w, u and writes w
        ops.append(OpDescriptor(
            id=_op_id(None, layer, site, "LAMB1"),
            layer_index=layer,
            phase=Phase.UPDATE,
            category=Category.LAMB_STAGE1,
            site=site,
            kind=ElementwiseKind(elements=elements, flops_per_element=FLOPS_LAMB_STAGE1,
                                 operand_reads=4, operand_writes=3),
            precision=precision,
        ))
        ops.append(OpDescriptor(
            id=_op_id(None, layer, site, "LAMB2"),
            layer_index=layer,
            phase=Phase.UPDATE,
            category=Category.LAMB_STAGE2,
            site=site,
            kind=ElementwiseKind(elements=elements, flops_per_element=FLOPS_LAMB_STAGE2,
                                 operand_reads=2, operand_writes=1),
            precision=precision,
        ))

    for layer in range(cfg.num_layers):
        lamb_pair(layer, "layer_params", per_layer)
    lamb_pair(None, "embeddings", embeddings)
    return ops


def build_iteration(
    cfg: ModelConfig,
    granularity: Granularity = Granularity.GROUPED,
    model_degree: int = 1,
) -> List[OpDescriptor]:
    """Ordered descriptors of one (per-device) training iteration"""
    ops = build_forward_backward(cfg, granularity, model_degree)
    ops.extend(build_update(cfg, model_degree))
    logger.debug(f"Built {len(ops)} ops for N={cfg.num_layers}, n={cfg.seq_len}, B={cfg.batch_size}, M={model_degree}")
    return ops


def _forward_gemms(graph: Iterable[OpDescriptor]) -> Dict[Tuple[int, int], Dict[str, GemmShape]]:
    layers: Dict[Tuple[int, int], Dict[str, GemmShape]] = {}
    for op in graph:
        if op.is_gemm and op.phase is Phase.FORWARD and op.layer_index is not None:
            layers.setdefault((op.micro_batch, op.layer_index), {})[op.site] = op.kind.shape
    return layers


def _forward_groups(graph: Iterable[OpDescriptor]) -> Dict[Tuple[int, int, str], int]:
    elements = {}
    for op in graph:
        if op.kind.kind == "elementwise" and op.phase is Phase.FORWARD and op.layer_index is not None:
            elements[(op.micro_batch, op.layer_index, op.site)] = op.kind.elements
    return elements


def chain_check(graph: List[OpDescriptor], cfg: ModelConfig) -> List[ChainMismatch]:
    """
    Check producer/consumer dimensions along the attention and FC dataflow.
    Returns an empty list when every layer chains; otherwise the mismatches,
    first incompatible triple first.
    """
    mismatches: List[ChainMismatch] = []
    groups = _forward_groups(graph)
    tokens, batch, n = cfg.tokens, cfg.batch_size, cfg.seq_len

    def expect(layer, producer, consumer, dim, expected, actual):
        if expected != actual:
            mismatches.append(ChainMismatch(
                producer=producer, consumer=consumer, dim=dim,
                expected=expected, actual=actual, layer_index=layer,
            ))

    for (micro, layer), shapes in sorted(_forward_gemms(graph).items()):
        missing = [s for s in GEMM_SITES if s not in shapes]
        if missing:
            if "qkv" in shapes:
                # fused projection: split back into the three equal outputs
                qkv = shapes["qkv"]
                shapes = dict(shapes, query=GemmShape(m=qkv.m // 3, n=qkv.n, k=qkv.k))
                missing = [s for s in GEMM_SITES if s not in shapes and s not in QKV_SITES]
            if missing:
                raise GraphError(f"Layer {layer} is missing forward GEMMs: {missing}")

        q, score, out = shapes["query"], shapes["attn_score"], shapes["attn_output"]
        proj, fc1, fc2 = shapes["attn_proj"], shapes["fc1"], shapes["fc2"]
        heads = score.batch // batch

        # projection output (d x n*B) reshaped to (B*h) x (d/h) x n
        expect(layer, "query", "attn_score", "n", tokens, q.n)
        expect(layer, "query", "attn_score", "batch", batch * heads, score.batch)
        expect(layer, "query", "attn_score", "k", q.m // max(heads, 1), score.k)
        expect(layer, "query", "attn_score", "m", n, score.m)
        # n x n scores feed the output B-GEMM's K dim
        expect(layer, "attn_score", "attn_output", "k", score.n, out.k)
        expect(layer, "attn_score", "attn_output", "batch", score.batch, out.batch)
        # concatenated heads restore d x n*B for W_o
        expect(layer, "attn_output", "attn_proj", "k", out.m * heads, proj.k)
        expect(layer, "attn_output", "attn_proj", "n", out.n * batch, proj.n)
        expect(layer, "attn_proj", "fc1", "k", proj.m, fc1.k)
        # FC-1 output feeds GeLU, GeLU feeds FC-2's K dim
        gelu = groups.get((micro, layer, "gelu"))
        if gelu is not None:
            expect(layer, "fc1", "gelu", "elements", fc1.m * fc1.n, gelu)
        expect(layer, "fc1", "fc2", "k", fc1.m, fc2.k)
        expect(layer, "fc1", "fc2", "n", fc1.n, fc2.n)

    return mismatches


_KIND_FIELDS = {
    "gemm": ("m", "n", "k", "batch", "trans_a", "trans_b"),
    "elementwise": ("elements", "flops_per_element", "operand_reads", "operand_writes", "reduction_passes"),
    "reduction": ("elements", "passes", "flops_per_element"),
    "collective": ("payload_bytes",),
}


def dump_record(op: OpDescriptor) -> Dict:
    record = {
        "id": op.id,
        "layer": op.layer_index,
        "phase": op.phase.value,
        "category": op.category.value,
        "site": op.site,
        "micro_batch": op.micro_batch,
        "kind": op.kind.kind,
    }
    source = op.kind.shape if op.is_gemm else op.kind
    for field in _KIND_FIELDS[op.kind.kind]:
        record[field] = getattr(source, field)
    record["precision"] = op.precision.value
    if op.gemm_layer is not None:
        record["gemm_layer"] = op.gemm_layer.value
        record["gemm_pass"] = op.gemm_pass.value
    return record


def dump_graph(graph: Iterable[OpDescriptor]) -> str:
    """JSON-lines dump with a fixed field order"""
    return "".join(json.dumps(dump_record(op)) + "\n" for op in graph)


def load_graph(text: str) -> List[OpDescriptor]:
    ops = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            kind = record["kind"]
            fields = {f: record[f] for f in _KIND_FIELDS[kind] if f in record}
            kind_payload = {"kind": kind, "shape": fields} if kind == "gemm" else {"kind": kind, **fields}
            ops.append(OpDescriptor(
                id=record["id"],
                layer_index=record["layer"],
                phase=record["phase"],
                category=record["category"],
                site=record["site"],
                micro_batch=record.get("micro_batch", 0),
                kind=kind_payload,
                precision=record["precision"],
                gemm_layer=record.get("gemm_layer"),
                gemm_pass=record.get("gemm_pass"),
            ))
        except (KeyError, ValueError) as e:
            raise GraphError(f"Bad graph record on line {line_no}: {e}") from e
    return ops
