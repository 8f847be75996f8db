# src/services/report.py
"""
Runtime breakdowns, hyperparameter sweeps and their serialization.

A breakdown sums the exposed time of every schedule entry into its category
group; communication hidden behind backprop contributes only the part that
is left over.
"""
import csv
import io
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

from pydantic import ValidationError
from tabulate import tabulate

from src.models.config import HardwareSpec, ModelConfig, ParallelismConfig
from src.models.cost import CostEstimate, DeltaReport, ScheduledGraph
from src.models.ops import Category
from src.models.report import (
    CATEGORY_GROUPS,
    CONFIG_AXES,
    CategoryGroup,
    IterationBreakdown,
    Share,
    SweepRow,
)
from src.services.config_io import validate_parallelism
from src.services.exceptions import BertPerfError, ConfigError, ReportError
from src.services.opgraph import Granularity
from src.services.parallel import apply_hybrid

logger = logging.getLogger("bertperf.report")

SIGNIFICANT_DIGITS = 9


class EmitFormat(str, Enum):
    JSON = "json"
    CSV = "csv"
    TABLE = "table"


def _shares(times: Dict, total: float) -> Dict:
    return {key: Share(time=t, fraction=t / total if total > 0 else 0.0) for key, t in times.items()}


def breakdown(schedule: ScheduledGraph, estimates: Optional[Sequence[CostEstimate]] = None) -> IterationBreakdown:
    """
    Per-group and per-category time of a schedule. When estimates are given
    they must line up one-to-one with the schedule's compute entries and
    replace the times stored there.
    """
    compute = schedule.compute_entries
    if estimates is not None and len(estimates) != len(compute):
        raise ReportError(
            f"{len(estimates)} estimates for {len(compute)} compute entries in the schedule"
        )
    if not schedule.entries:
        return IterationBreakdown()

    override = {id(entry): est.time for entry, est in zip(compute, estimates or [])}
    category_times: Dict[Category, float] = defaultdict(float)
    for entry in schedule.entries:
        category_times[entry.category] += override.get(id(entry), entry.exposed)

    total = sum(category_times.values())
    group_times = {group: 0.0 for group in CategoryGroup}
    for cat, t in category_times.items():
        group_times[CATEGORY_GROUPS[cat]] += t

    devices = schedule.data_degree * schedule.model_degree
    global_batch = schedule.per_device_batch * schedule.data_degree
    return IterationBreakdown(
        total_time=total,
        groups=_shares(group_times, total),
        categories=_shares(dict(category_times), total),
        sequences_per_second=global_batch / total if total > 0 else 0.0,
        devices=devices,
    )


def config_labels(cfg: ModelConfig, par: ParallelismConfig) -> Dict[str, Union[int, str]]:
    return {
        "batch_size": cfg.batch_size,
        "seq_len": cfg.seq_len,
        "hidden_dim": cfg.hidden_dim,
        "num_layers": cfg.num_layers,
        "model_degree": par.model_degree,
        "data_degree": par.data_degree,
        "precision": cfg.precision.value,
    }


def analyze(
    cfg: ModelConfig,
    hw: HardwareSpec,
    par: Optional[ParallelismConfig] = None,
    granularity: Granularity = Granularity.GROUPED,
) -> IterationBreakdown:
    """Cost one training iteration and break it down"""
    par = par or ParallelismConfig()
    validate_parallelism(cfg, par)
    schedule = apply_hybrid(cfg, par, hw, granularity)
    result = breakdown(schedule).model_copy(update={"config": config_labels(cfg, par)})
    logger.info(
        f"Analyzed L={cfg.num_layers} d={cfg.hidden_dim} n={cfg.seq_len} B={cfg.batch_size} "
        f"{cfg.precision.value} M={par.model_degree} D={par.data_degree}: {result.total_time:.6f}s"
    )
    return result


def _sweep_point(axis: str, value, base: ModelConfig, par: ParallelismConfig) -> Tuple[ModelConfig, ParallelismConfig]:
    if axis in ("model_degree", "data_degree"):
        return base, ParallelismConfig(**{**par.model_dump(), axis: value})
    updates = {axis: value}
    if axis == "hidden_dim":
        updates["intermediate_dim"] = 4 * int(value)
    return ModelConfig(**{**base.model_dump(), **updates}), par


def _sweep_row(axis: str, value, base: ModelConfig, hw: HardwareSpec, par: ParallelismConfig) -> SweepRow:
    try:
        cfg, point_par = _sweep_point(axis, value, base, par)
        return SweepRow(axis=axis, value=value, breakdown=analyze(cfg, hw, point_par))
    except ValidationError as e:
        message = "; ".join(d["msg"] for d in e.errors())
        logger.warning(f"Sweep {axis}={value} rejected: {message}")
        return SweepRow(axis=axis, value=value, error=message)
    except BertPerfError as e:
        logger.warning(f"Sweep {axis}={value} rejected: {e}")
        return SweepRow(axis=axis, value=value, error=str(e))


def parse_sweep_values(axis: str, values: Union[str, Sequence]) -> List[Union[int, str]]:
    """Accept "4,32" or a list; everything but precision is an integer axis"""
    if axis not in CONFIG_AXES:
        raise ConfigError(f"Unknown sweep axis '{axis}', expected one of {list(CONFIG_AXES)}", keys=["axis"])
    raw = [v.strip() for v in values.split(",") if v.strip()] if isinstance(values, str) else list(values)
    if not raw:
        raise ConfigError("Sweep needs at least one value", keys=["values"])
    if axis == "precision":
        return [str(v) for v in raw]
    try:
        return [int(v) for v in raw]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Sweep values for {axis} must be integers: {raw}", keys=["values"]) from e


def sweep(
    axis: str,
    values: Union[str, Sequence],
    base: ModelConfig,
    hw: HardwareSpec,
    par: Optional[ParallelismConfig] = None,
    workers: int = 1,
) -> List[SweepRow]:
    """One breakdown per value, in the order given; bad values become error rows"""
    par = par or ParallelismConfig()
    points = parse_sweep_values(axis, values)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda v: _sweep_row(axis, v, base, hw, par), points))
    else:
        rows = [_sweep_row(axis, v, base, hw, par) for v in points]
    logger.info(f"Sweep over {axis}: {len(rows)} rows, {sum(not r.ok for r in rows)} rejected")
    return rows


def _num(value):
    if isinstance(value, float):
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    return value


def _text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.{SIGNIFICANT_DIGITS}g}"
    return str(value)


def _rounded(obj):
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_rounded(v) for v in obj]
    return _num(obj)


def _as_rows(data) -> List[SweepRow]:
    if isinstance(data, (IterationBreakdown, SweepRow)):
        data = [data]
    rows = []
    for item in data:
        if isinstance(item, SweepRow):
            rows.append(item)
        elif isinstance(item, IterationBreakdown):
            rows.append(SweepRow(axis="", value="", breakdown=item))
        else:
            raise ReportError(f"Cannot emit {type(item).__name__}")
    return rows


CSV_COLUMNS = (
    list(CONFIG_AXES)
    + [group.value for group in CategoryGroup]
    + ["total_time_seconds", "sequences_per_second", "devices", "error"]
)


def _table_record(row: SweepRow) -> List:
    b = row.breakdown
    config = b.config if b else {}
    record = [config.get(axis, row.value if axis == row.axis else None) for axis in CONFIG_AXES]
    record += [b.fraction(group) if b else None for group in CategoryGroup]
    record += [
        b.total_time if b else None,
        b.sequences_per_second if b else None,
        b.devices if b else None,
        row.error,
    ]
    return record


def emit(data, fmt: Union[EmitFormat, str] = EmitFormat.JSON) -> str:
    """
    Serialize breakdowns or sweep rows. JSON mirrors the models (a single
    breakdown becomes an object, anything else an array); CSV has the config
    axes, one fraction column per category group, then the total time.
    """
    fmt = EmitFormat(fmt)
    if fmt is EmitFormat.JSON:
        if isinstance(data, IterationBreakdown):
            payload = data.model_dump(mode="json")
        else:
            payload = [row.model_dump(mode="json") for row in _as_rows(data)]
        return json.dumps(_rounded(payload), indent=2) + "\n"

    records = [_table_record(row) for row in _as_rows(data)]
    if fmt is EmitFormat.TABLE:
        shown = [[_text(v) for v in record] for record in records]
        return tabulate(shown, headers=CSV_COLUMNS, tablefmt="grid") + "\n"

    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for record in records:
        writer.writerow([_text(v) for v in record])
    return out.getvalue()


DELTA_COLUMNS = ["scope", "label", "flops", "bytes", "time_seconds", "kernels"]


def emit_delta(report: DeltaReport, fmt: Union[EmitFormat, str] = EmitFormat.JSON) -> str:
    """Baseline, variant and delta totals followed by the per-category deltas"""
    fmt = EmitFormat(fmt)
    if fmt is EmitFormat.JSON:
        return json.dumps(_rounded(report.model_dump(mode="json")), indent=2) + "\n"

    records = [
        ["total", report.baseline_label, *report.baseline.model_dump().values()],
        ["total", report.variant_label, *report.variant.model_dump().values()],
        ["total", "delta", *report.delta.model_dump().values()],
    ]
    for cat, totals in report.per_category.items():
        records.append([cat.value, "delta", *totals.model_dump().values()])

    if fmt is EmitFormat.TABLE:
        return tabulate([[_text(v) for v in r] for r in records], headers=DELTA_COLUMNS, tablefmt="grid") + "\n"
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(DELTA_COLUMNS)
    for record in records:
        writer.writerow([_text(v) for v in record])
    return out.getvalue()
