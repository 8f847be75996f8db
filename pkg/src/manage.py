import functools
import sys

import click
from dotenv import load_dotenv
from tabulate import tabulate

from src.config.logging_config import setup_logging
from src.models.config import ParallelismConfig, Precision
from src.services.config_io import hardware_preset, load_config, param_count, preset, preset_names
from src.services.exceptions import BertPerfError, ConfigError, ParallelismError
from src.services.lambref import verify
from src.services.opgraph import Granularity, build_iteration, dump_graph
from src.services.parallel import apply_hybrid, dump_schedule
from src.services.report import EmitFormat, analyze as analyze_iteration, emit, emit_delta, sweep as run_sweep
from src.services.whatif import apply_transform, compare

load_dotenv()

FORMATS = click.Choice([f.value for f in EmitFormat])
GRANULARITIES = click.Choice([g.value for g in Granularity])


def handle_errors(f):
    """Config problems exit 2, anything else the model rejects exits 1"""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (ConfigError, ParallelismError) as e:
            click.echo(f"Config error: {e}", err=True)
            sys.exit(2)
        except BertPerfError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
    return wrapper


def config_options(f):
    f = click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON or YAML config document")(f)
    f = click.option("--preset", "preset_name", default="bert_large_phase1", show_default=True,
                     help="Model preset used when no --config is given")(f)
    f = click.option("--hardware", "hardware_name", default="mi100", show_default=True,
                     help="Hardware fixture used when no --config is given")(f)
    f = click.option("--precision", type=click.Choice([p.value for p in Precision]), default=None,
                     help="Override the model precision")(f)
    return f


def resolve_config(config_path, preset_name, hardware_name, precision):
    if config_path:
        model, hardware, par = load_config(config_path)
    else:
        model, hardware, par = preset(preset_name), hardware_preset(hardware_name), ParallelismConfig()
    if precision:
        model = model.model_copy(update={"precision": Precision(precision)})
    return model, hardware, par


def write_output(text: str, out):
    if out:
        with open(out, "w") as f:
            f.write(text)
        click.echo(f"Wrote {out}", err=True)
    else:
        click.echo(text, nl=False)


@click.group()
def cli():
    """Analytical cost model for BERT training iterations"""
    setup_logging(stream=sys.stderr)


@cli.command()
@config_options
@click.option("--format", "fmt", type=FORMATS, default="table", show_default=True)
@click.option("--granularity", type=GRANULARITIES, default="grouped", show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--schedule-out", type=click.Path(), default=None, help="Also write the schedule as JSON lines")
@handle_errors
def analyze(config_path, preset_name, hardware_name, precision, fmt, granularity, out, schedule_out):
    """Runtime breakdown of one training iteration"""
    model, hardware, par = resolve_config(config_path, preset_name, hardware_name, precision)
    result = analyze_iteration(model, hardware, par, Granularity(granularity))
    if schedule_out:
        schedule = apply_hybrid(model, par, hardware, Granularity(granularity))
        with open(schedule_out, "w") as f:
            f.write(dump_schedule(schedule))
    write_output(emit(result, fmt), out)


@cli.command()
@config_options
@click.option("--axis", required=True,
              type=click.Choice(["batch_size", "seq_len", "hidden_dim", "num_layers",
                                 "model_degree", "data_degree", "precision"]))
@click.option("--values", required=True, help="Comma-separated values, e.g. 4,8,16,32")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--format", "fmt", type=FORMATS, default="table", show_default=True)
@click.option("--out", type=click.Path(), default=None)
@handle_errors
def sweep(config_path, preset_name, hardware_name, precision, axis, values, workers, fmt, out):
    """One breakdown per value of a config axis"""
    model, hardware, par = resolve_config(config_path, preset_name, hardware_name, precision)
    rows = run_sweep(axis, values, model, hardware, par, workers=workers)
    write_output(emit(rows, fmt), out)


@cli.command()
@config_options
@click.option("--transform", required=True,
              help="fuse-linear, fuse-elementwise, fuse-all or microbatch:k")
@click.option("--format", "fmt", type=FORMATS, default="table", show_default=True)
@click.option("--out", type=click.Path(), default=None)
@handle_errors
def whatif(config_path, preset_name, hardware_name, precision, transform, fmt, out):
    """Baseline against a transformed graph"""
    model, hardware, par = resolve_config(config_path, preset_name, hardware_name, precision)
    baseline, variant = apply_transform(model, transform, model_degree=par.model_degree)
    report = compare(baseline, variant, hardware, baseline_label="baseline", variant_label=transform)
    write_output(emit_delta(report, fmt), out)


@cli.command("lamb-verify")
@click.option("--elements", type=click.IntRange(min=1), default=None, help="Fixed vector length")
@click.option("--trials", type=click.IntRange(min=0), default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def lamb_verify(elements, trials, seed):
    """Check the two-stage LAMB update against its oracles"""
    failures = verify(elements=elements, trials=trials, seed=seed)
    if failures:
        first = failures[0]
        click.echo(f"FAIL {first.case}: {first.detail}")
        sys.exit(1)
    click.echo(f"OK: {trials} trials, seed {seed}")


@cli.command("dump-graph")
@config_options
@click.option("--granularity", type=GRANULARITIES, default="grouped", show_default=True)
@click.option("--out", type=click.Path(), default=None)
@handle_errors
def dump_graph_cmd(config_path, preset_name, hardware_name, precision, granularity, out):
    """Op graph of one iteration as JSON lines"""
    model, _, par = resolve_config(config_path, preset_name, hardware_name, precision)
    graph = build_iteration(model, Granularity(granularity), par.model_degree)
    write_output(dump_graph(graph), out)


@cli.command()
@handle_errors
def presets():
    """List model presets with their parameter counts"""
    rows = []
    for name in preset_names():
        cfg = preset(name)
        counts = param_count(cfg)
        rows.append([name, cfg.num_layers, cfg.hidden_dim, cfg.num_heads, cfg.seq_len,
                     cfg.batch_size, f"{counts.total:,}"])
    click.echo(tabulate(
        rows,
        headers=["Preset", "Layers", "Hidden", "Heads", "Seq", "Batch", "Parameters"],
        tablefmt="grid",
    ))


@cli.command()
@click.option("--host", default="0.0.0.0", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP API"""
    import uvicorn
    uvicorn.run("src.routes.api:app", host=host, port=port, log_config=None)


if __name__ == '__main__':
    cli()
