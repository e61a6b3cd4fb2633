import functools
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click
import requests

from app.ais.negsel import GenerationBudgetError
from app.schemas.schemas import PRESETS, ConfigError, ExperimentConfig, Phase, config_to_yaml, flatten
from app.services.metrics_service import MetricsService, interval_text, rate_text
from app.services.pipeline_service import (
    Scenario, build_scenario, classify_nodes, detection_phase, gene_table, learning_phase, simulate_run, summarize,
)
from app.services.sweep_service import SweepService
from app.storage.storage_service import DETECTION_BUNDLE, StorageService, load_experiment_file

API_BASE_URL = os.environ.get("AIS_API_URL", "http://localhost:8000/api/v1")

EXIT_CONFIG_ERROR = 2
EXIT_BUDGET_ERROR = 3


def handle_errors(command):
    """Map domain failures to exit codes: 2 config, 3 generation budget, 1 anything else."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"Config error: {e}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except GenerationBudgetError as e:
            click.echo(f"Detector generation gave up: {e}", err=True)
            sys.exit(EXIT_BUDGET_ERROR)
        except (ValueError, OSError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _config(ctx: click.Context) -> ExperimentConfig:
    return ctx.obj["config"]


def _scenario(ctx: click.Context) -> Scenario:
    saved = ctx.obj["topology"]
    return build_scenario(_config(ctx), StorageService.read_topology(Path(saved)) if saved else None)


def _summaries(config: ExperimentConfig, trace_dir: Path, phase: Phase, nodes: List[int]):
    paths = sorted(Path(trace_dir).glob(f"{phase.value}_run*.tsv"), key=lambda p: int(p.stem.rsplit("run", 1)[1]))
    if not paths:
        raise ValueError(f"No {phase.value} traces in {trace_dir}")
    return [summarize(StorageService.read_trace(p), config, phase.value, nodes) for p in paths]


@click.group(invoke_without_command=True)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help='Experiment file (YAML/JSON)')
@click.option('--preset', type=click.Choice(sorted(PRESETS)), help='Start from a named preset')
@click.option('--topology', 'topology_path', type=click.Path(exists=True, dir_okay=False),
              help='Reuse a topology written by `topology --out` instead of a fresh snapshot')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE', help='Override a dotted config key')
@click.option('--log-level', default='WARNING', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
@click.option('--print-config', is_flag=True, help='Print the resolved config as dotted keys and exit')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], preset: Optional[str], topology_path: Optional[str],
        overrides: Tuple[str, ...], log_level: str, print_config: bool):
    """Negative-selection misbehavior detection for static sensor networks"""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_experiment_file(config_path, preset, list(overrides))
    except ConfigError as e:
        click.echo(f"Config error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    ctx.obj = {"config": config, "topology": topology_path}
    if print_config:
        for key, value in flatten(config.model_dump(mode="json")).items():
            click.echo(f"{key} = {value}")
        ctx.exit(0)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@cli.command()
@click.option('--out', type=click.Path(dir_okay=False), help='Write the snapshot as JSON')
@click.pass_context
@handle_errors
def topology(ctx: click.Context, out: Optional[str]):
    """Generate the topology snapshot and connection endpoints"""
    scenario = _scenario(ctx)
    topo = scenario.topology
    click.echo(f"Nodes: {len(topo)}  edges: {topo.graph.number_of_edges()}  "
               f"giant component: {len(topo.giant_component())}")
    for c in scenario.connections:
        click.echo(f"  connection {c.source} -> {c.destination}")
    click.echo(f"Misbehaving nodes: {sorted(scenario.misbehaving)}")
    if out:
        StorageService.write_topology(topo, Path(out))
        click.echo(f"Topology written to {out}")


@cli.command()
@click.option('--phase', type=click.Choice([p.value for p in Phase]), default=Phase.LEARNING.value, show_default=True)
@click.option('--run', 'run_index', type=int, help='Single run index (default: every run of the phase)')
@click.option('--out', type=click.Path(file_okay=False), default='traces', show_default=True)
@click.pass_context
@handle_errors
def simulate(ctx: click.Context, phase: str, run_index: Optional[int], out: str):
    """Simulate runs and write one trace per run"""
    config = _config(ctx)
    phase = Phase(phase)
    scenario = _scenario(ctx)
    count = config.runs.learning if phase is Phase.LEARNING else config.runs.detection
    runs = [run_index] if run_index is not None else range(count)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for run in runs:
        trace = simulate_run(config, scenario, phase, run)
        path = out_dir / f"{phase.value}_run{run}.tsv"
        StorageService.write_trace(trace, path)
        totals = trace.totals()
        click.echo(f"{path}: {len(trace)} events, injected {totals.injected}, delivered {totals.delivered}, "
                   f"misbehavior drops {totals.dropped_misbehavior}")


@cli.command()
@click.option('--traces', type=click.Path(exists=True, file_okay=False), default='traces', show_default=True)
@click.option('--out', type=click.Path(file_okay=False), default='learning', show_default=True)
@click.pass_context
@handle_errors
def learn(ctx: click.Context, traces: str, out: str):
    """Build self sets, ranges and detectors from learning traces"""
    config = _config(ctx)
    nodes = _scenario(ctx).topology.node_ids
    learning = learning_phase(config, _summaries(config, Path(traces), Phase.LEARNING, nodes))
    path = StorageService(out).write_learning(learning, Path(out))
    click.echo(f"Detectors for {len(learning.detectors)} of {len(learning.self_sets)} nodes written to {path.parent}")
    if learning.mean_grown_r is not None:
        click.echo(f"Mean grown r: {learning.mean_grown_r:.2f}")
    if learning.mean_shrunk_r is not None:
        click.echo(f"Mean shrunk r: {learning.mean_shrunk_r:.2f}")


@cli.command()
@click.option('--traces', type=click.Path(exists=True, file_okay=False), default='traces', show_default=True)
@click.option('--learning', 'learning_dir', type=click.Path(exists=True, file_okay=False), default='learning',
              show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), default=DETECTION_BUNDLE, show_default=True)
@click.pass_context
@handle_errors
def detect(ctx: click.Context, traces: str, learning_dir: str, out: str):
    """Run detection traces through stored detectors and classify nodes"""
    config = _config(ctx)
    scenario = _scenario(ctx)
    learning = StorageService(learning_dir).read_learning(Path(learning_dir))
    summaries = _summaries(config, Path(traces), Phase.DETECTION, scenario.topology.node_ids)
    detection = detection_phase(config, learning, summaries, scenario.misbehaving)
    verdicts = classify_nodes(config, learning, detection)
    StorageService.write_detection(detection, verdicts, Path(out))
    flagged = [v for v in verdicts if v.flagged]
    click.echo(f"{len(flagged)} node verdicts flagged over {len(detection.runs)} runs; written to {out}")


@cli.command()
@click.option('--learning', 'learning_dir', type=click.Path(exists=True, file_okay=False), default='learning',
              show_default=True)
@click.option('--detection', 'detection_path', type=click.Path(exists=True, dir_okay=False),
              default=DETECTION_BUNDLE, show_default=True)
@click.option('--traces', type=click.Path(exists=True, file_okay=False), help='Also write the per-window gene table')
@click.option('--out', type=click.Path(file_okay=False), default='report', show_default=True)
@click.pass_context
@handle_errors
def report(ctx: click.Context, learning_dir: str, detection_path: str, traces: Optional[str], out: str):
    """Compute metrics from a detection bundle"""
    config = _config(ctx)
    storage = StorageService(learning_dir)
    learning = storage.read_learning(Path(learning_dir))
    detection, verdicts = storage.read_detection(Path(detection_path))
    result = MetricsService(config).compute_metrics(config.name, learning, detection, verdicts)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    storage.write_metrics([result], out_dir / "metrics.csv")
    storage.write_report_json(result, out_dir / "report.json")
    if traces:
        nodes = _scenario(ctx).topology.node_ids
        rows = []
        for phase in Phase:
            rows.extend(gene_table(_summaries(config, Path(traces), phase, nodes), learning))
        storage.write_gene_table(rows, out_dir / "genes.csv")
    click.echo(f"Detection rate: {rate_text(result.detection_rate)} ({result.dns}/{result.ns}), "
               f"per-run {interval_text(result.detection_rate_ci)}")
    click.echo(f"False positives per run: {interval_text(result.false_positives)}")
    click.echo(f"Gene matches: {result.gene_usage.per_gene} "
               f"(single {result.gene_usage.single}, multiple {result.gene_usage.multiple})")
    click.echo(f"Report written to {out_dir}")


@cli.command()
@click.option('--out', type=click.Path(file_okay=False), default='sweep', show_default=True)
@click.pass_context
@handle_errors
def sweep(ctx: click.Context, out: str):
    """Run every cell of the config's grid and write metrics.csv"""
    config = _config(ctx)
    if ctx.obj["topology"]:
        raise ConfigError("--topology is not supported by sweep; set topology.seed instead")
    reports = SweepService(config).run()
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    StorageService.write_metrics(reports, out_dir / "metrics.csv")
    (out_dir / "config.yaml").write_text(config_to_yaml(config))
    for r in reports:
        if r.status == "failed":
            click.echo(f"  {r.cell}: FAILED {r.error}", err=True)
        else:
            click.echo(f"  {r.cell}: dr {rate_text(r.detection_rate)} ({r.dns}/{r.ns}), "
                       f"fp {r.false_positives_total}")
    click.echo(f"{len(reports)} cells written to {out_dir / 'metrics.csv'}")


@cli.command()
@click.argument('config_file', type=click.Path(exists=True, dir_okay=False))
@click.option('--name', required=True, help='Experiment name')
@click.option('--replace', is_flag=True, help='Replace existing results')
@click.option('--run', 'run_after', is_flag=True, help='Run the sweep after uploading')
def submit(config_file: str, name: str, replace: bool, run_after: bool):
    """Upload an experiment file to the API"""
    config_path = Path(config_file)
    if config_path.suffix.lower() not in ['.json', '.yaml', '.yml']:
        click.echo("Error: File must be JSON or YAML", err=True)
        sys.exit(EXIT_CONFIG_ERROR)

    try:
        with open(config_path, 'rb') as f:
            response = requests.post(
                f"{API_BASE_URL}/experiments/upload",
                files={'file': (config_path.name, f)},
                data={'name': name, 'replace_existing': replace},
            )
        if response.status_code != 200:
            click.echo(f"HTTP {response.status_code}: {response.text}", err=True)
            sys.exit(1)
        result = response.json()
        if not result.get('success'):
            click.echo(f"Failed: {result.get('message', 'Unknown error')}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        config_id = result['config_info']['id']
        click.echo(f"Uploaded {name} v{result.get('version')} (config id {config_id})")

        if run_after:
            response = requests.post(f"{API_BASE_URL}/experiments/{config_id}/run")
            response.raise_for_status()
            _echo_results(response.json().get('results', []))

    except requests.ConnectionError:
        click.echo("Cannot connect to server (is it running?)", err=True)
        sys.exit(1)
    except requests.HTTPError as e:
        click.echo(f"API error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.argument('config_id', type=int)
def results(config_id: int):
    """Show stored cell results of an uploaded config"""
    try:
        response = requests.get(f"{API_BASE_URL}/experiments/{config_id}/results")
        if response.status_code == 404:
            click.echo(f"No experiment config {config_id}", err=True)
            sys.exit(1)
        response.raise_for_status()
        _echo_results(response.json())
    except requests.ConnectionError:
        click.echo("Cannot connect to API", err=True)
        sys.exit(1)


def _echo_results(cells: list):
    if not cells:
        click.echo("No results yet")
    for cell in cells:
        metrics = cell.get('metrics') or {}
        if cell.get('status') == 'failed':
            click.echo(f"  {cell['cell']}: FAILED {cell.get('error')}")
        else:
            click.echo(f"  {cell['cell']}: dr {metrics.get('detection_rate')} "
                       f"({metrics.get('dns')}/{metrics.get('ns')}), fp {metrics.get('false_positives_total')}")


if __name__ == '__main__':
    cli()
