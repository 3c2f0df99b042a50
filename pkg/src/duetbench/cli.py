"""Command line interface.

Every option can also be given as an environment variable named
``DUETBENCH_<SUBCOMMAND>_<OPTION>``, e.g. ``DUETBENCH_RUN_THREADS=6``.
Failures exit with the code of the raised error (see ``duetbench.errors``).
"""

from __future__ import annotations

import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

import click

from duetbench.analysis import AnalysisOptions, analyze_directory, render_fp_table, write_analysis
from duetbench.core import Endpoint, PhaseConfig, Version, write_results
from duetbench.errors import ConfigError, DuetError
from duetbench.isolation import IsolationBackend, probe_backend
from duetbench.noise import NoiseConfig, schedule_noise
from duetbench.orchestrator import (
    REFERENCE_THREAD_GRID,
    ExperimentConfig,
    apply_overrides,
    dump_config,
    load_config,
    run_experiment,
    run_sweep,
)
from duetbench.sut import SutConfig, serve
from duetbench.workload import WorkloadPlan, run_workload

log = logging.getLogger("duetbench.cli")

BACKENDS = click.Choice([b.value for b in IsolationBackend])


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _terminate_cleanly() -> None:
    """Turn SIGTERM into SystemExit so experiment teardown still runs."""

    def handler(signum, frame):
        raise SystemExit(128 + signum)

    signal.signal(signal.SIGTERM, handler)


def _thread_list(value: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(x) for x in value.split(",") if x.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma separated integers, got {value!r}")
    if not counts or min(counts) < 0:
        raise click.BadParameter("need at least one non-negative thread count")
    return counts


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except DuetError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


@click.group(cls=_Group, context_settings={"auto_envvar_prefix": "DUETBENCH", "show_default": True})
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logging.")
def cli(verbose: int) -> None:
    """Duet benchmarking with CPU noise injection on a single host."""
    _setup_logging(verbose)


@cli.command()
@click.option("--port", type=int, default=8080)
@click.option("--host", default="127.0.0.1")
@click.option("--seed", type=int, default=1, help="Dataset seed.")
@click.option("--destinations", type=int, default=20)
@click.option("--flights", type=int, default=500)
@click.option("--seats-per-flight", type=int, default=60)
@click.option("--work-factor", type=int, default=20_000, help="Busy-loop iterations per request.")
def sut(port, host, seed, destinations, flights, seats_per_flight, work_factor):
    """Serve the flight booking system under test."""
    config = SutConfig(listen_port=port, listen_host=host, rng_seed=seed, n_destinations=destinations,
                       n_flights=flights, seats_per_flight=seats_per_flight, work_factor=work_factor)
    logging.getLogger("duetbench").setLevel(logging.INFO)
    serve(config)


@cli.command()
@click.option("--threads", type=int, default=0, help="Number of busy workers.")
@click.option("--max-cpu", type=float, default=100.0, help="Per-worker CPU cap in percent.")
@click.option("--duration", type=float, default=300.0, help="Seconds of noise.")
@click.option("--window-ms", type=float, default=100.0, help="Duty-cycle window.")
@click.option("--mode", type=click.Choice(["process", "thread"]), default="process")
@click.option("--start-offset", type=float, default=0.0, help="Seconds after --epoch to start.")
@click.option("--epoch", type=float, default=None, help="Wall-clock epoch; defaults to now.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None,
              help="JSON-lines event log.")
def noise(threads, max_cpu, duration, window_ms, mode, start_offset, epoch, log_path):
    """Generate CPU noise, optionally inside a scheduled window."""
    config = NoiseConfig(threads=threads, max_cpu_pct=max_cpu, duration_s=duration,
                         window_ms=window_ms, mode=mode)
    epoch = time.time() if epoch is None else epoch

    def event(kind: str, **fields) -> None:
        if log_path:
            with open(log_path, "a") as f:
                f.write(json.dumps({"event": kind, "wall": time.time(), **fields}) + "\n")

    event("scheduled", config=config.to_dict(), epoch=epoch, start_offset_s=start_offset)
    stop = threading.Event()
    try:
        report = schedule_noise(config, start_offset, epoch, stop)
    except KeyboardInterrupt:
        stop.set()
        event("interrupted")
        raise
    event("finished", report=report.to_dict())
    click.echo(json.dumps(report.to_dict()))


@cli.command()
@click.option("--target", required=True, help="Base URL of the SUT, e.g. http://127.0.0.1:8080")
@click.option("--version", "version", type=click.Choice([v.value for v in Version]), default="V1")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Results JSONL file.")
@click.option("--epoch", type=float, default=None, help="Wall-clock start; defaults to now.")
@click.option("--s1-vus", type=int, default=50)
@click.option("--s1-iterations", type=int, default=2000)
@click.option("--s2-vus", type=int, default=10)
@click.option("--s2-iterations", type=int, default=380)
@click.option("--timeout-ms", type=float, default=10_000)
@click.option("--seed", type=int, default=0)
@click.option("--duration", type=float, default=1800.0)
@click.option("--noise-start", type=float, default=200.0)
@click.option("--noise-stop", type=float, default=500.0)
@click.option("--warmup", type=float, default=60.0)
@click.option("--cooldown", type=float, default=60.0)
@click.option("--max-duration", type=float, default=None, help="Stop issuing requests after this many seconds.")
def workload(target, version, out, epoch, s1_vus, s1_iterations, s2_vus, s2_iterations, timeout_ms,
             seed, duration, noise_start, noise_stop, warmup, cooldown, max_duration):
    """Drive one SUT with the closed-loop workload and write its results."""
    plan = WorkloadPlan(s1_vus=s1_vus, s1_iterations_per_vu=s1_iterations, s2_vus=s2_vus,
                        s2_iterations_per_vu=s2_iterations, request_timeout_ms=timeout_ms,
                        rng_seed=seed, max_duration_s=max_duration)
    phases = PhaseConfig(experiment_duration_s=duration, noise_start_s=noise_start,
                         noise_stop_s=noise_stop, warmup_s=warmup, cooldown_s=cooldown)
    results = run_workload(plan, target.rstrip("/"), phases, Version(version), epoch)
    write_results(out, results)
    click.echo(f"{len(results.samples)} samples written to {out}")


def _experiment_options(f):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML experiment config; flags override its values."),
        click.option("--out", default=None, help="Output directory."),
        click.option("--label", default=None, help="Experiment label used in reports."),
        click.option("--max-cpu", type=float, default=None, help="Per-worker noise CPU cap in percent."),
        click.option("--scale", type=float, default=None, help="Multiply every phase duration."),
        click.option("--seed", type=int, default=None, help="Seed for datasets and workload."),
        click.option("--isolation", type=BACKENDS, default=None),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _load(config_path, **overrides) -> ExperimentConfig:
    config = load_config(config_path) if config_path else ExperimentConfig()
    return apply_overrides(config, **overrides)


@cli.command()
@_experiment_options
@click.option("--threads", type=int, default=None, help="Noise worker count.")
@click.option("--print-config", is_flag=True, help="Print the effective config and exit.")
def run(config_path, out, label, max_cpu, scale, seed, isolation, threads, print_config):
    """Run one duet experiment."""
    config = _load(config_path, threads=threads, max_cpu=max_cpu, scale=scale, seed=seed,
                   isolation=isolation, out=out, label=label)
    if print_config:
        click.echo(dump_config(config), nl=False)
        return
    _terminate_cleanly()
    result = run_experiment(config)
    m = result.manifest
    click.echo(f"{m['status']}: {result.output_dir} "
               f"(driver start skew {m.get('driver_start_skew_ms', float('nan')):.1f} ms)")


@cli.command()
@_experiment_options
@click.option("--threads-list", default=",".join(map(str, REFERENCE_THREAD_GRID)),
              help="Comma separated noise thread counts.")
def sweep(config_path, out, label, max_cpu, scale, seed, isolation, threads_list):
    """Run one experiment per noise thread count."""
    counts = _thread_list(threads_list)
    config = _load(config_path, max_cpu=max_cpu, scale=scale, seed=seed, isolation=isolation,
                   out=out, label=label)
    _terminate_cleanly()
    for r in run_sweep(config, counts):
        click.echo(f"{r.manifest['status']}: {r.output_dir}")


def _analysis_options(f):
    options = [
        click.argument("results_dir", type=click.Path(exists=True, file_okay=False)),
        click.option("--out", default=None, help="Report directory; defaults to RESULTS_DIR/analysis."),
        click.option("--label", default=None, help="Override the experiment label."),
        click.option("--endpoint", "endpoints", multiple=True,
                     type=click.Choice([e.value for e in Endpoint]), help="Restrict to endpoints."),
        click.option("--iterations", type=int, default=10_000, help="Bootstrap iterations."),
        click.option("--confidence", type=float, default=0.99),
        click.option("--alpha", type=float, default=0.01, help="Rank-sum significance level."),
        click.option("--seed", type=int, default=0, help="Bootstrap seed."),
        click.option("--wilcoxon-input", type=click.Choice(["per_second", "raw"]), default="per_second"),
        click.option("--coupling", type=click.Choice(["common", "independent"]), default="common",
                     help="Bootstrap resampling of the two series."),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _analyze(results_dir, out, label, endpoints, iterations, confidence, alpha, seed, wilcoxon_input,
             coupling):
    options = AnalysisOptions(
        iterations=iterations, confidence=confidence, alpha=alpha, seed=seed,
        wilcoxon_input=wilcoxon_input, coupling=coupling,
        endpoints=tuple(Endpoint(e) for e in endpoints) or tuple(Endpoint),
    )
    try:
        analyses = analyze_directory(results_dir, options, label)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(out) if out else Path(results_dir) / "analysis"
    table = write_analysis(analyses, out)
    return analyses, table, out


@cli.command()
@_analysis_options
def analyze(**kwargs):
    """Run both change detectors on an experiment or sweep directory."""
    _, table, out = _analyze(**kwargs)
    click.echo(render_fp_table(table), nl=False)
    click.echo(f"written to {out}")


@cli.command()
@_analysis_options
@click.option("--format", "formats", multiple=True, type=click.Choice(["png", "pdf", "svg"]),
              default=("png",))
def report(formats, **kwargs):
    """Analyze and render boxplot figures next to the delimited output."""
    from duetbench.plotting import write_boxplots

    analyses, table, out = _analyze(**kwargs)
    figures = write_boxplots(analyses, out, tuple(formats))
    click.echo(render_fp_table(table), nl=False)
    for path in figures:
        click.echo(f"figure: {path}")
    click.echo(f"written to {out}")


@cli.command()
@click.option("--isolation", "backends", multiple=True, type=BACKENDS,
              help="Backends to probe; all by default.")
def probe(backends):
    """Report which isolation backends this host supports."""
    reports = [probe_backend(b) for b in (backends or [b.value for b in IsolationBackend])]
    click.echo(json.dumps([r.to_dict() for r in reports], indent=2))


def main() -> None:
    cli(prog_name="duetbench")


if __name__ == "__main__":
    main()
