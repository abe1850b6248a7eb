"""Benchmark and maintenance CLI.

Subcommands mirror the workload methodology: `fill` populates a fresh
database and records the key-census descriptor, `measure` runs a timed op
mix against it, `indexbench` microbenchmarks the two persistent index
formats, and `relocate` runs one reclamation pass.  Exits nonzero when a
run-level invariant check fails.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

import click

from . import bench, db as db_mod
from .bench import (BENCH_KEYSPACE, IndexFormat, KeyCensus, Ratio, ReadOp,
                    Report, WorkloadSpec, bench_db_config, run_fill,
                    run_index_microbench, run_measure)
from .relocation import RelocationConfig, RelocationStrategy

CENSUS_FILE = "census.json"

_dir_option = click.option(
    "--dir", "directory", envvar="WALSTORE_DIR", required=True,
    type=click.Path(file_okay=False),
    help="Database directory (env: WALSTORE_DIR).")


def _emit(report: Report, as_json: bool) -> None:
    click.echo(report.to_json_line())
    if not as_json:
        click.echo(report.to_table())


@click.group()
def main() -> None:
    """walstore benchmark harness."""


@main.command()
@_dir_option
@click.option("--fill-bytes", type=int, default=1 << 30, show_default=True,
              help="Target database size for the fill phase.")
@click.option("--key-size", type=int, default=32, show_default=True)
@click.option("--value-size", type=int, default=1024, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fragment-mib", type=int, default=64, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output only.")
def fill(directory, fill_bytes, key_size, value_size, seed, fragment_mib, as_json):
    """Populate a fresh database with deterministic random entries."""
    spec = WorkloadSpec(target_fill_bytes=fill_bytes, key_size=key_size,
                        value_size=value_size, seed=seed)
    config = bench_db_config(directory,
                             fragment_size=fragment_mib * 1024 * 1024)
    handle = db_mod.open(config)
    try:
        census = run_fill(handle, spec)
        handle.flush_durability()
        state = handle.metrics_snapshot()
        storage = handle.value_wal.disk_bytes()
    finally:
        handle.close()
    Path(directory, CENSUS_FILE).write_text(json.dumps(census.descriptor()))
    report = Report(
        kind="fill", ops_per_second=0.0, p50_latency_us=0.0, p99_latency_us=0.0,
        op_counts={"put": census.count}, storage_bytes_final=storage,
        write_amplification=(state.wal_bytes_written / state.logical_bytes_ingested
                             if state.logical_bytes_ingested else 0.0),
        counters={}, params={"seed": seed, "count": census.count})
    _emit(report, as_json)


@main.command()
@_dir_option
@click.option("--ratio", type=click.Choice([r.value for r in Ratio]),
              default=Ratio.RW50.value, show_default=True)
@click.option("--read-op", type=click.Choice([o.value for o in ReadOp]),
              default=ReadOp.GET.value, show_default=True)
@click.option("--theta", type=float, default=0.0, show_default=True,
              help="Zipf skew over recency ranks; 0 is homogeneous.")
@click.option("--value-size", type=int, default=1024, show_default=True)
@click.option("--duration", type=float, default=60.0, show_default=True)
@click.option("--cooldown", type=float, default=0.0, show_default=True)
@click.option("--workers", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--relocation", type=click.Choice(["on", "off"]), default="off",
              show_default=True, help="Background relocation during the run.")
@click.option("--json", "as_json", is_flag=True)
def measure(directory, ratio, read_op, theta, value_size, duration, cooldown,
            workers, seed, relocation, as_json):
    """Run the timed measurement phase against a filled database."""
    census_path = Path(directory, CENSUS_FILE)
    if not census_path.exists():
        raise click.ClickException(f"no census at {census_path}; run fill first")
    census = KeyCensus.from_descriptor(json.loads(census_path.read_text()))
    spec = WorkloadSpec(
        target_fill_bytes=0, key_size=census.key_size, value_size=value_size,
        read_write_ratio=Ratio(ratio), read_op=ReadOp(read_op),
        zipf_theta=theta, duration=duration, cooldown=cooldown,
        relocation=relocation == "on", seed=seed, workers=workers)
    config = bench_db_config(directory, relocation=spec.relocation)
    handle = db_mod.open(config)
    try:
        report = run_measure(handle, spec, census)
    finally:
        handle.close()
    _emit(report, as_json)
    if not _mix_ok(spec, report):
        click.echo("invariant violation: op mix drifted past 1%", err=True)
        sys.exit(2)


def _mix_ok(spec: WorkloadSpec, report: Report) -> bool:
    total = sum(report.op_counts.values())
    if total < 1000:
        return True  # too few ops for the 1% fidelity bound to be meaningful
    writes = report.op_counts["put"]
    target = {Ratio.W100: 1.0, Ratio.R100: 0.0, Ratio.RW50: 0.5}[spec.read_write_ratio]
    return abs(writes / total - target) <= 0.01


@main.command()
@click.option("--dir", "directory", envvar="WALSTORE_DIR", default=None,
              type=click.Path(file_okay=False),
              help="Scratch directory for generated index files.")
@click.option("--files", type=int, default=25, show_default=True)
@click.option("--entries", type=int, default=100_000, show_default=True)
@click.option("--lookups", type=int, default=10_000, show_default=True)
@click.option("--windows", default="100,200,400,800,1600,3200",
              show_default=True, help="Comma-separated window sizes to sweep.")
@click.option("--format", "fmt", type=click.Choice([f.value for f in IndexFormat]
                                                   + ["both"]),
              default="both", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def indexbench(directory, files, entries, lookups, windows, fmt, seed, as_json):
    """Microbenchmark the optimistic and header-based index formats."""
    window_sizes = [int(w) for w in windows.split(",") if w]
    formats = [IndexFormat.OPTIMISTIC, IndexFormat.HEADER] if fmt == "both" \
        else [IndexFormat(fmt)]
    scratch = directory or tempfile.mkdtemp(prefix="walstore-indexbench-")
    failed = False
    for chosen in formats:
        reports = run_index_microbench(files, entries, lookups, window_sizes,
                                       chosen, scratch, seed=seed)
        for report in reports:
            _emit(report, as_json)
            if chosen is IndexFormat.HEADER:
                per_lookup = report.counters["reads"] / max(lookups, 1)
                if per_lookup != 2.0:
                    click.echo("invariant violation: header lookup did not "
                               f"use exactly 2 reads (got {per_lookup})", err=True)
                    failed = True
    if failed:
        sys.exit(2)


@main.command()
@_dir_option
@click.option("--strategy", type=click.Choice([s.value for s in RelocationStrategy]),
              default=RelocationStrategy.WAL_BASED.value, show_default=True)
@click.option("--cutoff", type=int, default=None,
              help="Reclaim target position; defaults to everything processed.")
@click.option("--json", "as_json", is_flag=True)
def relocate(directory, strategy, cutoff, as_json):
    """Run one synchronous relocation pass and report reclamation."""
    config = bench_db_config(directory)
    handle = db_mod.open(config)
    try:
        before = handle.value_wal.disk_bytes()
        result = handle.trigger_relocation(RelocationConfig(
            strategy=RelocationStrategy(strategy), cutoff=cutoff))
        after = handle.value_wal.disk_bytes()
    finally:
        handle.close()
    report = Report(
        kind="relocate", ops_per_second=0.0, p50_latency_us=0.0,
        p99_latency_us=0.0,
        op_counts={"relocated": result.relocated, "skipped": result.skipped},
        storage_bytes_final=after, write_amplification=0.0,
        counters={"fragments_deleted": result.fragments_deleted,
                  "bytes_before": before, "bytes_after": after,
                  "watermark": result.watermark},
        params={"strategy": strategy})
    _emit(report, as_json)


if __name__ == "__main__":
    main()
