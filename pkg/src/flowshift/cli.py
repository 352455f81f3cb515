"""Command line front end.

Subcommands:
  profile    build the cost/accuracy pool from a catalog and print it
  synth      generate a synthetic trace file
  run        replay a trace and write report files to a run directory
  sweep      re-run one trace across a range of monitoring windows
  report     render figures and comparison tables from finished run dirs
  calibrate  micro-benchmark feature costs and write a measured catalog

Exit codes: 0 success, 1 usage error, 2 bad input (catalog, trace, or
config), 3 internal accounting violation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import gc
import hashlib
import json
import logging
import statistics
import sys
import time
from pathlib import Path

from . import __version__
from .catalog import (
    Catalog,
    build_front,
    load_catalog,
    mask_to_ids,
    preset_path,
    save_catalog,
    save_front,
)
from .engine import (
    RunReport,
    SecondStats,
    SimConfig,
    simulate_run,
    sweep_mon_window,
    write_report,
)
from .errors import CatalogError, ConfigError, FlowshiftError, InvariantViolation, TraceError
from .figures import render_run_figure, render_sweep_figure, render_tradeoff_figure
from .pipeline import PinTable, Worker, WorkerRole, process_packet
from .selector import SwitchEvent
from .traces import (
    SyntheticProfile,
    Trace,
    generate_synthetic,
    load_trace,
    make_three_phase,
    save_trace,
    scale_trace,
)

log = logging.getLogger("flowshift.cli")

MANIFEST_SCHEMA = "flowshift/manifest-v1"

_CONFIG_KEYS = {f.name for f in dataclasses.fields(SimConfig)}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this tool reserves 2 for bad input."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_catalog(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    if "/" not in arg and "." not in arg:
        return preset_path(arg)  # bare word: try the packaged presets
    raise FileNotFoundError(f"catalog not found: {arg}")


def _load_config_file(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    return doc


def _build_config(args) -> SimConfig:
    """Precedence: command line flag > config file > built-in default."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(_load_config_file(args.config))
    for flag, key in (
        ("mode", "mode"),
        ("mon_window", "mon_window"),
        ("dec_factor", "dec_factor"),
        ("export_window", "export_window"),
        ("queue_capacity", "queue_capacity"),
        ("cpu_hz", "cpu_hz"),
        ("poll_interval", "poll_interval"),
        ("seed", "seed"),
        ("swap", "swap_enabled"),
        ("export_cost_per_flow", "export_cost_per_flow"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "floor_decrease", False):
        values["floor_decrease"] = True
    return SimConfig(**values)


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="JSON file with engine settings; flags override it")
    p.add_argument("--mode", help="adaptive (default) or static:<i>")
    p.add_argument("--mon-window", dest="mon_window", type=float,
                   help="quiet seconds before stepping the selection up")
    p.add_argument("--dec-factor", dest="dec_factor", type=float,
                   help="multiplier applied to the selection on drops")
    p.add_argument("--floor-decrease", action="store_true",
                   help="round the decreased selection down instead of up")
    p.add_argument("--export-window", dest="export_window", type=float,
                   help="seconds between flow table exports")
    p.add_argument("--export-cost-per-flow", dest="export_cost_per_flow",
                   type=int, help="cycles charged per exported flow record")
    p.add_argument("--queue-capacity", dest="queue_capacity", type=int)
    p.add_argument("--cpu-hz", dest="cpu_hz", type=int,
                   help="worker budget in cycles per second")
    p.add_argument("--poll-interval", dest="poll_interval", type=float)
    p.add_argument("--swap", action=argparse.BooleanOptionalAction, default=None,
                   help="hand traffic to the standby worker during exports")
    p.add_argument("--seed", type=int, help="recorded in the run manifest")


def _add_catalog_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--catalog", default="video",
                   help="catalog file, or a preset name (video, service)")
    p.add_argument("--epsilon", type=float, default=0.001,
                   help="minimum accuracy gain kept when thinning the pool")


# --- profile ------------------------------------------------------------------

def cmd_profile(args) -> int:
    path = _resolve_catalog(args.catalog)
    catalog = load_catalog(path)
    front = build_front(catalog, epsilon=args.epsilon)
    print(f"catalog: {catalog.name} ({len(catalog.features)} features, "
          f"{len(catalog.accuracy_map)} labelled sets)")
    print(f"pool: {front.k_max} retained (epsilon={args.epsilon})")
    print(f"{'idx':>3}  {'cost':>6}  {'accuracy':>8}  features")
    for i in range(1, front.k_max + 1):
        m = front.model(i)
        ids = ",".join(str(x) for x in mask_to_ids(m.feature_mask))
        print(f"{i:>3}  {m.cost:>6}  {m.accuracy:>8.4f}  [{ids}]")
    if args.out:
        save_front(front, catalog, args.out)
        print(f"wrote {args.out}")
    return 0


# --- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.three_phase:
        trace = make_three_phase(args.pps, args.phase_seconds, seed=args.seed)
    else:
        profile = SyntheticProfile(duration_s=args.duration, target_pps=args.pps,
                                   seed=args.seed)
        trace = generate_synthetic(profile)
    save_trace(trace, args.out)
    print(f"wrote {args.out}: {len(trace)} packets, "
          f"{trace.duration_ns / 1e9:.1f}s, {trace.mean_pps():.1f} pkt/s")
    return 0


# --- run ----------------------------------------------------------------------

def _write_manifest(args, config: SimConfig, catalog_path: Path,
                    trace_path: str, trace: Trace, out: Path) -> None:
    from .engine import _config_dict
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "catalog": {"source": str(catalog_path), "sha256": _sha256(catalog_path)},
        "trace": {
            "source": trace_path,
            "sha256": _sha256(trace_path),
            "packets": len(trace),
            "scale": args.scale,
        },
        "epsilon": args.epsilon,
        "config": _config_dict(config),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    catalog_path = _resolve_catalog(args.catalog)
    catalog = load_catalog(catalog_path)
    front = build_front(catalog, epsilon=args.epsilon)
    trace = load_trace(args.trace)
    if args.scale != 1.0:
        trace = scale_trace(trace, args.scale)
    config = _build_config(args)

    report = simulate_run(trace, config, front, catalog)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    _write_manifest(args, config, catalog_path, args.trace, trace, out)
    t = report.totals
    print(f"{out}: mode={config.mode} injected={t['injected']} "
          f"dropped={t['dropped']} loss={t['loss_pct']:.2f}% "
          f"switches={t['switches']} exports={t['exports']}")
    return 0


# --- sweep --------------------------------------------------------------------

def _parse_values(raw: str) -> list[float]:
    try:
        if ":" in raw:
            lo, hi = raw.split(":", 1)
            start, stop = float(lo), float(hi)
            if stop < start:
                raise ValueError
            out, v = [], start
            while v <= stop + 1e-9:
                out.append(round(v, 9))
                v += 1.0
            return out
        return [float(tok) for tok in raw.split(",") if tok]
    except ValueError:
        raise ConfigError(f"bad sweep values {raw!r}; use lo:hi or v1,v2,...") from None


def cmd_sweep(args) -> int:
    if args.param != "mon_window":
        raise ConfigError(f"unsupported sweep parameter: {args.param}")
    catalog_path = _resolve_catalog(args.catalog)
    catalog = load_catalog(catalog_path)
    front = build_front(catalog, epsilon=args.epsilon)
    trace = load_trace(args.trace)
    if args.scale != 1.0:
        trace = scale_trace(trace, args.scale)
    config = _build_config(args)
    values = _parse_values(args.windows)

    rows = sweep_mon_window(trace, config, front, catalog, values)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mon_window", "loss_pct", "dropped",
                                           "median_accuracy"])
        w.writeheader()
        w.writerows(rows)
    fig_path = render_sweep_figure(rows, str(out / "sweep.png"))
    for row in rows:
        print(f"mon_window={row['mon_window']:<5g} loss={row['loss_pct']:.3f}% "
              f"median_accuracy={row['median_accuracy']:.4f}")
    print(f"wrote {csv_path} and {fig_path}")
    return 0


# --- report -------------------------------------------------------------------

def _load_run_dir(run_dir: Path) -> RunReport:
    """Rebuild enough of a report from its files to render figures."""
    summary = json.loads((run_dir / "summary.json").read_text())
    seconds = []
    with (run_dir / "timeseries.csv").open() as fh:
        for row in csv.DictReader(fh):
            seconds.append(SecondStats(
                int(row["t"]), int(row["offered_pps"]), int(row["processed_pps"]),
                int(row["dropped"]), int(row["selected_index"]),
                float(row["accuracy"]),
            ))
    switches = []
    sw_path = run_dir / "switches.csv"
    if sw_path.exists():
        with sw_path.open() as fh:
            for row in csv.DictReader(fh):
                switches.append(SwitchEvent(
                    float(row["time_s"]), int(row["old_index"]),
                    int(row["new_index"]), row["reason"],
                ))
    return RunReport(
        seconds=seconds,
        totals=summary["totals"],
        accuracy_summary=summary["accuracy"],
        switches=switches,
        flows=[],
        config=summary["config"],
    )


def _discover_runs(paths: list[str]) -> list[Path]:
    dirs = []
    for raw in paths:
        p = Path(raw)
        if not p.exists():
            raise FileNotFoundError(f"no such run directory: {raw}")
        if (p / "summary.json").exists():
            dirs.append(p)
            continue
        found = sorted(child for child in p.iterdir()
                       if (child / "summary.json").exists())
        if not found:
            raise ConfigError(f"{raw}: no run directories (summary.json) found")
        dirs.extend(found)
    return dirs


def cmd_report(args) -> int:
    run_dirs = _discover_runs(args.runs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for run_dir in run_dirs:
        report = _load_run_dir(run_dir)
        label = run_dir.name
        render_run_figure(report, str(out / f"timeseries-{label}.png"))
        acc = report.accuracy_summary
        rows.append({
            "config_label": report.config.get("mode", label),
            "run": label,
            "loss_pct": report.totals["loss_pct"],
            "dropped": report.totals["dropped"],
            "injected": report.totals["injected"],
            "acc_median": acc["median"],
            "acc_q1": acc["q1"],
            "acc_q3": acc["q3"],
        })

    with (out / "scatter.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["run", "config_label", "loss_pct",
                                           "dropped", "injected", "acc_median",
                                           "acc_q1", "acc_q3"])
        w.writeheader()
        w.writerows(rows)
    plottable = [r for r in rows if r["acc_median"] is not None]
    if plottable:
        render_tradeoff_figure(plottable, str(out / "tradeoff.png"))
    print(f"report for {len(run_dirs)} run(s) -> {out}")
    return 0


# --- calibrate ----------------------------------------------------------------

def _time_chunk_ns(catalog: Catalog, chunk: list, mask: int) -> float:
    """Per-packet wall time for one pinned feature set over one chunk."""
    worker = Worker(0, WorkerRole.ACTIVE, 1 << 20)
    pins = PinTable()
    t0 = time.perf_counter_ns()
    for pkt in chunk:
        process_packet(worker, pkt, 1, mask, catalog, pins)
    return (time.perf_counter_ns() - t0) / len(chunk)


def _measure_pass(catalog: Catalog, chunk_list: list, reps: int) -> dict[int, float]:
    """One full timing pass: median per-chunk cost difference per feature."""
    medians = {}
    for f in catalog.features:
        mask = 1 << f.id
        diffs = []
        for chunk in chunk_list:
            # Time baseline and feature back to back on the same chunk and
            # keep only the difference, so shared bookkeeping cancels out.
            # The min over repetitions discards scheduler interruptions,
            # which only ever add time.
            base = min(_time_chunk_ns(catalog, chunk, 0) for _ in range(reps))
            feat = min(_time_chunk_ns(catalog, chunk, mask) for _ in range(reps))
            diffs.append(feat - base)
        medians[f.id] = statistics.median(diffs)
    return medians


def measure_feature_costs(catalog: Catalog, trace: Trace,
                          chunks: int = 32, reps: int = 2,
                          passes: int = 2) -> dict[int, int]:
    """Per-feature cycle costs at 1 cycle per nanosecond of wall time.

    The whole measurement runs twice and each feature keeps the lower of
    its two medians: a contended stretch of wall time can inflate one pass
    but not both, and inflation is the only failure mode left once the
    per-chunk min filters out short interruptions."""
    packets = list(trace)
    if not packets:
        raise ConfigError("calibration needs a trace with at least one packet")
    if len(packets) < 10_000:
        log.warning("calibrating on %d packets; expect noisy costs below 10000",
                    len(packets))
    # Cost pinning past a packet budget would stop the updaters mid-flow.
    bench_catalog = dataclasses.replace(catalog, first_n_packets=None)
    step = max(1, len(packets) // chunks)
    chunk_list = [packets[lo:lo + step]
                  for lo in range(0, len(packets), step)][:chunks]
    _time_chunk_ns(bench_catalog, chunk_list[0], 0)  # warm caches before timing
    gc.disable()  # a collection inside a timed chunk would skew its ratio
    try:
        rounds = [_measure_pass(bench_catalog, chunk_list, reps)
                  for _ in range(passes)]
    finally:
        gc.enable()
    return {f.id: max(1, round(min(r[f.id] for r in rounds)))
            for f in catalog.features}


def cmd_calibrate(args) -> int:
    catalog_path = _resolve_catalog(args.catalog)
    catalog = load_catalog(catalog_path)
    if args.trace:
        trace = load_trace(args.trace)
    else:
        profile = SyntheticProfile(duration_s=args.duration,
                                   target_pps=args.pps, seed=args.seed or 0)
        trace = generate_synthetic(profile)
    measured = measure_feature_costs(catalog, trace)

    print(f"{'id':>3}  {'feature':<14} {'catalog':>8}  {'measured':>8}")
    features = []
    for f in catalog.features:
        print(f"{f.id:>3}  {f.name:<14} {f.unit_cost:>8}  {measured[f.id]:>8}")
        features.append(dataclasses.replace(f, unit_cost=measured[f.id]))
    out_catalog = dataclasses.replace(
        catalog, features=tuple(features), name=f"{catalog.name}-measured")
    if args.out:
        save_catalog(out_catalog, args.out)
        print(f"wrote {args.out}")
    return 0


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowshift",
                     description="Adaptive flow monitoring replay toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    p = sub.add_parser("profile", help="build and print the candidate pool")
    _add_catalog_flags(p)
    p.add_argument("--out", help="also save the pool to this JSON file")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="generate a synthetic trace")
    p.add_argument("--out", required=True)
    p.add_argument("--pps", type=float, default=240.0,
                   help="target mean packet rate")
    p.add_argument("--duration", type=float, default=60.0,
                   help="seconds (single phase)")
    p.add_argument("--three-phase", action="store_true",
                   help="quiet/base/peak day profile instead of one flat phase")
    p.add_argument("--phase-seconds", type=float, default=600.0,
                   help="length of each phase with --three-phase")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="replay a trace into a run directory")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=float, default=1.0,
                   help="rate multiplier: >1 compresses time, <1 stretches it")
    _add_catalog_flags(p)
    _add_engine_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep the monitoring window over one trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--param", default="mon_window",
                   help="parameter to sweep (only mon_window is supported)")
    p.add_argument("--windows", default="1:10",
                   help="lo:hi (step 1) or comma separated values")
    p.add_argument("--scale", type=float, default=1.0)
    _add_catalog_flags(p)
    _add_engine_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="figures and tables from run directories")
    p.add_argument("runs", nargs="+",
                   help="run directories, or a parent holding several")
    p.add_argument("--out-dir", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("calibrate", help="measure per-feature costs on this host")
    _add_catalog_flags(p)
    p.add_argument("--trace", help="trace to sample; synthetic if omitted")
    p.add_argument("--pps", type=float, default=400.0)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the measured catalog here")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (CatalogError, TraceError, ConfigError, FileNotFoundError) as exc:
        print(f"flowshift: error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"flowshift: invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
