"""Replay engine: accounting, capacity limits, adaptation, report files."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from conftest import BASE_PPS, CPU_HZ, QUEUE, SEED
from flowshift.engine import SimConfig, simulate_run, sweep_mon_window, write_report
from flowshift.errors import ConfigError
from flowshift.traces import (
    NS_PER_S,
    SyntheticProfile,
    Trace,
    generate_synthetic,
    make_three_phase,
    scale_trace,
    str_to_ip,
)


def _flat_trace(n, gap_ns=10_000_000, size=100, proto=6, n_flows=1):
    ts = np.arange(n, dtype=np.int64) * gap_ns
    sport = (1000 + (np.arange(n) % n_flows)).astype(np.int32)
    return Trace(
        ts_ns=ts,
        src_ip=np.full(n, str_to_ip("10.0.0.1"), dtype=np.uint32),
        dst_ip=np.full(n, str_to_ip("172.16.0.1"), dtype=np.uint32),
        src_port=sport,
        dst_port=np.full(n, 443, dtype=np.int32),
        proto=np.full(n, proto, dtype=np.int16),
        size=np.full(n, size, dtype=np.int64),
        tcp_flags=np.zeros(n, dtype=np.int16),
        duration_ns=int(ts[-1]) + 1 if n else 0,
    )


# --- hard accounting ----------------------------------------------------------

def test_unconstrained_capacity_processes_everything(video_front, video_catalog):
    cfg = SimConfig(cpu_hz=10**9, queue_capacity=8, mode="static:1")
    rep = simulate_run(_flat_trace(3), cfg, video_front, video_catalog)
    assert rep.totals["processed"] == 3
    assert rep.totals["dropped"] == 0


def test_starved_cpu_fills_queue_then_drops(video_front, video_catalog):
    # Cycle budget far below the base packet cost: nothing ever finishes, the
    # eight queue slots fill, and the remaining 92 arrivals bounce.
    cfg = SimConfig(cpu_hz=1, queue_capacity=8, mode="static:1",
                    swap_enabled=False)
    rep = simulate_run(_flat_trace(100), cfg, video_front, video_catalog)
    assert rep.totals["processed"] == 0
    assert rep.totals["dropped"] == 92
    assert rep.totals["residual_queue"] == 8


def test_conservation_on_random_workloads(video_front, video_catalog):
    rng = np.random.default_rng(31)
    for _ in range(10):
        trace = generate_synthetic(SyntheticProfile(
            duration_s=float(rng.integers(2, 6)),
            target_pps=float(rng.integers(50, 400)),
            seed=int(rng.integers(0, 1 << 16)),
        ))
        cfg = SimConfig(
            cpu_hz=int(rng.integers(50_000, 400_000)),
            queue_capacity=int(rng.integers(8, 256)),
            export_window=float(rng.integers(2, 10)),
            swap_enabled=bool(rng.integers(0, 2)),
            mode="adaptive" if rng.integers(0, 2) else f"static:{rng.integers(1, 10)}",
        )
        rep = simulate_run(trace, cfg, video_front, video_catalog)
        t = rep.totals
        assert t["injected"] == t["processed"] + t["dropped"] + t["residual_queue"]
        assert t["injected"] + t["bypassed"] == len(trace)


def test_unsupported_protocols_bypass_pipeline(video_front, video_catalog):
    tr = _flat_trace(10, proto=1)  # ICMP
    cfg = SimConfig(cpu_hz=10**6, queue_capacity=8)
    rep = simulate_run(tr, cfg, video_front, video_catalog)
    assert rep.totals["bypassed"] == 10
    assert rep.totals["injected"] == 0


def test_empty_trace_produces_zero_report(video_front, video_catalog):
    rep = simulate_run(Trace.empty(), SimConfig(), video_front, video_catalog)
    assert rep.totals["injected"] == 0
    assert rep.seconds == []
    assert rep.accuracy_summary["median"] is None


# --- selection dynamics -------------------------------------------------------

def test_zero_load_climbs_to_top_and_stays(video_front, video_catalog):
    tr = generate_synthetic(SyntheticProfile(duration_s=120.0, target_pps=20,
                                             seed=SEED))
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)
    rep = simulate_run(tr, cfg, video_front, video_catalog)
    assert rep.totals["dropped"] == 0
    assert all(ev.reason == "increase" for ev in rep.switches)
    assert [ev.new_index for ev in rep.switches] == list(range(2, 10))
    assert rep.seconds[-1].selected_index == 9


def test_static_mode_never_switches(video_front, video_catalog, short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE, mode="static:5")
    rep = simulate_run(short_trace, cfg, video_front, video_catalog)
    assert rep.switches == []
    assert {s.selected_index for s in rep.seconds} == {5}
    assert {s.accuracy for s in rep.seconds} == {video_front.accuracy_of(5)}


def test_static_index_out_of_range_rejected(video_front, video_catalog):
    cfg = SimConfig(mode="static:10")
    with pytest.raises(ConfigError):
        simulate_run(_flat_trace(3), cfg, video_front, video_catalog)


def test_more_cpu_never_hurts(video_front, video_catalog, short_trace):
    losses = []
    for hz in (100_000, 200_000, 400_000):
        cfg = SimConfig(cpu_hz=hz, queue_capacity=QUEUE, mode="static:9")
        rep = simulate_run(short_trace, cfg, video_front, video_catalog)
        losses.append(rep.totals["dropped"])
    assert losses[0] >= losses[1] >= losses[2]


def test_adaptive_beats_midrange_static_on_day_profile(day_run, video_front):
    adaptive = day_run("adaptive")
    static3 = day_run("static:3")
    assert adaptive.totals["dropped"] < static3.totals["dropped"]
    assert adaptive.accuracy_summary["median"] >= video_front.accuracy_of(2)


def test_peak_onset_triggers_multiple_decreases(video_front, video_catalog):
    tr = make_three_phase(BASE_PPS, 60.0, seed=SEED + 1)
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE, mon_window=4.0)
    rep = simulate_run(tr, cfg, video_front, video_catalog)
    cuts_in_peak = [ev for ev in rep.switches
                    if ev.reason == "drop" and 60.0 <= ev.time_s < 120.0]
    assert len(cuts_in_peak) >= 2


# --- exports ------------------------------------------------------------------

def test_export_cadence_and_final_flush(video_front, video_catalog, short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE, export_window=10.0)
    rep = simulate_run(short_trace, cfg, video_front, video_catalog)
    # 45 s of trace: scheduled exports at 10/20/30/40 plus the final flush.
    assert rep.totals["exports"] == 5
    assert rep.totals["skipped_exports"] == 0
    windows = {f["window_id"] for f in rep.flows}
    assert windows == set(range(5))


def test_halt_mode_export_drops_swap_mode_none(video_front, video_catalog):
    tr = generate_synthetic(SyntheticProfile(duration_s=70.0, target_pps=BASE_PPS,
                                             seed=SEED + 2))
    base = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE, mode="static:2",
                     export_window=30.0, export_cost_per_flow=400)
    halted = simulate_run(tr, replace(base, swap_enabled=False),
                          video_front, video_catalog)
    swapped = simulate_run(tr, base, video_front, video_catalog)
    assert halted.totals["export_window_drops"] > 0
    assert swapped.totals["export_window_drops"] == 0
    assert swapped.totals["dropped"] < halted.totals["dropped"]


def test_collect_flows_off_keeps_totals(video_front, video_catalog, short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)
    with_flows = simulate_run(short_trace, cfg, video_front, video_catalog)
    without = simulate_run(short_trace, replace(cfg, collect_flows=False),
                           video_front, video_catalog)
    assert without.flows == []
    assert without.totals == with_flows.totals


# --- sweep helper -------------------------------------------------------------

def test_sweep_single_value_matches_plain_run(video_front, video_catalog,
                                              short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)
    rows = sweep_mon_window(short_trace, cfg, video_front, video_catalog, [8.0])
    rep = simulate_run(short_trace, replace(cfg, collect_flows=False),
                       video_front, video_catalog)
    assert len(rows) == 1
    assert rows[0]["loss_pct"] == rep.totals["loss_pct"]
    assert rows[0]["median_accuracy"] == rep.accuracy_summary["median"]


def test_sweep_repeated_value_identical(video_front, video_catalog, short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)
    rows = sweep_mon_window(short_trace, cfg, video_front, video_catalog,
                            [5.0, 5.0])
    assert rows[0]["loss_pct"] == rows[1]["loss_pct"]
    assert rows[0]["dropped"] == rows[1]["dropped"]


# --- config validation --------------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        SimConfig(queue_capacity=0)
    with pytest.raises(ConfigError):
        SimConfig(mode="nonsense")
    with pytest.raises(ConfigError):
        SimConfig(poll_interval=0.0)
    with pytest.raises(ConfigError):
        SimConfig(dec_factor=1.5)


def test_config_static_index_parsing():
    assert SimConfig(mode="static:7").static_index == 7
    assert SimConfig(mode="adaptive").static_index is None


# --- report files -------------------------------------------------------------

def test_write_report_files_and_determinism(tmp_path, video_front,
                                            video_catalog, short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)
    rep1 = simulate_run(short_trace, cfg, video_front, video_catalog)
    rep2 = simulate_run(short_trace, cfg, video_front, video_catalog)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    write_report(rep1, d1)
    write_report(rep2, d2)
    names = ["timeseries.csv", "summary.json", "switches.csv", "flows.jsonl"]
    for name in names:
        assert (d1 / name).exists()
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    header = (d1 / "timeseries.csv").read_text().splitlines()[0]
    assert header == "t,offered_pps,processed_pps,dropped,selected_index,accuracy"
    first_flow_line = (d1 / "flows.jsonl").read_text().splitlines()[0]
    assert "flowshift/flows-v1" in first_flow_line


def test_second_stats_rates_sum_to_totals(video_front, video_catalog,
                                          short_trace):
    cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)
    rep = simulate_run(short_trace, cfg, video_front, video_catalog)
    assert sum(s.offered for s in rep.seconds) == rep.totals["injected"]
    assert sum(s.dropped for s in rep.seconds) == rep.totals["dropped"]
    assert sum(s.processed for s in rep.seconds) == rep.totals["processed"]
