"""Deterministic replay of a packet trace over the worker pipeline.

Time advances on packet arrivals plus two fixed grids: selector polls and
export windows. Workers are fluid busy-polling cores: a packet holds its
receive-queue slot from arrival until its service completes, and service time
is the packet's cycle charge divided by the core clock. At equal timestamps
the order is: completed services, export boundaries, selector polls, then the
arriving packet. A service starting exactly at an event instant begins after
that event, so index switches at a poll apply to every later service start.

All counters are integers and every control decision derives from them, so a
run is bit-identical given the same trace, front, and config.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .catalog import Catalog, ParetoFront
from .errors import ConfigError, InvariantViolation
from .pipeline import (
    IndirectionTable,
    PinTable,
    Worker,
    WorkerRole,
    begin_export,
    canonical_flow_key,
    complete_export,
    post_process,
    process_packet,
)
from .selector import DropSignal, SelectorParams, SelectorState, SwitchEvent, on_poll
from .traces import NS_PER_S, PacketRecord, Trace

SUPPORTED_PROTOS = (6, 17)


@dataclass(frozen=True)
class SimConfig:
    cpu_hz: int = 200_000
    queue_capacity: int = 4096
    poll_interval: float = 1.0
    export_window: float = 30.0
    mode: str = "adaptive"  # "adaptive" or "static:<index>"
    mon_window: float = 8.0
    dec_factor: float = 0.5
    floor_decrease: bool = False
    swap_enabled: bool = True
    # Cycles to serialize one flow record; None means cpu_hz / 100_000, which
    # makes a 100k-flow export cost about one second of worker capacity.
    export_cost_per_flow: int | None = None
    flow_table_capacity: int = 65_536
    num_buckets: int = 256
    collect_flows: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.cpu_hz < 1:
            raise ConfigError(f"cpu_hz must be >= 1, got {self.cpu_hz}")
        if self.queue_capacity < 1:
            raise ConfigError(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if self.poll_interval <= 0 or self.export_window <= 0:
            raise ConfigError("poll_interval and export_window must be > 0")
        if self.mon_window <= 0:
            raise ConfigError(f"mon_window must be > 0, got {self.mon_window}")
        if not 0.0 < self.dec_factor < 1.0:
            raise ConfigError(
                f"dec_factor must be in (0, 1) exclusive, got {self.dec_factor}"
            )
        if self.mode != "adaptive" and self.static_index is None:
            raise ConfigError(
                f"mode must be 'adaptive' or 'static:<index>', got {self.mode!r}"
            )

    @property
    def static_index(self) -> int | None:
        if self.mode.startswith("static:"):
            try:
                return int(self.mode.split(":", 1)[1])
            except ValueError:
                return None
        return None

    @property
    def resolved_export_cost(self) -> int:
        if self.export_cost_per_flow is not None:
            return self.export_cost_per_flow
        return max(1, self.cpu_hz // 100_000)


class SecondStats(NamedTuple):
    t: int
    offered: int
    processed: int
    dropped: int
    selected_index: int
    accuracy: float


@dataclass
class RunReport:
    seconds: list[SecondStats]
    totals: dict
    accuracy_summary: dict
    switches: list[SwitchEvent]
    flows: list[dict]
    config: dict = field(default_factory=dict)

    @property
    def loss_pct(self) -> float:
        return self.totals["loss_pct"]


class RxQueue:
    """Finite receive queue. The head packet keeps its slot while in service;
    overflow arrivals bump rx_miss and vanish."""

    __slots__ = ("capacity", "q", "rx_miss")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.q: deque[PacketRecord] = deque()
        self.rx_miss = 0

    @property
    def occupancy(self) -> int:
        return len(self.q)


class _Wrt:
    """Engine-side runtime for one worker."""

    __slots__ = ("worker", "rxq", "clock", "busy_until",
                 "export_phase", "export_begin_ns", "export_end_ns", "win_start_ns")

    def __init__(self, worker: Worker, capacity: int):
        self.worker = worker
        self.rxq = RxQueue(capacity)
        self.clock = 0
        self.busy_until = None
        self.export_phase = None  # None | "drain" | "halt" | "busy"
        self.export_begin_ns = 0
        self.export_end_ns = 0
        self.win_start_ns = 0


class _Sim:
    def __init__(self, trace: Trace, config: SimConfig, front: ParetoFront,
                 catalog: Catalog):
        trace.validate()
        self.trace = trace
        self.config = config
        self.front = front
        self.catalog = catalog

        static = config.static_index
        if static is not None and not 1 <= static <= front.k_max:
            raise ConfigError(
                f"static index {static} out of range: front has models 1..{front.k_max}"
            )
        self.adaptive = static is None
        self.sel_params = SelectorParams(
            k_max=front.k_max,
            mon_window=config.mon_window,
            dec_factor=config.dec_factor,
            floor_decrease=config.floor_decrease,
        )
        self.sel_state = SelectorState(1, 0.0)
        self.cur_index = 1 if self.adaptive else static
        self.cur_mask = front.model(self.cur_index).feature_mask

        if config.swap_enabled:
            self.workers = [
                Worker(0, WorkerRole.ACTIVE, config.flow_table_capacity),
                Worker(1, WorkerRole.BACKUP, config.flow_table_capacity),
            ]
            self.table = IndirectionTable(0, 1, config.num_buckets)
        else:
            self.workers = [Worker(0, WorkerRole.ACTIVE, config.flow_table_capacity)]
            self.table = IndirectionTable(0, None, config.num_buckets)
        self.rts = [_Wrt(w, config.queue_capacity) for w in self.workers]
        self.pins = PinTable()

        self.end_ns = -(-trace.duration_ns // NS_PER_S) * NS_PER_S
        self.n_seconds = self.end_ns // NS_PER_S
        self.offered_s = [0] * self.n_seconds
        self.processed_s = [0] * self.n_seconds
        self.dropped_s = [0] * self.n_seconds

        self.injected = 0
        self.processed = 0
        self.bypassed = 0
        self.export_drops = 0
        self.last_poll_drops = 0
        self.switches: list[SwitchEvent] = []
        self.batches = []
        self.skipped_exports = 0

        self.poll_ns = int(round(config.poll_interval * NS_PER_S))
        self.export_ns = int(round(config.export_window * NS_PER_S))
        self.next_poll = self.poll_ns
        self.next_export = self.export_ns
        self.window_start = 0
        self.export_cost = config.resolved_export_cost

    def _dur(self, cycles: int) -> int:
        return (cycles * NS_PER_S) // self.config.cpu_hz

    def _advance(self, rt: _Wrt, until_ns: int) -> None:
        while True:
            if rt.busy_until is not None:
                if rt.busy_until <= until_ns:
                    rt.rxq.q.popleft()
                    sec = rt.busy_until // NS_PER_S
                    self.processed_s[min(sec, self.n_seconds - 1)] += 1
                    self.processed += 1
                    rt.clock = rt.busy_until
                    rt.busy_until = None
                    continue
                return
            phase = rt.export_phase
            if phase == "busy":
                if rt.export_end_ns <= until_ns:
                    self._finish_export(rt)
                    continue
                return
            if phase == "halt" or (phase == "drain" and not rt.rxq.q):
                n_flows = len(rt.worker.flow_table)
                cycles = n_flows * self.export_cost
                rt.worker.cycles_consumed += cycles
                rt.export_end_ns = max(rt.clock, rt.export_begin_ns) + self._dur(cycles)
                rt.export_phase = "busy"
                continue
            if rt.rxq.q and (rt.worker.role is WorkerRole.ACTIVE or phase == "drain"):
                pkt = rt.rxq.q[0]
                start = rt.clock if rt.clock > pkt.ts_ns else pkt.ts_ns
                if start >= until_ns:
                    return
                cycles = process_packet(rt.worker, pkt, self.cur_index,
                                        self.cur_mask, self.catalog, self.pins)
                rt.busy_until = start + self._dur(cycles)
                continue
            return

    def _finish_export(self, rt: _Wrt) -> None:
        batch = complete_export(rt.worker, rt.win_start_ns, rt.export_begin_ns)
        self.batches.append(batch)
        rt.clock = max(rt.clock, rt.export_end_ns)
        rt.export_phase = None
        if not self.config.swap_enabled:
            rt.worker.role = WorkerRole.ACTIVE  # nobody to hand traffic back from

    def _fire_export(self, t_ns: int) -> None:
        for rt in self.rts:
            self._advance(rt, t_ns)
        if self.config.swap_enabled:
            exp = self.rts[self.table.active_id]
            comp = self.rts[self.table.backup_id]
            if exp.export_phase is not None or comp.worker.role is not WorkerRole.BACKUP:
                self.skipped_exports += 1
                return
            begin_export(self.table, exp.worker, comp.worker, t_ns)
            exp.export_phase = "drain"
        else:
            exp = self.rts[0]
            if exp.export_phase is not None:
                self.skipped_exports += 1
                return
            begin_export(self.table, exp.worker, None, t_ns)
            exp.export_phase = "halt"
        exp.export_begin_ns = t_ns
        exp.win_start_ns = self.window_start
        self.window_start = t_ns

    def _fire_poll(self, t_ns: int) -> None:
        for rt in self.rts:
            self._advance(rt, t_ns)
        if not self.adaptive:
            return
        drops_total = sum(rt.rxq.rx_miss for rt in self.rts)
        n = drops_total - self.last_poll_drops
        self.last_poll_drops = drops_total
        signal = DropSignal(n, t_ns / NS_PER_S)
        self.sel_state, event = on_poll(self.sel_state, self.sel_params, signal,
                                        self.config.poll_interval)
        if event is not None:
            self.switches.append(event)
            self.cur_index = event.new_index
            self.cur_mask = self.front.model(self.cur_index).feature_mask

    def _fire_grid_until(self, t_ns: int) -> None:
        # Export boundaries outrank polls at the same instant.
        while True:
            g = min(self.next_poll, self.next_export)
            if g > t_ns or g > self.end_ns:
                return
            if self.next_export <= self.next_poll:
                self._fire_export(self.next_export)
                self.next_export += self.export_ns
            else:
                self._fire_poll(self.next_poll)
                self.next_poll += self.poll_ns

    def run(self) -> RunReport:
        cfg = self.config
        ts_l = self.trace.ts_ns.tolist()
        sip_l = self.trace.src_ip.tolist()
        dip_l = self.trace.dst_ip.tolist()
        sp_l = self.trace.src_port.tolist()
        dp_l = self.trace.dst_port.tolist()
        pr_l = self.trace.proto.tolist()
        sz_l = self.trace.size.tolist()
        fl_l = self.trace.tcp_flags.tolist()

        rts = self.rts
        table = self.table
        qcap = cfg.queue_capacity
        for i in range(len(ts_l)):
            t = ts_l[i]
            self._fire_grid_until(t)
            for rt in rts:
                self._advance(rt, t)
            proto = pr_l[i]
            if proto not in SUPPORTED_PROTOS:
                self.bypassed += 1
                continue
            pkt = PacketRecord(t, sip_l[i], dip_l[i], sp_l[i], dp_l[i],
                               proto, sz_l[i], fl_l[i])
            rt = rts[table.route(canonical_flow_key(pkt))]
            self.injected += 1
            self.offered_s[min(t // NS_PER_S, self.n_seconds - 1)] += 1
            if len(rt.rxq.q) >= qcap:
                rt.rxq.rx_miss += 1
                self.dropped_s[min(t // NS_PER_S, self.n_seconds - 1)] += 1
                if rt.export_phase is not None:
                    self.export_drops += 1
            else:
                rt.rxq.q.append(pkt)

        self._fire_grid_until(self.end_ns)
        for rt in rts:
            self._advance(rt, self.end_ns)
        return self._finalize()

    def _flush_remaining(self) -> None:
        # Anything still in a flow table at end of run goes out as a final
        # partial window, so no record is silently lost.
        from .pipeline import ExportBatch
        for rt in self.rts:
            if rt.worker.flow_table:
                self.batches.append(ExportBatch(
                    rt.worker.id, self.window_start, self.end_ns,
                    list(rt.worker.flow_table.values()),
                ))
                rt.worker.flow_table.clear()

    def _finalize(self) -> RunReport:
        self._flush_remaining()
        dropped = sum(rt.rxq.rx_miss for rt in self.rts)
        residual = sum(len(rt.rxq.q) for rt in self.rts)
        if self.injected != self.processed + dropped + residual:
            raise InvariantViolation(
                f"packet conservation failed: injected {self.injected} != "
                f"processed {self.processed} + dropped {dropped} + residual {residual}"
            )

        index_series = self._index_per_second()
        seconds = []
        acc = []
        for s in range(self.n_seconds):
            a = self.front.model(index_series[s]).accuracy
            acc.append(a)
            seconds.append(SecondStats(s, self.offered_s[s], self.processed_s[s],
                                       self.dropped_s[s], index_series[s], a))

        if acc:
            q1, med, q3 = (float(v) for v in np.percentile(acc, (25, 50, 75)))
        else:
            q1 = med = q3 = None
        flows = []
        if self.config.collect_flows:
            for win_id, batch in enumerate(self.batches):
                flows.extend(post_process(batch, self.catalog, win_id))
        totals = {
            "injected": self.injected,
            "processed": self.processed,
            "dropped": dropped,
            "residual_queue": residual,
            "export_window_drops": self.export_drops,
            "bypassed": self.bypassed,
            "evictions": sum(w.evictions for w in self.workers),
            "exports": len(self.batches),
            "skipped_exports": self.skipped_exports,
            "switches": len(self.switches),
            "loss_pct": (100.0 * dropped / self.injected) if self.injected else 0.0,
            "duration_s": self.n_seconds,
        }
        return RunReport(
            seconds=seconds,
            totals=totals,
            accuracy_summary={"median": med, "q1": q1, "q3": q3},
            switches=self.switches,
            flows=flows,
            config=_config_dict(self.config),
        )

    def _index_per_second(self) -> list[int]:
        start = 1 if self.adaptive else self.config.static_index
        out = []
        idx = start
        it = iter(self.switches)
        pending = next(it, None)
        for s in range(self.n_seconds):
            while pending is not None and pending.time_s <= s:
                idx = pending.new_index
                pending = next(it, None)
            out.append(idx)
        return out


def _config_dict(config: SimConfig) -> dict:
    d = {
        "cpu_hz": config.cpu_hz,
        "queue_capacity": config.queue_capacity,
        "poll_interval": config.poll_interval,
        "export_window": config.export_window,
        "mode": config.mode,
        "mon_window": config.mon_window,
        "dec_factor": config.dec_factor,
        "floor_decrease": config.floor_decrease,
        "swap_enabled": config.swap_enabled,
        "export_cost_per_flow": config.resolved_export_cost,
        "flow_table_capacity": config.flow_table_capacity,
        "num_buckets": config.num_buckets,
        "seed": config.seed,
    }
    return d


def simulate_run(trace: Trace, config: SimConfig, front: ParetoFront,
                 catalog: Catalog) -> RunReport:
    """Replay a trace and return the per-second report.

    Identical inputs give identical reports, byte for byte once serialized."""
    if len(trace) == 0:
        return RunReport(
            seconds=[],
            totals={"injected": 0, "processed": 0, "dropped": 0, "residual_queue": 0,
                    "export_window_drops": 0, "bypassed": 0, "evictions": 0,
                    "exports": 0, "skipped_exports": 0, "switches": 0,
                    "loss_pct": 0.0, "duration_s": 0},
            accuracy_summary={"median": None, "q1": None, "q3": None},
            switches=[],
            flows=[],
            config=_config_dict(config),
        )
    return _Sim(trace, config, front, catalog).run()


def sweep_mon_window(trace: Trace, config: SimConfig, front: ParetoFront,
                     catalog: Catalog, values: list[float]) -> list[dict]:
    """Re-run the trace once per mon_window value; rows mirror the loss and
    accuracy columns of the run summaries."""
    rows = []
    for v in values:
        cfg = replace(config, mon_window=v, mode="adaptive", collect_flows=False)
        rep = simulate_run(trace, cfg, front, catalog)
        rows.append({
            "mon_window": v,
            "loss_pct": rep.totals["loss_pct"],
            "dropped": rep.totals["dropped"],
            "median_accuracy": rep.accuracy_summary["median"],
        })
    return rows


def compare_static_vs_adaptive(trace: Trace, config: SimConfig, front: ParetoFront,
                               catalog: Catalog,
                               static_indices: list[int] | None = None) -> list[dict]:
    """One adaptive run plus one run per static index, same trace and config."""
    if static_indices is None:
        static_indices = list(range(1, front.k_max + 1))
    rows = []
    modes = ["adaptive"] + [f"static:{i}" for i in static_indices]
    for mode in modes:
        cfg = replace(config, mode=mode, collect_flows=False)
        rep = simulate_run(trace, cfg, front, catalog)
        rows.append({
            "config_label": mode,
            "loss_pct": rep.totals["loss_pct"],
            "dropped": rep.totals["dropped"],
            "injected": rep.totals["injected"],
            "acc_median": rep.accuracy_summary["median"],
            "acc_q1": rep.accuracy_summary["q1"],
            "acc_q3": rep.accuracy_summary["q3"],
        })
    return rows


# --- report serialization ----------------------------------------------------

def write_report(report: RunReport, out_dir: str | Path) -> None:
    """Write timeseries.csv, summary.json, switches.csv, and flows.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with (out / "timeseries.csv").open("w") as fh:
        fh.write("t,offered_pps,processed_pps,dropped,selected_index,accuracy\n")
        for row in report.seconds:
            fh.write(f"{row.t},{row.offered},{row.processed},{row.dropped},"
                     f"{row.selected_index},{row.accuracy:.6f}\n")

    with (out / "switches.csv").open("w") as fh:
        fh.write("time_s,old_index,new_index,reason\n")
        for ev in report.switches:
            fh.write(f"{ev.time_s:.3f},{ev.old_index},{ev.new_index},{ev.reason}\n")

    summary = {
        "totals": report.totals,
        "accuracy": report.accuracy_summary,
        "config": report.config,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    with (out / "flows.jsonl").open("w") as fh:
        fh.write(json.dumps({"schema": "flowshift/flows-v1"}) + "\n")
        for row in report.flows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
