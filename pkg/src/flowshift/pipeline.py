"""Per-packet flow tracking, worker state, and windowed feature export.

Packets are grouped into bidirectional flows keyed on the canonical 5-tuple.
An indirection table hashes keys to buckets and buckets to a worker; swapping
the table is what lets one worker export its window while the companion keeps
absorbing traffic. Each flow is pinned to the feature set that was active when
its first packet arrived and keeps that pin for its whole lifetime, across
export windows.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .catalog import Catalog, aggregate_cost
from .errors import PipelineError
from .traces import PacketRecord

SUPPORTED_PROTOS = (6, 17)

DEFAULT_BUCKETS = 256

# Gap in the server-to-client direction that closes a media segment.
SEGMENT_GAP_NS = 100_000_000

# Raw header capture stops after this many packets per flow.
RAW_HEADER_MAX_PKTS = 10

_FLAG_SYN = 0x02
_FLAG_RST = 0x04


class FlowKey(NamedTuple):
    """Direction-independent 5-tuple: endpoint A is the numerically lower
    (ip, port) pair, so both directions of a flow map to the same key."""

    ip_a: int
    ip_b: int
    port_a: int
    port_b: int
    proto: int


def canonical_flow_key(pkt: PacketRecord) -> FlowKey:
    if (pkt.src_ip, pkt.src_port) <= (pkt.dst_ip, pkt.dst_port):
        return FlowKey(pkt.src_ip, pkt.dst_ip, pkt.src_port, pkt.dst_port, pkt.proto)
    return FlowKey(pkt.dst_ip, pkt.src_ip, pkt.dst_port, pkt.src_port, pkt.proto)


def bucket_of(key: FlowKey, num_buckets: int = DEFAULT_BUCKETS) -> int:
    """Deterministic key-to-bucket hash (crc32 over the packed tuple).

    The builtin hash() is salted per process and would break replay."""
    packed = struct.pack("!IIHHB", key.ip_a, key.ip_b, key.port_a, key.port_b, key.proto)
    return zlib.crc32(packed) % num_buckets


class WorkerRole(Enum):
    ACTIVE = "active"
    BACKUP = "backup"
    EXPORTING = "exporting"


class IndirectionTable:
    """bucket -> worker id map. All buckets point at the active worker; a swap
    repoints every bucket at the companion in one step."""

    def __init__(self, active_id: int, backup_id: int | None,
                 num_buckets: int = DEFAULT_BUCKETS):
        self.num_buckets = num_buckets
        self.active_id = active_id
        self.backup_id = backup_id
        self.buckets = [active_id] * num_buckets

    def route(self, key: FlowKey) -> int:
        return self.buckets[bucket_of(key, self.num_buckets)]

    def swap(self) -> None:
        if self.backup_id is None:
            raise PipelineError("cannot swap a single-worker table")
        self.active_id, self.backup_id = self.backup_id, self.active_id
        self.buckets = [self.active_id] * self.num_buckets


def route_packet(table: IndirectionTable, key: FlowKey) -> int:
    return table.route(key)


class FlowRecord:
    """Mutable per-flow state for one export window."""

    __slots__ = (
        "key", "pinned_index", "pinned_mask", "pinned_cost", "updaters",
        "first_seen", "last_seen", "seen",
        "f_pkts_in", "f_pkts_out", "f_bytes_in", "f_bytes_out",
        "rtt_samples", "iat_samples", "f_retrans", "f_active_ns",
        "seg_count", "seg_sizes", "seg_gaps", "seg_rates",
        "seg_open_bytes", "seg_open_start", "seg_prev_down_ts", "seg_seq",
        "raw_headers",
        "last_ts", "last_dir",
    )

    def __init__(self, key: FlowKey, pinned_index: int, pinned_mask: int,
                 pinned_cost: int, updaters, ts_ns: int):
        self.key = key
        self.pinned_index = pinned_index
        self.pinned_mask = pinned_mask
        self.pinned_cost = pinned_cost
        self.updaters = updaters
        self.first_seen = ts_ns
        self.last_seen = ts_ns
        self.seen = 0
        self.f_pkts_in = 0
        self.f_pkts_out = 0
        self.f_bytes_in = 0
        self.f_bytes_out = 0
        self.rtt_samples = []
        self.iat_samples = []
        self.f_retrans = 0
        self.f_active_ns = 0
        self.seg_count = 0
        self.seg_sizes = []
        self.seg_gaps = []
        self.seg_rates = []
        self.seg_open_bytes = 0
        self.seg_open_start = 0
        self.seg_prev_down_ts = 0
        self.seg_seq = -1
        self.raw_headers = []
        self.last_ts = 0
        self.last_dir = -1


# --- feature update routines -------------------------------------------------
# Each takes (record, ts_ns, size, flags, is_fwd) where is_fwd means the packet
# travels from endpoint A to endpoint B of the canonical key. For traffic from
# a client to a server, "in" below counts the server-to-client direction.

def _upd_pkt_counts(rec, ts, size, flags, is_fwd):
    if is_fwd:
        rec.f_pkts_out += 1
    else:
        rec.f_pkts_in += 1


def _upd_byte_counts(rec, ts, size, flags, is_fwd):
    if is_fwd:
        rec.f_bytes_out += size
    else:
        rec.f_bytes_in += size


def _upd_rtt(rec, ts, size, flags, is_fwd):
    # Direction flip gap: a crude request/response round trip estimate.
    if rec.last_dir >= 0 and rec.last_dir != is_fwd:
        rec.rtt_samples.append(ts - rec.last_ts)


def _upd_iat(rec, ts, size, flags, is_fwd):
    if rec.seen > 1:
        rec.iat_samples.append(ts - rec.last_ts)


def _upd_retrans(rec, ts, size, flags, is_fwd):
    # SYN seen again mid-flow, or a reset, is read as a retransmission event.
    if (flags & _FLAG_SYN and rec.seen > 1) or flags & _FLAG_RST:
        rec.f_retrans += 1


def _upd_active_time(rec, ts, size, flags, is_fwd):
    rec.f_active_ns = ts - rec.first_seen


def _segment_step(rec, ts, size, is_fwd):
    # All segment features share one boundary detector; the seq guard keeps it
    # from running more than once per packet when several are pinned.
    if rec.seg_seq == rec.seen:
        return
    rec.seg_seq = rec.seen
    if is_fwd:
        return  # segments ride the B-to-A (download) direction
    if rec.seg_open_bytes and ts - rec.seg_prev_down_ts > SEGMENT_GAP_NS:
        dur = rec.seg_prev_down_ts - rec.seg_open_start
        rec.seg_count += 1
        rec.seg_sizes.append(rec.seg_open_bytes)
        rec.seg_gaps.append(ts - rec.seg_prev_down_ts)
        rec.seg_rates.append(rec.seg_open_bytes / (dur / 1e9) if dur > 0 else 0.0)
        rec.seg_open_bytes = 0
    if rec.seg_open_bytes == 0:
        rec.seg_open_start = ts
    rec.seg_open_bytes += size
    rec.seg_prev_down_ts = ts


def _upd_seg_detect(rec, ts, size, flags, is_fwd):
    _segment_step(rec, ts, size, is_fwd)


_upd_seg_size = _upd_seg_detect
_upd_seg_gap = _upd_seg_detect
_upd_seg_rate = _upd_seg_detect


def _upd_raw_header(rec, ts, size, flags, is_fwd):
    if len(rec.raw_headers) < RAW_HEADER_MAX_PKTS:
        rec.raw_headers.append((ts - rec.first_seen, int(is_fwd), size, flags))


_UPDATERS_BY_NAME = {
    "pkt_counts": _upd_pkt_counts,
    "byte_counts": _upd_byte_counts,
    "rtt": _upd_rtt,
    "retrans": _upd_retrans,
    "iat": _upd_iat,
    "active_time": _upd_active_time,
    "seg_detect": _upd_seg_detect,
    "seg_size": _upd_seg_size,
    "seg_gap": _upd_seg_gap,
    "seg_rate": _upd_seg_rate,
    "raw_header": _upd_raw_header,
}

# Catalogs with unknown feature names fall back to a kind-generic routine.
_UPDATERS_BY_KIND = {
    "counter": _upd_pkt_counts,
    "throughput": _upd_byte_counts,
    "latency": _upd_iat,
    "retransmission": _upd_retrans,
    "segment": _upd_seg_detect,
    "raw_header": _upd_raw_header,
}


def updater_for(feature) -> callable:
    fn = _UPDATERS_BY_NAME.get(feature.name)
    return fn if fn is not None else _UPDATERS_BY_KIND[feature.kind]


def build_updaters(catalog: Catalog, mask: int):
    fns = []
    m = mask
    while m:
        fid = (m & -m).bit_length() - 1
        fns.append(updater_for(catalog.features[fid]))
        m &= m - 1
    return tuple(fns)


class Worker:
    """One processing core: a flow table plus a cycle meter."""

    def __init__(self, worker_id: int, role: WorkerRole,
                 flow_table_capacity: int = 65_536):
        self.id = worker_id
        self.role = role
        self.flow_table: OrderedDict[FlowKey, FlowRecord] = OrderedDict()
        self.flow_table_capacity = flow_table_capacity
        self.cycles_consumed = 0
        self.evictions = 0


@dataclass(frozen=True)
class SwapEvent:
    time_ns: int
    exporting_id: int
    new_active_id: int


@dataclass
class ExportBatch:
    worker_id: int
    window_start_ns: int
    window_end_ns: int
    records: list[FlowRecord] = field(default_factory=list)


class PinTable:
    """Flow lifetime pins: key -> (front index, mask). Survives export clears
    so a long flow re-created in a later window keeps its original feature
    set, whatever the selector has done since."""

    def __init__(self):
        self._pins: dict[FlowKey, tuple[int, int]] = {}

    def get(self, key):
        return self._pins.get(key)

    def put(self, key, index, mask):
        self._pins[key] = (index, mask)

    def __len__(self):
        return len(self._pins)


def process_packet(
    worker: Worker,
    pkt: PacketRecord,
    current_index: int,
    current_mask: int,
    catalog: Catalog,
    pins: PinTable,
) -> int:
    """Apply one packet to the worker's flow table; returns cycles charged.

    First packet of an unseen flow creates the record and pins the feature
    set. In first-N mode, packets past the limit keep the flow's liveness
    fresh but change no feature state and charge only the base cost.
    """
    key = canonical_flow_key(pkt)
    table = worker.flow_table
    rec = table.get(key)
    if rec is None:
        pin = pins.get(key)
        if pin is None:
            pin = (current_index, current_mask)
            pins.put(key, current_index, current_mask)
        index, mask = pin
        if len(table) >= worker.flow_table_capacity:
            table.popitem(last=False)  # oldest-idle record goes first
            worker.evictions += 1
        rec = FlowRecord(key, index, mask, aggregate_cost(catalog, mask),
                         build_updaters(catalog, mask), pkt.ts_ns)
        table[key] = rec
    else:
        table.move_to_end(key)

    rec.seen += 1
    ts = pkt.ts_ns
    rec.last_seen = ts
    first_n = catalog.first_n_packets
    if first_n is not None and rec.seen > first_n:
        cycles = catalog.base_packet_cost
    else:
        is_fwd = (pkt.src_ip, pkt.src_port) == (key.ip_a, key.port_a)
        for fn in rec.updaters:
            fn(rec, ts, pkt.size, pkt.tcp_flags, is_fwd)
        rec.last_ts = ts
        rec.last_dir = is_fwd
        cycles = catalog.base_packet_cost + rec.pinned_cost
    worker.cycles_consumed += cycles
    return cycles


def begin_export(table: IndirectionTable, worker: Worker,
                 companion: Worker | None, time_ns: int) -> SwapEvent:
    """Start a window export: repoint traffic at the companion and mark the
    worker as exporting. With no companion the worker simply halts intake of
    CPU for the duration (callers model that)."""
    if worker.role is not WorkerRole.ACTIVE:
        raise PipelineError(f"worker {worker.id} is {worker.role.value}, not active")
    if companion is not None:
        if companion.role is not WorkerRole.BACKUP:
            raise PipelineError(
                f"companion {companion.id} is {companion.role.value}; "
                "only one export may run at a time"
            )
        table.swap()
        companion.role = WorkerRole.ACTIVE
    worker.role = WorkerRole.EXPORTING
    return SwapEvent(time_ns, worker.id, companion.id if companion else worker.id)


def complete_export(worker: Worker, window_start_ns: int,
                    window_end_ns: int) -> ExportBatch:
    """Drain the worker's flow table into a batch and demote it to backup."""
    if worker.role is not WorkerRole.EXPORTING:
        raise PipelineError(f"worker {worker.id} is not exporting")
    batch = ExportBatch(worker.id, window_start_ns, window_end_ns,
                        list(worker.flow_table.values()))
    worker.flow_table.clear()
    worker.role = WorkerRole.BACKUP
    return batch


# --- post-processing ---------------------------------------------------------

_STAT_NAMES = ("min", "mean", "median", "max", "stdev")


def series_stats(values) -> dict:
    """min/mean/median/max/stdev of a sample series. Population stdev, so a
    single sample reports 0 rather than being undefined."""
    if not len(values):
        return {name: None for name in _STAT_NAMES}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "min": float(arr.min()),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "max": float(arr.max()),
        "stdev": float(arr.std()),
    }


def _record_payload(rec: FlowRecord, catalog: Catalog) -> dict:
    out = {}
    mask = rec.pinned_mask
    while mask:
        fid = (mask & -mask).bit_length() - 1
        mask &= mask - 1
        name = catalog.features[fid].name
        if name == "pkt_counts":
            out["pkts_in"] = rec.f_pkts_in
            out["pkts_out"] = rec.f_pkts_out
        elif name == "byte_counts":
            out["bytes_in"] = rec.f_bytes_in
            out["bytes_out"] = rec.f_bytes_out
        elif name == "rtt":
            out.update({f"rtt_{k}": v for k, v in series_stats(rec.rtt_samples).items()})
        elif name == "iat":
            out.update({f"iat_{k}": v for k, v in series_stats(rec.iat_samples).items()})
        elif name == "retrans":
            out["retrans"] = rec.f_retrans
        elif name == "active_time":
            out["active_ns"] = rec.f_active_ns
        elif name == "seg_detect":
            out["segments"] = rec.seg_count
        elif name == "seg_size":
            out.update({f"seg_size_{k}": v for k, v in series_stats(rec.seg_sizes).items()})
        elif name == "seg_gap":
            out.update({f"seg_gap_{k}": v for k, v in series_stats(rec.seg_gaps).items()})
        elif name == "seg_rate":
            out.update({f"seg_rate_{k}": v for k, v in series_stats(rec.seg_rates).items()})
        elif name == "raw_header":
            out["raw_headers"] = [list(h) for h in rec.raw_headers]
        else:
            # Kind-generic fallback shares the accumulators of its kind.
            kind = catalog.features[fid].kind
            if kind == "counter":
                out[f"{name}_pkts_in"] = rec.f_pkts_in
                out[f"{name}_pkts_out"] = rec.f_pkts_out
            elif kind == "throughput":
                out[f"{name}_bytes_in"] = rec.f_bytes_in
                out[f"{name}_bytes_out"] = rec.f_bytes_out
            elif kind == "latency":
                out.update({f"{name}_{k}": v for k, v in series_stats(rec.iat_samples).items()})
            elif kind == "retransmission":
                out[name] = rec.f_retrans
            elif kind == "segment":
                out[f"{name}_count"] = rec.seg_count
            elif kind == "raw_header":
                out[name] = [list(h) for h in rec.raw_headers]
    return out


def post_process(batch: ExportBatch, catalog: Catalog, window_id: int) -> list[dict]:
    """Flatten a batch into one record per flow, sorted by flow key."""
    out = []
    for rec in sorted(batch.records, key=lambda r: r.key):
        if rec.seen == 0:
            continue
        row = {
            "window_id": window_id,
            "ip_a": rec.key.ip_a,
            "ip_b": rec.key.ip_b,
            "port_a": rec.key.port_a,
            "port_b": rec.key.port_b,
            "proto": rec.key.proto,
            "pinned_index": rec.pinned_index,
            "packets": rec.seen,
            "first_seen_ns": rec.first_seen,
            "last_seen_ns": rec.last_seen,
        }
        row.update(_record_payload(rec, catalog))
        out.append(row)
    return out
