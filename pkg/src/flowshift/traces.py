"""Packet traces: CSV load/save, time scaling, phase composition, synthesis.

A trace is column-oriented: one numpy array per packet field, sorted by
timestamp. Timestamps are integer nanoseconds from the start of the trace.
IPv4/TCP/UDP headers only; there is no payload content, and payload length is
derived from the wire size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import TraceError

NS_PER_S = 1_000_000_000

# Ethernet + IPv4 + TCP without options; payload_len = size - this, floored at 0.
_HEADER_BYTES = 54

_TRACE_COLUMNS = ("ts_ns", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "size", "tcp_flags")
_TRACE_MAGIC = "# flowshift-trace/v1"


class PacketRecord(NamedTuple):
    """One packet as seen by the pipeline."""

    ts_ns: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int
    size: int
    tcp_flags: int

    @property
    def payload_len(self) -> int:
        return max(0, self.size - _HEADER_BYTES)


@dataclass
class Trace:
    ts_ns: np.ndarray
    src_ip: np.ndarray
    dst_ip: np.ndarray
    src_port: np.ndarray
    dst_port: np.ndarray
    proto: np.ndarray
    size: np.ndarray
    tcp_flags: np.ndarray
    duration_ns: int

    def __len__(self) -> int:
        return len(self.ts_ns)

    def __iter__(self) -> Iterator[PacketRecord]:
        cols = (self.ts_ns, self.src_ip, self.dst_ip, self.src_port,
                self.dst_port, self.proto, self.size, self.tcp_flags)
        for row in zip(*(c.tolist() for c in cols)):
            yield PacketRecord(*row)

    @classmethod
    def empty(cls) -> "Trace":
        return cls(
            ts_ns=np.empty(0, dtype=np.int64),
            src_ip=np.empty(0, dtype=np.uint32),
            dst_ip=np.empty(0, dtype=np.uint32),
            src_port=np.empty(0, dtype=np.int32),
            dst_port=np.empty(0, dtype=np.int32),
            proto=np.empty(0, dtype=np.int16),
            size=np.empty(0, dtype=np.int32),
            tcp_flags=np.empty(0, dtype=np.int16),
            duration_ns=0,
        )

    def mean_pps(self) -> float:
        if self.duration_ns <= 0:
            return 0.0
        return len(self) / (self.duration_ns / NS_PER_S)

    def validate(self) -> None:
        n = len(self.ts_ns)
        for name in _TRACE_COLUMNS:
            if len(getattr(self, name)) != n:
                raise TraceError(f"column {name} length differs from ts_ns")
        if n and np.any(np.diff(self.ts_ns) < 0):
            raise TraceError("timestamps are not non-decreasing")
        if n and self.ts_ns[0] < 0:
            raise TraceError("negative timestamp")
        if self.duration_ns < (int(self.ts_ns[-1]) + 1 if n else 0):
            raise TraceError("duration_ns smaller than the last timestamp")


def ip_to_str(ip: int) -> str:
    return f"{(ip >> 24) & 255}.{(ip >> 16) & 255}.{(ip >> 8) & 255}.{ip & 255}"


def str_to_ip(s: str) -> int:
    parts = s.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {s!r}")
    ip = 0
    for p in parts:
        v = int(p)
        if not 0 <= v <= 255:
            raise ValueError(f"bad IPv4 address {s!r}")
        ip = (ip << 8) | v
    return ip


def save_trace(trace: Trace, path: str | Path) -> None:
    """Write a trace CSV with the versioned header line."""
    trace.validate()
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"{_TRACE_MAGIC} duration_ns={trace.duration_ns}\n")
        writer = csv.writer(fh)
        writer.writerow(_TRACE_COLUMNS)
        src = trace.src_ip.tolist()
        dst = trace.dst_ip.tolist()
        rows = zip(trace.ts_ns.tolist(), src, dst, trace.src_port.tolist(),
                   trace.dst_port.tolist(), trace.proto.tolist(),
                   trace.size.tolist(), trace.tcp_flags.tolist())
        for ts, s, d, sp, dp, pr, sz, fl in rows:
            writer.writerow((ts, ip_to_str(s), ip_to_str(d), sp, dp, pr, sz, fl))


def load_trace(path: str | Path) -> Trace:
    """Parse a trace CSV; malformed rows fail with their line number."""
    path = Path(path)
    try:
        fh = path.open()
    except FileNotFoundError:
        raise TraceError(f"trace file not found: {path}") from None
    duration_ns = None
    cols: list[list[int]] = [[] for _ in _TRACE_COLUMNS]
    with fh:
        first = fh.readline()
        lineno = 1
        if first.startswith("#"):
            if "duration_ns=" in first:
                try:
                    duration_ns = int(first.split("duration_ns=")[1].split()[0])
                except (IndexError, ValueError):
                    raise TraceError(f"{path}:1: bad duration in header") from None
            header_line = fh.readline()
            lineno = 2
        else:
            header_line = first
        header = [h.strip() for h in header_line.strip().split(",")]
        if tuple(header) != _TRACE_COLUMNS:
            raise TraceError(
                f"{path}:{lineno}: expected columns {','.join(_TRACE_COLUMNS)}"
            )
        for lineno, row in enumerate(csv.reader(fh), start=lineno + 1):
            if not row:
                continue
            if len(row) != len(_TRACE_COLUMNS):
                raise TraceError(f"{path}:{lineno}: expected {len(_TRACE_COLUMNS)} fields")
            try:
                cols[0].append(int(row[0]))
                cols[1].append(str_to_ip(row[1]))
                cols[2].append(str_to_ip(row[2]))
                for i in (3, 4, 5, 6, 7):
                    cols[i].append(int(row[i]))
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
    ts = np.asarray(cols[0], dtype=np.int64)
    if len(ts) and np.any(np.diff(ts) < 0):
        bad = int(np.argmax(np.diff(ts) < 0)) + 1
        raise TraceError(f"{path}: timestamps go backwards at data row {bad + 1}")
    if duration_ns is None:
        duration_ns = int(ts[-1]) + 1 if len(ts) else 0
    trace = Trace(
        ts_ns=ts,
        src_ip=np.asarray(cols[1], dtype=np.uint32),
        dst_ip=np.asarray(cols[2], dtype=np.uint32),
        src_port=np.asarray(cols[3], dtype=np.int32),
        dst_port=np.asarray(cols[4], dtype=np.int32),
        proto=np.asarray(cols[5], dtype=np.int16),
        size=np.asarray(cols[6], dtype=np.int32),
        tcp_flags=np.asarray(cols[7], dtype=np.int16),
        duration_ns=duration_ns,
    )
    trace.validate()
    return trace


def scale_trace(trace: Trace, factor: float) -> Trace:
    """Divide all timestamps by factor: factor > 1 compresses time and raises
    the packet rate, factor < 1 stretches it. Rounding is to the nearest
    nanosecond; packet order is preserved.
    """
    if factor <= 0:
        raise TraceError(f"scale factor must be > 0, got {factor}")
    ts = np.rint(trace.ts_ns / factor).astype(np.int64)
    return Trace(
        ts_ns=ts,
        src_ip=trace.src_ip,
        dst_ip=trace.dst_ip,
        src_port=trace.src_port,
        dst_port=trace.dst_port,
        proto=trace.proto,
        size=trace.size,
        tcp_flags=trace.tcp_flags,
        duration_ns=max(int(round(trace.duration_ns / factor)),
                        int(ts[-1]) + 1 if len(ts) else 0),
    )


def concat_phases(phases: list[Trace]) -> Trace:
    """Join traces back to back: each phase is shifted so it starts exactly
    where the previous one's declared duration ends.
    """
    if not phases:
        return Trace.empty()
    ts_parts = []
    offset = 0
    for ph in phases:
        ph.validate()
        ts_parts.append(ph.ts_ns + offset)
        offset += ph.duration_ns
    return Trace(
        ts_ns=np.concatenate(ts_parts),
        src_ip=np.concatenate([p.src_ip for p in phases]),
        dst_ip=np.concatenate([p.dst_ip for p in phases]),
        src_port=np.concatenate([p.src_port for p in phases]),
        dst_port=np.concatenate([p.dst_port for p in phases]),
        proto=np.concatenate([p.proto for p in phases]),
        size=np.concatenate([p.size for p in phases]),
        tcp_flags=np.concatenate([p.tcp_flags for p in phases]),
        duration_ns=offset,
    )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticProfile:
    duration_s: float
    target_pps: float
    # Flow arrivals per second; None derives it from the mean flow size.
    flow_arrival_rate: float | None = None
    pareto_shape: float = 1.2
    min_flow_pkts: int = 2
    max_flow_pkts: int = 10_000
    udp_fraction: float = 0.1
    # Cut a few ~1 s holes out of the trace, like a capture glitch.
    capture_gaps: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0 or self.target_pps <= 0:
            raise TraceError("duration_s and target_pps must be > 0")
        if not 1 < self.min_flow_pkts <= self.max_flow_pkts:
            raise TraceError("flow size bounds must satisfy 1 < min <= max")
        if self.pareto_shape <= 0:
            raise TraceError("pareto_shape must be > 0")


def bounded_pareto_mean(shape: float, lo: int, hi: int) -> float:
    a, l, h = shape, float(lo), float(hi)
    if a == 1.0:
        return l * h / (h - l) * np.log(h / l)
    norm = 1.0 - (l / h) ** a
    return (l ** a) * (a / (a - 1.0)) * (l ** (1.0 - a) - h ** (1.0 - a)) / norm


def sample_bounded_pareto(rng: np.random.Generator, n: int, shape: float, lo: float, hi: float) -> np.ndarray:
    """Inverse-CDF samples from a Pareto truncated to [lo, hi]."""
    u = rng.random(n)
    a, l, h = shape, float(lo), float(hi)
    return (l ** -a - u * (l ** -a - h ** -a)) ** (-1.0 / a)


def sample_flow_sizes(rng: np.random.Generator, n: int, shape: float, lo: int, hi: int) -> np.ndarray:
    """Bounded-Pareto flow sizes rounded to whole packets."""
    x = sample_bounded_pareto(rng, n, shape, lo, hi)
    return np.clip(np.rint(x).astype(np.int64), lo, hi)


_SERVER_IPS = [(172 << 24) | (16 << 16) | i for i in range(1, 17)]
_SERVER_PORTS = (443, 443, 443, 80)

_FLAG_SYN = 0x02
_FLAG_RST = 0x04
_FLAG_ACK = 0x10
_FLAG_PSH_ACK = 0x18
_FLAG_FIN_ACK = 0x11


def _make_flow(rng, arrival_ns, n_pkts, duration_ns, is_udp):
    """Columns for one flow, clipped to the trace window."""
    # Keep single flows well under any worker's capacity so loss comes from
    # aggregate load, not one heavy flow bursting on its own.
    mean_gap_ns = rng.uniform(20e6, 100e6)
    gaps = rng.exponential(mean_gap_ns, n_pkts - 1) if n_pkts > 1 else np.empty(0)
    ts = arrival_ns + np.concatenate(([0.0], np.cumsum(gaps)))
    ts = ts[ts < duration_ns].astype(np.int64)
    n = len(ts)
    if n == 0:
        return None

    client_ip = (10 << 24) | int(rng.integers(0, 1 << 24))
    server_ip = _SERVER_IPS[int(rng.integers(0, len(_SERVER_IPS)))]
    client_port = int(rng.integers(20_000, 65_000))
    server_port = int(rng.choice(_SERVER_PORTS))
    proto = 17 if is_udp else 6

    up = rng.random(n) < 0.35
    up[0] = True  # flows open client to server
    size = np.where(up, rng.integers(64, 200, n), rng.integers(900, 1500, n)).astype(np.int32)

    if is_udp:
        flags = np.zeros(n, dtype=np.int16)
    else:
        flags = np.where(rng.random(n) < 0.5, _FLAG_ACK, _FLAG_PSH_ACK).astype(np.int16)
        flags[rng.random(n) < 0.01] = _FLAG_RST
        flags[0] = _FLAG_SYN
        if n > 1:
            flags[-1] = _FLAG_FIN_ACK

    src_ip = np.where(up, client_ip, server_ip).astype(np.uint32)
    dst_ip = np.where(up, server_ip, client_ip).astype(np.uint32)
    src_port = np.where(up, client_port, server_port).astype(np.int32)
    dst_port = np.where(up, server_port, client_port).astype(np.int32)
    return ts, src_ip, dst_ip, src_port, dst_port, proto, size, flags


def generate_synthetic(profile: SyntheticProfile) -> Trace:
    """Generate a seeded synthetic trace.

    Flow arrivals follow a Poisson process and flow sizes a bounded Pareto.
    Flows are added until the packet budget is met, which pins the mean rate
    to target_pps within a fraction of a percent regardless of how heavy the
    size tail happens to sample.
    """
    rng = np.random.default_rng(profile.seed)
    duration_ns = int(round(profile.duration_s * NS_PER_S))
    budget = int(round(profile.target_pps * profile.duration_s))
    mean_size = bounded_pareto_mean(
        profile.pareto_shape, profile.min_flow_pkts, profile.max_flow_pkts
    )
    arrival_rate = profile.flow_arrival_rate or profile.target_pps / mean_size
    if arrival_rate <= 0:
        raise TraceError("flow_arrival_rate must be > 0")

    parts = []
    total = 0
    clock_ns = 0.0
    mean_gap_ns = NS_PER_S / arrival_rate
    while total < budget * 0.999:
        clock_ns += rng.exponential(mean_gap_ns)
        if clock_ns >= duration_ns:
            # The requested flow rate ran out of room; keep the process busy
            # by recycling arrivals uniformly over the window.
            clock_ns = rng.uniform(0, duration_ns * 0.9)
        n_pkts = int(sample_flow_sizes(
            rng, 1, profile.pareto_shape, profile.min_flow_pkts, profile.max_flow_pkts
        )[0])
        n_pkts = min(n_pkts, int(budget * 1.005) - total)
        if n_pkts < 1:
            break
        flow = _make_flow(rng, clock_ns, n_pkts, duration_ns,
                          rng.random() < profile.udp_fraction)
        if flow is None:
            continue
        parts.append(flow)
        total += len(flow[0])

    if not parts:
        raise TraceError("generation produced no packets; check the profile")

    ts = np.concatenate([p[0] for p in parts])
    order = np.argsort(ts, kind="stable")
    trace = Trace(
        ts_ns=ts[order],
        src_ip=np.concatenate([p[1] for p in parts])[order],
        dst_ip=np.concatenate([p[2] for p in parts])[order],
        src_port=np.concatenate([p[3] for p in parts])[order],
        dst_port=np.concatenate([p[4] for p in parts])[order],
        proto=np.concatenate([np.full(len(p[0]), p[5], dtype=np.int16) for p in parts])[order],
        size=np.concatenate([p[6] for p in parts])[order],
        tcp_flags=np.concatenate([p[7] for p in parts])[order],
        duration_ns=duration_ns,
    )

    if profile.capture_gaps:
        n_gaps = max(1, int(profile.duration_s // 120))
        keep = np.ones(len(trace), dtype=bool)
        for _ in range(n_gaps):
            start = rng.uniform(0, max(1.0, duration_ns - NS_PER_S))
            gap_len = rng.uniform(0.8, 1.2) * NS_PER_S
            keep &= ~((trace.ts_ns >= start) & (trace.ts_ns < start + gap_len))
        trace = Trace(
            ts_ns=trace.ts_ns[keep], src_ip=trace.src_ip[keep], dst_ip=trace.dst_ip[keep],
            src_port=trace.src_port[keep], dst_port=trace.dst_port[keep],
            proto=trace.proto[keep], size=trace.size[keep],
            tcp_flags=trace.tcp_flags[keep], duration_ns=duration_ns,
        )

    trace.validate()
    return trace


def make_three_phase(base_pps: float, phase_s: float, seed: int = 0) -> Trace:
    """A daily-load style trace: one phase at the base rate, one at 1.6x, one
    at 0.2x, each phase_s seconds long. The faster and slower phases come from
    time-scaling longer and shorter generations so every phase covers exactly
    phase_s of trace time.
    """
    noon = generate_synthetic(SyntheticProfile(phase_s, base_pps, seed=seed))
    evening = scale_trace(
        generate_synthetic(SyntheticProfile(phase_s * 1.6, base_pps, seed=seed + 1)), 1.6
    )
    night = scale_trace(
        generate_synthetic(SyntheticProfile(phase_s * 0.2, base_pps, seed=seed + 2)), 0.2
    )
    return concat_phases([noon, evening, night])
