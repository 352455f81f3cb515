"""Shared fixtures: preset pools and the standard workload used across tests.

The desk-scale operating point: a 200 kHz cycle budget with the video preset
puts the nine pool members between roughly 625 pkt/s (cheapest) and 86 pkt/s
(full pool). A 240 pkt/s base rate then sits where mid-pool members saturate,
the 1.6x peak overloads everything above the two cheapest members, and the
0.2x quiet phase is safe for every member.
"""
from __future__ import annotations

import pytest

from flowshift.catalog import build_front, load_catalog, preset_path
from flowshift.engine import SimConfig
from flowshift.traces import SyntheticProfile, generate_synthetic, make_three_phase

BASE_PPS = 240.0
PHASE_S = 600.0
CPU_HZ = 200_000
QUEUE = 256
SEED = 42


@pytest.fixture(scope="session")
def video_catalog():
    return load_catalog(preset_path("video"))


@pytest.fixture(scope="session")
def video_front(video_catalog):
    return build_front(video_catalog)


@pytest.fixture(scope="session")
def service_catalog():
    return load_catalog(preset_path("service"))


@pytest.fixture(scope="session")
def service_front(service_catalog):
    return build_front(service_catalog)


@pytest.fixture(scope="session")
def base_config():
    return SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE)


@pytest.fixture(scope="session")
def short_trace():
    """45 seconds at the base rate; enough for one full export window."""
    return generate_synthetic(
        SyntheticProfile(duration_s=45.0, target_pps=BASE_PPS, seed=SEED))


@pytest.fixture(scope="session")
def three_phase_trace():
    """The 30 minute day profile: base, peak (x1.6), quiet (x0.2)."""
    return make_three_phase(BASE_PPS, PHASE_S, seed=SEED)


@pytest.fixture(scope="session")
def day_run(three_phase_trace, video_front, video_catalog):
    """Memoized replays of the day profile, keyed by mode and mon_window.

    Several tests look at the same handful of runs; each takes seconds, so
    they are computed once per session.
    """
    from flowshift.engine import simulate_run

    cache: dict[tuple, object] = {}

    def run(mode: str = "adaptive", mon_window: float = 8.0):
        key = (mode, mon_window)
        if key not in cache:
            cfg = SimConfig(cpu_hz=CPU_HZ, queue_capacity=QUEUE, mode=mode,
                            mon_window=mon_window, collect_flows=False)
            cache[key] = simulate_run(three_phase_trace, cfg, video_front,
                                      video_catalog)
        return cache[key]

    return run
