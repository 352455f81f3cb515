"""Drop-driven selection of the active front index.

The controller sees one signal: how many packets the receive queues dropped
since the last poll. Any drop is read as overload and the index is cut
multiplicatively at once. Quiet periods earn a single-step increase, but only
after mon_window seconds without a change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class SelectorParams:
    k_max: int
    mon_window: float = 8.0
    dec_factor: float = 0.5
    # Floor instead of ceil on the decrease step. With dec_factor 0.5 this
    # makes a drop at index 3 land on 1 rather than 2.
    floor_decrease: bool = False

    def __post_init__(self):
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if self.mon_window <= 0:
            raise ConfigError(f"mon_window must be > 0, got {self.mon_window}")
        if not 0.0 < self.dec_factor < 1.0:
            raise ConfigError(
                f"dec_factor must be in (0, 1) exclusive, got {self.dec_factor}"
            )


@dataclass(frozen=True)
class SelectorState:
    current_index: int = 1
    t_since_last_update: float = 0.0


@dataclass(frozen=True)
class DropSignal:
    n_drops: int
    poll_time: float


@dataclass(frozen=True)
class SwitchEvent:
    time_s: float
    old_index: int
    new_index: int
    reason: str  # "drop" or "increase"


def on_poll(
    state: SelectorState,
    params: SelectorParams,
    signal: DropSignal,
    dt: float,
) -> tuple[SelectorState, SwitchEvent | None]:
    """Advance the controller by one poll. Returns the new state and, when the
    index moved, the switch event.

    Decreases apply immediately on any drop; increases wait for mon_window
    seconds of quiet. Both reset the quiet timer.
    """
    if signal.n_drops < 0:
        raise ConfigError(f"n_drops must be >= 0, got {signal.n_drops}")
    old = state.current_index
    if signal.n_drops > 0:
        scaled = old * params.dec_factor
        new = math.floor(scaled) if params.floor_decrease else math.ceil(scaled)
        new = max(1, new)
        next_state = SelectorState(new, 0.0)
        if new != old:
            return next_state, SwitchEvent(signal.poll_time, old, new, "drop")
        return next_state, None
    t = state.t_since_last_update + dt
    if t >= params.mon_window:
        new = min(params.k_max, old + 1)
        next_state = SelectorState(new, 0.0)
        if new != old:
            return next_state, SwitchEvent(signal.poll_time, old, new, "increase")
        return next_state, None
    return SelectorState(old, t), None


def replay_schedule(
    params: SelectorParams,
    drops_per_tick: list[int],
    dt: float = 1.0,
    start_index: int = 1,
) -> list[int]:
    """Fold on_poll over a per-tick drop sequence; returns the index after
    each tick. Useful for dry-running a controller setting against a known
    drop pattern without the full simulator.
    """
    state = SelectorState(start_index, 0.0)
    out = []
    for tick, n in enumerate(drops_per_tick):
        state, _ = on_poll(state, params, DropSignal(n, (tick + 1) * dt), dt)
        out.append(state.current_index)
    return out
