"""Drop-driven index control: single polls, replayed schedules, clamps."""
from __future__ import annotations

import math

import numpy as np
import pytest

from _oracles import step_interpreter
from flowshift.errors import ConfigError
from flowshift.selector import (
    DropSignal,
    SelectorParams,
    SelectorState,
    on_poll,
    replay_schedule,
)

P9 = SelectorParams(k_max=9, mon_window=8.0, dec_factor=0.5)


def _poll(state, params, drops, t=1.0, dt=1.0):
    return on_poll(state, params, DropSignal(drops, t), dt)


# --- single steps -------------------------------------------------------------

def test_drop_halves_six_to_three():
    state, event = _poll(SelectorState(6, 3.0), P9, drops=5)
    assert state == SelectorState(3, 0.0)
    assert event is not None and (event.old_index, event.new_index) == (6, 3)
    assert event.reason == "drop"


def test_drop_at_floor_stays_at_one():
    state, event = _poll(SelectorState(1, 2.0), P9, drops=9)
    assert state.current_index == 1
    assert event is None  # no movement, no event
    assert state.t_since_last_update == 0.0  # but the quiet timer restarts


def test_drop_from_three_rounds_up_to_two():
    state, _ = _poll(SelectorState(3, 0.0), P9, drops=1)
    assert state.current_index == 2


def test_drop_from_three_with_floor_mode_lands_on_one():
    params = SelectorParams(k_max=9, dec_factor=0.5, floor_decrease=True)
    state, _ = _poll(SelectorState(3, 0.0), params, drops=1)
    assert state.current_index == 1


def test_quiet_window_steps_up_once():
    state, event = _poll(SelectorState(4, 7.0), P9, drops=0)
    assert state == SelectorState(5, 0.0)
    assert (event.old_index, event.new_index, event.reason) == (4, 5, "increase")


def test_quiet_below_window_only_accumulates():
    state, event = _poll(SelectorState(4, 3.0), P9, drops=0)
    assert state == SelectorState(4, 4.0)
    assert event is None


def test_increase_clamps_at_top():
    state, event = _poll(SelectorState(9, 7.5), P9, drops=0)
    assert state == SelectorState(9, 0.0)
    assert event is None


def test_negative_drop_count_rejected():
    with pytest.raises(ConfigError):
        _poll(SelectorState(1, 0.0), P9, drops=-1)


def test_param_validation():
    with pytest.raises(ConfigError):
        SelectorParams(k_max=0)
    with pytest.raises(ConfigError):
        SelectorParams(k_max=9, mon_window=0.0)
    with pytest.raises(ConfigError):
        SelectorParams(k_max=9, dec_factor=1.0)
    with pytest.raises(ConfigError):
        SelectorParams(k_max=9, dec_factor=0.0)


# --- replayed schedules -------------------------------------------------------

def test_pure_climb_and_hold():
    params = SelectorParams(k_max=9, mon_window=10.0, dec_factor=0.5)
    got = replay_schedule(params, [0] * 90)
    expected = []
    idx = 1
    for tick in range(90):
        if (tick + 1) % 10 == 0 and idx < 9:
            idx += 1
        expected.append(idx)
    assert got == expected
    assert got[-1] == 9 and got.count(9) == 11  # reaches the top and holds


def test_all_drops_collapse_in_log2_ticks():
    params = SelectorParams(k_max=9, mon_window=8.0, dec_factor=0.5)
    for start in range(2, 10):
        got = replay_schedule(params, [3] * 10, start_index=start)
        first_at_one = got.index(1)
        assert first_at_one + 1 == math.ceil(math.log2(start))
        assert all(v == 1 for v in got[first_at_one:])


# Frozen reference timeline: twelve-second quiet window, drops on the polls
# at t=63 and t=69. Climb 1..6 by t=60, cut 6->3 at 63, then 3->2 at 69
# because the halved index rounds up. Under floor rounding the second cut
# lands on 1 instead; both variants are frozen so a change to either rule
# shows up as a diff.
TIMELINE_PARAMS = SelectorParams(k_max=9, mon_window=12.0, dec_factor=0.5)
TIMELINE_DROPS = [0] * 62 + [1] + [0] * 5 + [1] + [0] * 3
TIMELINE_CEIL = (
    [1] * 11 + [2] * 12 + [3] * 12 + [4] * 12 + [5] * 12
    + [6] * 3 + [3] * 6 + [2] * 4
)
TIMELINE_FLOOR = TIMELINE_CEIL[:68] + [1] * 4


def test_frozen_timeline_with_ceiling_rule():
    got = replay_schedule(TIMELINE_PARAMS, TIMELINE_DROPS)
    assert got == TIMELINE_CEIL
    assert got[59] == 6            # index 6 held when the first drop hits
    assert got[62] == 3            # t=63: the 6->3 cut
    assert got[68] == 2            # t=69: ceil(1.5) = 2


def test_frozen_timeline_with_floor_rule():
    params = SelectorParams(k_max=9, mon_window=12.0, dec_factor=0.5,
                            floor_decrease=True)
    got = replay_schedule(params, TIMELINE_DROPS)
    assert got == TIMELINE_FLOOR
    assert got[68] == 1            # floor(1.5) = 1


def test_divergence_between_rounding_rules_is_exactly_the_second_cut():
    ceil_run = replay_schedule(TIMELINE_PARAMS, TIMELINE_DROPS)
    floor_params = SelectorParams(k_max=9, mon_window=12.0, dec_factor=0.5,
                                  floor_decrease=True)
    floor_run = replay_schedule(floor_params, TIMELINE_DROPS)
    assert ceil_run[:68] == floor_run[:68]
    assert ceil_run[68:] == [2, 2, 2, 2]
    assert floor_run[68:] == [1, 1, 1, 1]


def test_matches_reference_interpreter_on_random_sequences():
    rng = np.random.default_rng(23)
    for _ in range(50):
        k = int(rng.integers(2, 12))
        window = float(rng.integers(1, 15))
        dec = float(rng.uniform(0.2, 0.8))
        start = int(rng.integers(1, k + 1))
        drops = [int(d) for d in rng.integers(0, 2, size=200) * rng.integers(1, 40)]
        for floor_mode in (False, True):
            params = SelectorParams(k_max=k, mon_window=window, dec_factor=dec,
                                    floor_decrease=floor_mode)
            got = replay_schedule(params, drops, start_index=start)
            want = step_interpreter(k, window, dec, drops, start=start,
                                    floor_mode=floor_mode)
            assert got == want


def test_replay_is_deterministic():
    drops = [0, 0, 0, 4, 0, 0, 0, 0, 0, 2, 0]
    a = replay_schedule(P9, drops)
    b = replay_schedule(P9, drops)
    assert a == b
