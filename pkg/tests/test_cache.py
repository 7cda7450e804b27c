"""Cache model: LRU semantics, probe protocol, context-switch noise."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aesleak.cache import (
    PROBE_BASE_CYCLES,
    PROBE_CYCLES_PER_EVICTION,
    CacheGeometry,
    CacheState,
    ContextSwitchProfile,
    apply_context_switch,
    set_index,
)


class OracleLRU:
    """Timestamp-based LRU written independently of the package model."""

    def __init__(self, sets, ways):
        self.sets = sets
        self.ways = ways
        self.clock = 0
        self.contents = [dict() for _ in range(sets)]  # tag -> last use

    def access(self, s, tag):
        self.clock += 1
        lines = self.contents[s]
        if tag not in lines and len(lines) == self.ways:
            oldest = min(lines, key=lines.get)
            del lines[oldest]
        lines[tag] = self.clock

    def fill_attacker(self, ways):
        for s in range(self.sets):
            for w in range(ways):
                self.access(s, ("A", w))

    def attacker_missing(self):
        return [
            sum(1 for w in range(self.ways) if ("A", w) not in self.contents[s])
            for s in range(self.sets)
        ]


def test_geometry_defaults_and_capacity():
    g = CacheGeometry()
    assert (g.sets, g.ways, g.line_size) == (64, 8, 64)
    assert g.capacity == 32 * 1024


@pytest.mark.parametrize("bad", [(0, 8, 64), (64, 8, 48), (63, 8, 64), (64, -1, 64)])
def test_geometry_rejects_bad_shapes(bad):
    with pytest.raises(ValueError):
        CacheGeometry(*bad)


def test_set_index_examples():
    assert set_index(0) == 0
    assert set_index(63) == 0
    assert set_index(64) == 1
    assert set_index(0x0C0) == 3
    assert set_index(0xFFF) == 63


@pytest.mark.parametrize("off", [-1, 4096, 10_000])
def test_set_index_rejects_out_of_page(off):
    with pytest.raises(ValueError):
        set_index(off)


def test_probe_without_prime_is_an_error():
    state = CacheState()
    with pytest.raises(RuntimeError):
        state.probe()


def test_clean_probe_reads_baseline_latency():
    state = CacheState()
    state.prime()
    res = state.probe()
    assert np.all(res.evictions == 0)
    assert np.all(res.latencies == PROBE_BASE_CYCLES)


def test_distinct_victim_lines_count_as_evictions():
    state = CacheState()
    state.prime()
    for tag in range(3):
        state.victim_access(17, tag)
    # re-touching an already resident line must not add an eviction
    state.victim_access(17, 0)
    res = state.probe()
    assert res.evictions[17] == 3
    assert res.latencies[17] == PROBE_BASE_CYCLES + 3 * PROBE_CYCLES_PER_EVICTION
    assert res.evictions.sum() == 3


def test_eviction_count_saturates_at_ways():
    state = CacheState()
    state.prime()
    for tag in range(12):
        state.victim_access(5, tag)
    res = state.probe()
    assert res.evictions[5] == 8


def test_four_evictions_cost_sixty_cycles():
    state = CacheState()
    state.prime()
    for tag in range(4):
        state.victim_access(0, tag)
    assert state.probe().latencies[0] == 60


def test_probe_doubles_as_next_prime():
    state = CacheState()
    state.prime()
    for tag in range(6):
        state.victim_access(33, tag)
    assert state.probe().evictions[33] == 6
    # no victim activity in between: the probe above re-primed the set
    assert state.probe().evictions[33] == 0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 15), st.integers(0, 11)),
        max_size=120,
    )
)
def test_probe_matches_brute_force_lru(accesses):
    geom = CacheGeometry(sets=16, ways=4, line_size=64)
    state = CacheState(geom)
    state.prime()
    oracle = OracleLRU(geom.sets, geom.ways)
    oracle.fill_attacker(geom.ways)
    distinct = [set() for _ in range(geom.sets)]
    for s, tag in accesses:
        state.victim_access(s, tag)
        oracle.access(s, ("V", tag))
        distinct[s].add(tag)
    got = state.probe().evictions
    assert list(got) == oracle.attacker_missing()
    # and both equal the analytic form: distinct victim lines, capped
    assert list(got) == [min(len(d), geom.ways) for d in distinct]


def test_context_switch_zero_profile_is_silent():
    rng = np.random.default_rng(0)
    state = CacheState()
    state.prime()
    apply_context_switch(state, ContextSwitchProfile.zero(), rng)
    assert state.probe().evictions.sum() == 0


def test_default_profile_obscures_exactly_four_sets():
    prof = ContextSwitchProfile.default()
    assert list(prof.obscured_sets) == [0, 1, 2, 3]
    rng = np.random.default_rng(1)
    state = CacheState()
    state.prime()
    apply_context_switch(state, prof, rng)
    res = state.probe()
    assert list(res.evictions[:4]) == [8, 8, 8, 8]
    assert res.evictions[4:].sum() == 0


def test_non_obscured_draws_stay_below_ways():
    prof = ContextSwitchProfile.default(noisy=[(10, 6.0), (11, 7.5)])
    rng = np.random.default_rng(2)
    counts = prof.draw(rng, 10_000)
    assert counts[:, [10, 11]].max() <= 7
    assert counts[:, [0, 1, 2, 3]].min() == 8
    # draws hover around the requested baseline
    assert abs(counts[:, 10].mean() - 6.0) < 0.1


def test_profile_rejects_bad_baselines():
    with pytest.raises(ValueError):
        ContextSwitchProfile(np.full(64, 9.0))
    with pytest.raises(ValueError):
        ContextSwitchProfile(np.full(32, 1.0))


def test_profile_text_round_trip():
    prof = ContextSwitchProfile.default(noisy=[(20, 2.5)])
    text = prof.to_text()
    back = ContextSwitchProfile.from_text(text)
    assert np.allclose(back.baselines, prof.baselines)


def test_profile_from_text_rejects_garbage():
    with pytest.raises(ValueError):
        ContextSwitchProfile.from_text("0 1 2\n")
    with pytest.raises(ValueError):
        ContextSwitchProfile.from_text("99 1.0\n")
