"""Model of a virtually-indexed L1 data cache observed through Prime+Probe.

The cache is a grid of ``sets x ways`` lines with true LRU replacement.
An attacker primes every set with its own lines, lets the victim run for a
short window, and then probes set by set in ascending order.  Each probe
reports how many of the attacker's lines were evicted from the set and a
modeled access latency

    latency = 40 + 5 * evictions   (cycles)

i.e. a fully-cached probe of one set costs about 40 cycles and every
eviction adds roughly 5 cycles.  Probing a set walks the attacker's lines
through the LRU stack again, so a probe doubles as the next prime.

Context switches between victim and attacker pollute some sets.  That is
modeled by :class:`ContextSwitchProfile`: a per-set baseline of expected
evictions, where a baseline equal to the associativity marks the set as
*obscured* (always fully evicted, carries no information).
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

PROBE_BASE_CYCLES = 40
PROBE_CYCLES_PER_EVICTION = 5

_ATTACKER = "attacker"


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


class CacheGeometry:
    """Shape of the modeled cache: number of sets, ways and line size."""

    def __init__(self, sets=64, ways=8, line_size=64):
        if sets <= 0 or ways <= 0 or line_size <= 0:
            raise ValueError("cache dimensions must be positive")
        if not _is_pow2(sets) or not _is_pow2(line_size):
            raise ValueError("sets and line_size must be powers of two")
        self.sets = sets
        self.ways = ways
        self.line_size = line_size

    @property
    def capacity(self):
        """Total cache size in bytes (sets * ways * line_size)."""
        return self.sets * self.ways * self.line_size

    def __eq__(self, other):
        return (
            isinstance(other, CacheGeometry)
            and self.sets == other.sets
            and self.ways == other.ways
            and self.line_size == other.line_size
        )

    def __repr__(self):
        return f"CacheGeometry(sets={self.sets}, ways={self.ways}, line_size={self.line_size})"


#: Default geometry: 64 sets x 8 ways x 64 B lines = 32 KB.
DEFAULT_GEOMETRY = CacheGeometry()


def set_index(offset, geometry=DEFAULT_GEOMETRY):
    """Cache set for a page-relative byte offset.

    The cache is virtually indexed, so for table offsets within one page
    the set is fully determined by the offset:
    ``(offset // line_size) mod sets``.

    Parameters
    ----------
    offset : int
        Byte offset in ``[0, 4096)``.
    geometry : CacheGeometry

    Returns
    -------
    int
    """
    if not 0 <= offset < 4096:
        raise ValueError(f"offset {offset!r} outside [0, 4096)")
    return (offset // geometry.line_size) % geometry.sets


class ProbeResult:
    """Per-set eviction counts and modeled probe latencies of one probe."""

    def __init__(self, evictions):
        self.evictions = np.asarray(evictions, dtype=np.int64)
        self.latencies = PROBE_BASE_CYCLES + PROBE_CYCLES_PER_EVICTION * self.evictions

    def __repr__(self):
        return f"ProbeResult(total_evictions={int(self.evictions.sum())})"


class CacheState:
    """LRU cache contents, tracked per set as most-recent-first line lists.

    Lines are opaque tags ``(owner, ident)``.  The attacker owns
    ``ways`` tags per set; victim lines are identified by whatever hashable
    tag the caller passes (two accesses with the same tag hit the same
    line, different tags occupy different ways).
    """

    def __init__(self, geometry=DEFAULT_GEOMETRY):
        self.geometry = geometry
        # most-recently-used line at index 0
        self._sets = [[] for _ in range(geometry.sets)]
        self._primed = False
        self._handler_serial = 0

    def _touch(self, set_idx, tag):
        lines = self._sets[set_idx]
        if tag in lines:
            lines.remove(tag)
            lines.insert(0, tag)
            return
        lines.insert(0, tag)
        if len(lines) > self.geometry.ways:
            lines.pop()  # evict LRU

    def prime(self):
        """Fill every set with the attacker's lines (ways per set)."""
        for s in range(self.geometry.sets):
            # Walk in a fixed order; afterwards the set holds exactly the
            # attacker's ways, most recent last touched.
            for w in range(self.geometry.ways):
                self._touch(s, (_ATTACKER, w))
        self._primed = True

    def victim_access(self, set_idx, line_tag=0):
        """Insert (or re-reference) one victim line in ``set_idx``."""
        if not 0 <= set_idx < self.geometry.sets:
            raise ValueError(f"set index {set_idx!r} out of range")
        self._touch(set_idx, ("victim", line_tag))

    def probe(self):
        """Count evicted attacker lines per set, re-priming as it goes.

        Sets are probed in ascending index order.  Returns a
        :class:`ProbeResult`.  Raises ``RuntimeError`` when called before
        :meth:`prime` (protocol misuse: counts would be meaningless).
        """
        if not self._primed:
            raise RuntimeError("probe before prime: the measurement protocol requires priming first")
        counts = np.zeros(self.geometry.sets, dtype=np.int64)
        for s in range(self.geometry.sets):
            present = sum(1 for tag in self._sets[s] if tag[0] == _ATTACKER)
            counts[s] = self.geometry.ways - present
            for w in range(self.geometry.ways):
                self._touch(s, (_ATTACKER, w))
        return ProbeResult(counts)


class ContextSwitchProfile:
    """Expected per-set eviction baseline caused by context switches.

    ``baselines[s]`` is the expected number of unwanted evictions the OS /
    scheduler inflicts on set ``s`` during one observation window.  A
    baseline equal to the associativity means the set is always fully
    evicted; such *obscured* sets carry no victim information.
    """

    def __init__(self, baselines, geometry=DEFAULT_GEOMETRY):
        b = np.asarray(baselines, dtype=np.float64)
        if b.shape != (geometry.sets,):
            raise ValueError(f"expected {geometry.sets} baselines, got shape {b.shape}")
        if np.any(b < 0) or np.any(b > geometry.ways):
            raise ValueError("baselines must lie in [0, ways]")
        self.baselines = b
        self.geometry = geometry

    @classmethod
    def zero(cls, geometry=DEFAULT_GEOMETRY):
        """Noise-free profile: no context-switch evictions anywhere."""
        return cls(np.zeros(geometry.sets), geometry)

    @classmethod
    def default(cls, obscured_sets=(0, 1, 2, 3), noisy=(), geometry=DEFAULT_GEOMETRY):
        """Typical measured shape: a handful of fully obscured sets.

        ``obscured_sets`` are pinned at the associativity (default: four
        sets, indices 0-3).  ``noisy`` is an optional iterable of
        ``(set, baseline)`` pairs for partially polluted sets.
        """
        b = np.zeros(geometry.sets)
        for s in obscured_sets:
            b[s] = geometry.ways
        for s, v in noisy:
            b[s] = v
        return cls(b, geometry)

    @property
    def obscured_sets(self):
        """Indices whose baseline equals the associativity."""
        return np.flatnonzero(self.baselines >= self.geometry.ways)

    def draw(self, rng, n=1):
        """Sample eviction counts for ``n`` windows, shape ``(n, sets)``.

        Non-obscured sets draw binomial(ways, baseline/ways) counts,
        clipped to ``ways - 1`` so that only obscured sets ever saturate.
        Obscured sets always report the full associativity.
        """
        ways = self.geometry.ways
        p = self.baselines / ways
        counts = rng.binomial(ways, p, size=(n, self.geometry.sets))
        obscured = self.baselines >= ways
        counts[:, ~obscured] = np.minimum(counts[:, ~obscured], ways - 1)
        counts[:, obscured] = ways
        return counts

    def to_text(self):
        """Serialize as plain ``set baseline`` lines."""
        lines = ["# context-switch profile: one `set baseline` pair per line"]
        for s, v in enumerate(self.baselines):
            lines.append(f"{s} {v:g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, geometry=DEFAULT_GEOMETRY):
        b = np.zeros(geometry.sets)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected `set baseline`, got {raw!r}")
            s, v = int(parts[0]), float(parts[1])
            if not 0 <= s < geometry.sets:
                raise ValueError(f"line {lineno}: set {s} out of range")
            b[s] = v
        return cls(b, geometry)


def apply_context_switch(state, profile, rng):
    """Inject one window's worth of context-switch pollution into ``state``.

    Draws per-set counts from ``profile`` and inserts that many distinct
    handler-owned lines into each set, evicting the victim's/attacker's
    LRU lines exactly as real scheduler activity would.
    """
    counts = profile.draw(rng, 1)[0]
    for s, c in enumerate(counts):
        for _ in range(int(c)):
            state._handler_serial += 1
            state._touch(s, ("handler", state._handler_serial))
    return counts
