"""Synthetic observations of victim memory activity, window by window.

The adversary does not see the access trace itself.  It sees, per
scheduling window, how many of its primed lines were evicted in each
cache set.  This module turns a ground-truth :class:`~aesleak.aes.AccessTrace`
into that view:

1. every load is expanded into one or more *service events* (more than
   one when the interrupt storm makes the victim replay the load),
2. the service stream is chunked into windows of ``interrupt_granularity``
   events,
3. membership noise is applied - whole lines dropped for a round,
   spurious in-region accesses injected, surviving loads displaced to a
   wrong window - followed by scheduler context-switch pollution.

Window counts are *activity counts* (number of observed line services),
so a load replayed five times contributes five counts spread over
consecutive windows while still being a single per-round set access.

The synthesizer records ground truth (window spans of each round, true
window of each load) on the returned run so that calibration can measure
the channel against reality and tests can check segmentation exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .aes import Style
from .cache import DEFAULT_GEOMETRY
from .noise import sampler_knobs

__all__ = [
    "ObservationRun",
    "ObservationWindow",
    "SynthesisTruth",
    "SegmentationError",
    "InsufficientDataError",
    "RoundSegmentation",
    "RoundAccesses",
    "EncryptionObservation",
    "synthesize_observations",
    "filter_noise",
    "segment_rounds",
    "segmentation_from_truth",
    "round_accesses",
    "extract_observation",
]

N_ROUNDS = 10


class SegmentationError(Exception):
    """Round boundaries could not be recovered from the window stream."""


class InsufficientDataError(Exception):
    """Not enough observations to attempt (or trust) key recovery."""


class ObservationWindow:
    """One scheduling window: per-set observed activity counts."""

    __slots__ = ("index", "counts")

    def __init__(self, index, counts):
        self.index = index
        self.counts = counts

    def __repr__(self):
        hot = np.flatnonzero(self.counts)
        inner = " ".join(f"{s}:{self.counts[s]:g}" for s in hot[:8])
        more = " ..." if len(hot) > 8 else ""
        return f"ObservationWindow({self.index}, {{{inner}{more}}})"


class SynthesisTruth:
    """Ground truth retained by the synthesizer for calibration and tests."""

    def __init__(self, granularity, round_window_ranges, data_window_ranges, data_true_windows):
        self.granularity = granularity
        self.round_window_ranges = round_window_ranges
        self.data_window_ranges = data_window_ranges
        self.data_true_windows = data_true_windows


class ObservationRun:
    """Window-by-window observation of a single traced encryption."""

    def __init__(self, counts, granularity, style=None, filtered=False, truth=None):
        self.counts = np.asarray(counts, dtype=np.float64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a (windows, sets) matrix")
        self.granularity = int(granularity)
        self.style = Style(style) if style is not None else None
        self.filtered = bool(filtered)
        self.truth = truth

    @property
    def n_windows(self):
        return self.counts.shape[0]

    @property
    def n_sets(self):
        return self.counts.shape[1]

    def window(self, index):
        return ObservationWindow(index, self.counts[index])

    def windows(self):
        return [ObservationWindow(i, self.counts[i]) for i in range(self.n_windows)]

    def __len__(self):
        return self.n_windows

    # -- serialization ----------------------------------------------------

    def to_csv(self):
        lines = [
            "# observation windows",
            f"# granularity: {self.granularity}",
            f"# windows: {self.n_windows}",
            f"# sets: {self.n_sets}",
            f"# filtered: {'true' if self.filtered else 'false'}",
        ]
        if self.style is not None:
            lines.append(f"# style: {self.style.value}")
        lines.append("window_index,set,count")
        for w, s in zip(*np.nonzero(self.counts)):
            lines.append(f"{w},{s},{self.counts[w, s]:g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        granularity = None
        n_windows = None
        n_sets = 64
        filtered = False
        style = None
        rows = []
        header_seen = False
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    key, value = key.strip(), value.strip()
                    if key == "granularity":
                        granularity = int(value)
                    elif key == "windows":
                        n_windows = int(value)
                    elif key == "sets":
                        n_sets = int(value)
                    elif key == "filtered":
                        filtered = value == "true"
                    elif key == "style":
                        style = value
                continue
            if not header_seen:
                if line != "window_index,set,count":
                    raise ValueError(f"line {lineno}: expected CSV header, got {raw!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected window_index,set,count")
            rows.append((int(parts[0]), int(parts[1]), float(parts[2])))
        if granularity is None or n_windows is None:
            raise ValueError("missing granularity/windows header")
        counts = np.zeros((n_windows, n_sets))
        for w, s, c in rows:
            counts[w, s] = c
        return cls(counts, granularity, style=style, filtered=filtered)


def _event_arrays(trace):
    ev = np.array([(e.round, e.load, e.table, e.entry, e.set, int(e.prefetch)) for e in trace.events], dtype=np.int64)
    return ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3], ev[:, 4], ev[:, 5].astype(bool)


def synthesize_observations(trace, profile, rng, geometry=DEFAULT_GEOMETRY):
    """Render one traced encryption through the noisy observation channel.

    ``rng`` is a ``numpy.random.Generator``; identical (trace, profile,
    rng state) triples produce identical runs.  With a noise-free profile
    and a granularity of at least the trace length, the run collapses to
    a single window whose per-set counts equal the trace's access
    multiset.
    """
    layout = trace.layout
    g = profile.interrupt_granularity
    rounds, loads, tables, entries, sets_, is_pf = _event_arrays(trace)
    n_ev = len(rounds)
    lines = entries // layout.entries_per_line

    # 1. replay multiplicities (prefetch sweeps are never replayed)
    m = np.ones(n_ev, dtype=np.int64)
    if profile.has_replay:
        data = ~is_pf
        mean = np.clip(profile.replay_base + profile.replay_slope * loads[data], 1.0, 16.0)
        m[data] = np.minimum(rng.geometric(1.0 / mean), 16)

    ends = np.cumsum(m)
    starts = ends - m
    total_services = int(ends[-1])
    n_windows = math.ceil(total_services / g)
    w_first = starts // g  # true window of each event's first service

    first_idx = np.searchsorted(rounds, np.arange(N_ROUNDS))
    last_end = np.append(first_idx[1:], n_ev)
    round_ranges = []
    data_ranges = []
    for r in range(N_ROUNDS):
        lo_s = int(starts[first_idx[r]])
        hi_s = int(ends[last_end[r] - 1])
        pf_in_round = is_pf[first_idx[r] : last_end[r]]
        data_lo_s = int(starts[first_idx[r] + int(pf_in_round.sum())])
        round_ranges.append((lo_s // g, (hi_s - 1) // g + 1))
        data_ranges.append((data_lo_s // g, (hi_s - 1) // g + 1))

    drop_prob, spurious_per_round, keep_prob = sampler_knobs(profile, layout)

    # 2. drops: a missed line is missed for the whole round
    kept = np.ones(n_ev, dtype=bool)
    if drop_prob > 0.0:
        data = ~is_pf
        key = (rounds * layout.n_tables + tables) * layout.lines_per_table + lines
        uniq, inverse = np.unique(key[data], return_inverse=True)
        kept_group = rng.random(len(uniq)) >= drop_prob
        kept[data] = kept_group[inverse]
        kept[is_pf] = rng.random(int(is_pf.sum())) >= drop_prob

    # 3. displacement: surviving loads land in a wrong window of their round
    base_w = w_first.copy()
    if keep_prob < 1.0:
        displaced = kept & (rng.random(n_ev) >= keep_prob)
        if displaced.any():
            lo = np.array([round_ranges[r][0] for r in rounds[displaced]])
            hi = np.array([round_ranges[r][1] for r in rounds[displaced]])
            span = hi - lo
            draw = (rng.random(int(displaced.sum())) * np.maximum(span - 1, 1)).astype(np.int64)
            rel_true = w_first[displaced] - lo
            draw = np.where((draw >= rel_true) & (span > 1), draw + 1, draw)
            base_w[displaced] = lo + np.minimum(draw, span - 1)
        in_place = kept & ~displaced
    else:
        in_place = kept.copy()

    # 4. materialize the service stream into window counts
    counts = np.zeros((n_windows, geometry.sets))
    ev_of_service = np.repeat(np.arange(n_ev), m)
    k_of_service = np.arange(total_services) - starts[ev_of_service]
    natural_w = np.arange(total_services) // g
    moved_w = base_w[ev_of_service] + k_of_service // g
    hi_of_service = np.array([round_ranges[r][1] for r in range(N_ROUNDS)])[rounds[ev_of_service]]
    moved_w = np.minimum(moved_w, hi_of_service - 1)
    w_of_service = np.where(in_place[ev_of_service], natural_w, moved_w)
    live = kept[ev_of_service]
    np.add.at(counts, (w_of_service[live], sets_[ev_of_service][live]), 1.0)

    # 5. spurious in-region activity
    if spurious_per_round > 0.0:
        region = np.array(layout.region_sets())
        n_sp = rng.poisson(spurious_per_round, N_ROUNDS)
        for r in range(N_ROUNDS):
            if n_sp[r] == 0:
                continue
            lo, hi = round_ranges[r]
            w_sp = rng.integers(lo, hi, size=n_sp[r])
            s_sp = rng.choice(region, size=n_sp[r])
            np.add.at(counts, (w_sp, s_sp), 1.0)

    # 6. scheduler context switches pollute every window
    baselines = profile.context_switch.baselines
    if baselines.any():
        counts += profile.context_switch.draw(rng, n_windows)

    truth = SynthesisTruth(
        granularity=g,
        round_window_ranges=round_ranges,
        data_window_ranges=data_ranges,
        data_true_windows=w_first[~is_pf].copy(),
    )
    return ObservationRun(counts, g, style=trace.style, truth=truth)


def filter_noise(run, context_switch):
    """Subtract expected context-switch pollution from a run.

    Obscured sets (expected baseline at full associativity) carry no
    signal and are zeroed; other sets have their expected baseline
    subtracted with a floor of zero.  Filtering is idempotent: filtering
    an already-filtered run returns it unchanged.
    """
    if run.filtered:
        return run
    profile = getattr(context_switch, "context_switch", context_switch)
    counts = run.counts - profile.baselines[np.newaxis, :]
    np.clip(counts, 0.0, None, out=counts)
    counts[:, profile.obscured_sets] = 0.0
    return ObservationRun(counts, run.granularity, style=run.style, filtered=True, truth=run.truth)


class RoundSegmentation:
    """Estimated data-window span of each cipher round."""

    def __init__(self, ranges, confident, method):
        if len(ranges) != N_ROUNDS:
            raise ValueError(f"expected {N_ROUNDS} round ranges")
        self.ranges = [(int(a), int(b)) for a, b in ranges]
        self.confident = list(confident)
        self.method = method

    def __iter__(self):
        return iter(self.ranges)

    def __repr__(self):
        return f"RoundSegmentation({self.method}, {self.ranges})"


def segmentation_from_truth(run):
    """Oracle segmentation from the synthesizer's ground truth."""
    if run.truth is None:
        raise ValueError("observation run carries no synthesis ground truth")
    return RoundSegmentation(run.truth.data_window_ranges, [True] * N_ROUNDS, "ground-truth")


def segment_rounds(run, layout, prefetch="none", min_burst_score=0.15):
    """Locate each round's data windows in the observation stream.

    Without prefetching every round issues a fixed number of loads, so
    the stream partitions uniformly; the result is flagged low-confidence
    when windows straddle round boundaries (and is simply wrong if the
    victim replays loads - replay changes the stream length
    unpredictably, which is exactly why the prefetch anchor matters).

    With per-round prefetching, each round opens with a sweep of every
    table line in a fixed order.  That sweep is matched against the
    window stream (one window of slack per line, scored by the fraction
    of lines seen near their expected offset) and the ten best
    mutually-spaced burst starts are selected by dynamic programming.
    Raises :class:`SegmentationError` when fewer than ten credible
    bursts exist.
    """
    n_w = run.n_windows
    g = run.granularity
    if prefetch == "none":
        bounds = [round(r * n_w / N_ROUNDS) for r in range(N_ROUNDS + 1)]
        exact = n_w % N_ROUNDS == 0
        ranges = [(bounds[r], bounds[r + 1]) for r in range(N_ROUNDS)]
        return RoundSegmentation(ranges, [exact] * N_ROUNDS, "uniform")
    if prefetch != "per_round":
        raise ValueError(f"unknown prefetch mode {prefetch!r}")

    total_lines = layout.n_tables * layout.lines_per_table
    burst_w = math.ceil(total_lines / g)
    gap = burst_w + max(1, math.ceil(16 / g))
    if n_w < N_ROUNDS * gap:
        raise SegmentationError(f"{n_w} windows cannot hold {N_ROUNDS} prefetched rounds")

    occupied = run.counts > 0
    n_cand = n_w - burst_w
    score = np.zeros(n_cand)
    strict = np.zeros(n_cand)
    for t in range(layout.n_tables):
        for line in range(layout.lines_per_table):
            s = layout.set_of_line(t, line)
            wo = (t * layout.lines_per_table + line) // g
            col = occupied[:, s]
            padded = np.concatenate(([False], col, [False]))
            near = padded[:-2] | padded[1:-1] | padded[2:]
            score += near[wo : wo + n_cand]
            strict += col[wo : wo + n_cand]
    score /= total_lines
    strict /= total_lines

    # pick 10 burst starts, pairwise spacing >= gap, maximizing total score
    neg = -1e18
    dp = np.full((N_ROUNDS, n_cand), neg)
    parent = np.zeros((N_ROUNDS, n_cand), dtype=np.int64)
    dp[0] = score
    for k in range(1, N_ROUNDS):
        best = np.full(n_cand, neg)
        best_idx = np.zeros(n_cand, dtype=np.int64)
        running, running_idx = neg, 0
        for w in range(n_cand):
            if w - gap >= 0:
                if dp[k - 1, w - gap] > running:
                    running, running_idx = dp[k - 1, w - gap], w - gap
            best[w], best_idx[w] = running, running_idx
        valid = best > neg / 2
        dp[k, valid] = score[valid] + best[valid]
        parent[k] = best_idx
    w = int(np.argmax(dp[N_ROUNDS - 1]))
    if dp[N_ROUNDS - 1, w] <= neg / 2:
        raise SegmentationError("no spacing-feasible burst placement")
    starts = [0] * N_ROUNDS
    for k in range(N_ROUNDS - 1, -1, -1):
        starts[k] = w
        w = int(parent[k, w])
    # the slack makes scores plateau around the true start; snap each
    # pick to the neighbor where lines sit exactly at their expected offset
    for k in range(N_ROUNDS):
        s0 = starts[k]
        for c in (s0 - 1, s0 + 1):
            if 0 <= c < n_cand and strict[c] > strict[starts[k]] + 1e-12:
                starts[k] = c
    burst_scores = [float(score[s]) for s in starts]
    if min(burst_scores) < min_burst_score:
        raise SegmentationError(
            f"weakest prefetch burst scored {min(burst_scores):.2f} < {min_burst_score:.2f}"
        )
    ranges = []
    for k in range(N_ROUNDS):
        stop = starts[k + 1] if k + 1 < N_ROUNDS else n_w
        ranges.append((starts[k] + burst_w, stop))
    confident = [sc >= 0.5 for sc in burst_scores]
    return RoundSegmentation(ranges, confident, "prefetch")


class RoundAccesses:
    """Aggregated per-set activity of one round's data windows."""

    def __init__(self, counts, mean_window, first_window, window_counts):
        self.counts = counts
        self.mean_window = mean_window
        self.first_window = first_window
        self.window_counts = window_counts

    def observed_sets(self):
        return np.flatnonzero(self.counts > 0)


def round_accesses(run, segmentation, rnd):
    """Collapse one round's windows into per-set counts and positions.

    Repeated activity on a set within the round counts as a single
    access for membership purposes but keeps its full activity count,
    the (count-weighted) mean window position, and the raw per-window
    breakdown; the replay analysis consumes the counts and the key
    search matches window positions against load program order.  Window
    positions are reported relative to the round's first data window.
    """
    lo, hi = segmentation.ranges[rnd]
    block = run.counts[lo:hi]
    counts = block.sum(axis=0)
    w = np.arange(block.shape[0], dtype=np.float64)
    with np.errstate(invalid="ignore"):
        mean = (block * w[:, np.newaxis]).sum(axis=0) / counts
    occ = block > 0
    any_occ = occ.any(axis=0)
    first = np.where(any_occ, occ.argmax(axis=0), np.nan)
    mean = np.where(any_occ, mean, np.nan)
    return RoundAccesses(counts, mean, first, block.copy())


class EncryptionObservation:
    """Everything the key-recovery stage keeps from one encryption."""

    __slots__ = ("plaintext", "round1", "round2")

    def __init__(self, plaintext, round1, round2):
        self.plaintext = np.array(bytearray(plaintext), dtype=np.uint8)
        if self.plaintext.shape != (16,):
            raise ValueError("plaintext must be 16 bytes")
        self.round1 = round1
        self.round2 = round2


def extract_observation(run, segmentation, plaintext):
    """Reduce a run to the two leading rounds used for key recovery."""
    return EncryptionObservation(
        plaintext,
        round_accesses(run, segmentation, 0),
        round_accesses(run, segmentation, 1),
    )
