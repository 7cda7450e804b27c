"""Noise model of the interrupt-driven observation channel.

A :class:`NoiseProfile` bundles everything that separates the adversary's
view from the ground truth:

* membership noise - published as true-positive / false-positive /
  false-negative rates of observed per-round set accesses,
* an ordering rate - how often an observed access sits in the window
  where it really happened,
* out-of-order replay - speculative re-issue of loads across interrupts,
  drawn per load with a position-dependent mean count,
* the interrupt granularity (victim loads serviced per window), and
* a :class:`~aesleak.cache.ContextSwitchProfile` for scheduler pollution.

The published rates use per-round *set membership* accounting: for round
``r`` let ``U_r`` be the sets truly accessed and ``O_r`` the sets observed
anywhere in the round's windows (both restricted to the table region).
Then

    TP = |O and U| / |O|,   FP = |O less U| / |O|,   FN = |U less O| / |U|

so TP + FP = 1 by construction, and an observed access is *ordered* when
the window of its first true load is among the windows where its set was
seen.  ``sampler_knobs`` inverts those targets into the internal drop /
injection / displacement probabilities the synthesizer actually uses.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .cache import ContextSwitchProfile

MAX_REPLAY = 16


class NoiseProfile:
    """Channel noise parameters, stored as published calibration targets."""

    def __init__(
        self,
        true_positive_rate=1.0,
        false_positive_rate=0.0,
        false_negative_rate=0.0,
        ordered_fraction=1.0,
        replay_base=1.0,
        replay_slope=0.0,
        interrupt_granularity=2,
        context_switch=None,
        name="custom",
    ):
        for label, v in [
            ("true_positive_rate", true_positive_rate),
            ("false_positive_rate", false_positive_rate),
            ("false_negative_rate", false_negative_rate),
            ("ordered_fraction", ordered_fraction),
        ]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{label} must lie in [0, 1], got {v}")
        if abs(true_positive_rate - (1.0 - false_positive_rate)) > 0.05:
            # membership accounting forces TP = 1 - FP; published rows
            # satisfy this up to rounding
            raise ValueError("true_positive_rate must equal 1 - false_positive_rate (within 0.05)")
        if replay_base < 1.0 or replay_slope < 0.0:
            raise ValueError("replay_base must be >= 1 and replay_slope >= 0")
        if int(interrupt_granularity) < 1:
            raise ValueError("interrupt_granularity must be a positive integer")
        self.true_positive_rate = float(true_positive_rate)
        self.false_positive_rate = float(false_positive_rate)
        self.false_negative_rate = float(false_negative_rate)
        self.ordered_fraction = float(ordered_fraction)
        self.replay_base = float(replay_base)
        self.replay_slope = float(replay_slope)
        self.interrupt_granularity = int(interrupt_granularity)
        self.context_switch = context_switch or ContextSwitchProfile.zero()
        self.name = name

    @property
    def has_replay(self):
        return self.replay_base > 1.0 or self.replay_slope > 0.0

    def replay_mean(self, position):
        """Mean service count of the load at ``position`` (0-15)."""
        return float(np.clip(self.replay_base + self.replay_slope * position, 1.0, MAX_REPLAY))

    # -- serialization ----------------------------------------------------

    def to_text(self):
        lines = [
            "# noise profile",
            f"name {self.name}",
            f"true_positive_rate {self.true_positive_rate:g}",
            f"false_positive_rate {self.false_positive_rate:g}",
            f"false_negative_rate {self.false_negative_rate:g}",
            f"ordered_fraction {self.ordered_fraction:g}",
            f"replay_base {self.replay_base:g}",
            f"replay_slope {self.replay_slope:g}",
            f"interrupt_granularity {self.interrupt_granularity}",
        ]
        for s, v in enumerate(self.context_switch.baselines):
            if v:
                lines.append(f"context_switch {s} {v:g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {}
        cs = np.zeros(64)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "context_switch":
                if len(parts) != 3:
                    raise ValueError(f"line {lineno}: expected `context_switch set baseline`")
                cs[int(parts[1])] = float(parts[2])
            elif parts[0] == "name":
                fields["name"] = parts[1]
            elif len(parts) == 2:
                fields[parts[0]] = parts[1]
            else:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}")
        known = {
            "true_positive_rate": float,
            "false_positive_rate": float,
            "false_negative_rate": float,
            "ordered_fraction": float,
            "replay_base": float,
            "replay_slope": float,
            "interrupt_granularity": int,
        }
        kwargs = {}
        for key, value in fields.items():
            if key == "name":
                kwargs["name"] = value
                continue
            if key not in known:
                raise ValueError(f"unknown noise profile field {key!r}")
            kwargs[key] = known[key](value)
        kwargs["context_switch"] = ContextSwitchProfile(cs)
        return cls(**kwargs)

    def digest(self):
        """Stable short hash of the profile for run manifests."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def noise_free(interrupt_granularity=2):
    """Perfect channel: every access observed, in place, exactly once."""
    return NoiseProfile(interrupt_granularity=interrupt_granularity, name="noise-free")


def table1_four_ttable():
    """Published channel quality against the four-table cipher.

    Roughly 55% of observed per-round accesses are real (44% spurious),
    56% of true accesses are missed, and 77% of the real ones appear in
    the right window.
    """
    return NoiseProfile(
        true_positive_rate=0.55,
        false_positive_rate=0.44,
        false_negative_rate=0.56,
        ordered_fraction=0.77,
        name="table1-four-ttable",
    )


def table1_large_ttable():
    """Published channel quality against the large-entry table cipher."""
    return NoiseProfile(
        true_positive_rate=0.75,
        false_positive_rate=0.24,
        false_negative_rate=0.12,
        ordered_fraction=0.67,
        name="table1-large-ttable",
    )


def sbox_replay(replay_base=2.0, replay_slope=1.0):
    """Replay-dominated channel seen against the compact S-box cipher.

    Membership noise is negligible there; the distortion is speculative
    re-issue, growing with the load's position in the round so that
    per-line per-round counts span roughly nine to ninety.  The storm
    that triggers replay also means windows hold a single service each.
    """
    return NoiseProfile(
        replay_base=replay_base,
        replay_slope=replay_slope,
        interrupt_granularity=1,
        name="sbox-replay",
    )


def _membership_expectations(layout):
    """(region size R, expected |U_r|) under uniform table entries."""
    region = len(layout.region_sets())
    loads_per_table = 16 // layout.n_tables
    l = layout.lines_per_table
    u = layout.n_tables * l * (1.0 - (1.0 - 1.0 / l) ** loads_per_table)
    return region, u


def sampler_knobs(profile, layout):
    """Invert the published targets into internal sampler probabilities.

    Returns ``(drop_prob, spurious_per_round, keep_window_prob)``:

    * ``drop_prob`` - probability that a truly accessed line goes
      entirely unobserved for the round,
    * ``spurious_per_round`` - Poisson mean of injected in-region
      accesses per round,
    * ``keep_window_prob`` - probability a surviving load is reported in
      its true window (otherwise it is displaced within the round).

    The inversion accounts for spurious hits masking drops: a dropped
    line still shows up as observed when an injected access lands on its
    set, so the drop probability must exceed the target miss rate.
    """
    fn = profile.false_negative_rate
    fp = profile.false_positive_rate
    if fn == 0.0 and fp == 0.0:
        return 0.0, 0.0, _keep_prob(profile, 0.0, 0.0)
    region, u = _membership_expectations(layout)
    q = 0.0  # P(a given region set receives >= 1 spurious access in a round)
    d = fn
    for _ in range(25):
        d = min(fn / (1.0 - q), 1.0) if q < 1.0 else 1.0
        if fp == 0.0:
            q = 0.0
            break
        denom = (1.0 - fp) * (region - u) - fp * u * d
        if denom <= 0:
            raise ValueError("false_positive_rate target unreachable for this table layout")
        q = fp * u * (1.0 - d) / denom
        q = min(max(q, 0.0), 0.999)
    lam = -region * math.log(1.0 - q) if q > 0 else 0.0
    return d, lam, _keep_prob(profile, d, q)


def _keep_prob(profile, d, q):
    """Displacement keep-probability hitting the ordered target.

    Matched sets split into survivors (fraction ``1 - d``) and dropped
    lines masked by spurious hits (``d * q``); only survivors can land in
    their true window on purpose, masked ones do so by luck ``1 / W``.
    """
    target = profile.ordered_fraction
    w = max(16 // profile.interrupt_granularity, 2)
    matched = (1.0 - d) + d * q
    if matched <= 0:
        return 1.0
    p = (target * matched - d * q / w) / (1.0 - d) if d < 1.0 else 1.0
    return float(min(max(p, 0.0), 1.0))


class NoiseStats:
    """Measured channel statistics from (ground truth, observation) pairs."""

    def __init__(self, matched, observed, missed, true_count, ordered, ordered_den):
        self.n_matched = matched
        self.n_observed = observed
        self.n_missed = missed
        self.n_true = true_count
        self.true_positive_rate = matched / observed if observed else float("nan")
        self.false_positive_rate = (observed - matched) / observed if observed else float("nan")
        self.false_negative_rate = missed / true_count if true_count else float("nan")
        self.ordered_fraction = ordered / ordered_den if ordered_den else float("nan")

    def as_dict(self):
        return {
            "true_positive_rate": self.true_positive_rate,
            "false_positive_rate": self.false_positive_rate,
            "false_negative_rate": self.false_negative_rate,
            "ordered_fraction": self.ordered_fraction,
        }

    def __repr__(self):
        return (
            f"NoiseStats(tp={self.true_positive_rate:.3f} fp={self.false_positive_rate:.3f} "
            f"fn={self.false_negative_rate:.3f} ordered={self.ordered_fraction:.3f})"
        )


def measure_noise_statistics(pairs):
    """Measure TP/FP/FN/ordered over ``(trace, observation_run)`` pairs.

    Uses the membership definitions documented on this module.  The runs
    must have been produced by the synthesizer (their ground-truth
    window bookkeeping is required).  Prefetch-free traces should be
    used for calibration: prefetch sweeps touch every line by design and
    would drown the data-access statistics.
    """
    matched = observed = missed = true_count = ordered = ordered_den = 0
    for trace, run in pairs:
        truth = run.truth
        if truth is None:
            raise ValueError("observation run carries no synthesis ground truth")
        layout = trace.layout
        region = np.array(layout.region_sets())
        occupied = run.counts > 0
        for rnd in range(10):
            lo, hi = truth.round_window_ranges[rnd]
            ev = [e for e in trace.round_events(rnd)]
            u_sets = {e.set for e in ev}
            block = occupied[lo:hi]
            o_sets = {int(s) for s in region[block[:, region].any(axis=0)]}
            inter = o_sets & u_sets
            matched += len(inter)
            observed += len(o_sets)
            missed += len(u_sets - o_sets)
            true_count += len(u_sets)
            if not inter:
                continue
            first_window = {}
            for e, w in zip(trace.data_events(), truth.data_true_windows):
                if e.round == rnd and (e.set not in first_window or w < first_window[e.set]):
                    first_window[e.set] = w
            for s in inter:
                ordered_den += 1
                tw = first_window[s]
                if lo <= tw < hi and occupied[tw, s]:
                    ordered += 1
    return NoiseStats(matched, observed, missed, true_count, ordered, ordered_den)
