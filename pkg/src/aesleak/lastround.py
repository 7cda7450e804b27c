"""Ciphertext-only correlation attack on the compact S-box cipher.

The 256-byte S-box spans only four cache lines, so line-granular
observations resolve just two bits per table load and the two-round
membership attack used against the T-table styles does not apply.  The
last round leaks differently: every ciphertext byte is
``SBOX[x] XOR k10`` for a state byte ``x`` read through the table, so a
guess of the round-10 key byte predicts which of the four lines the
matching load touched (``INV_SBOX[c XOR k] >> 6``).  Correlating those
one-hot predictions against observed per-line access counts over many
ciphertexts ranks the 256 guesses per byte position.

Two leakage readings are supported: raw per-line counts ("absolute")
and per-observation normalized rows with outlier trimming ("relative"),
the latter matching how replay-inflated channels are best read.  Under
the replay channel the per-load service count grows with the load's
position in the round, so later byte positions carry more signal and
are recovered first; earlier positions need more ciphertexts or can be
finished by a ranked brute-force search once at most four remain.  The
recovered round-10 key inverts through the key schedule to the master
key.
"""

import numpy as np

from .aes import (
    INV_SBOX,
    RCON,
    SBOX,
    Style,
    TableLayout,
    encrypt_batch,
    encrypt_traced,
    expand_key,
    invert_key_schedule,
)
from .observe import (
    InsufficientDataError,
    SegmentationError,
    round_accesses,
    segment_rounds,
    synthesize_observations,
)

__all__ = [
    "LeakageMatrix",
    "CorrelationResult",
    "LastRoundRecovery",
    "predict_line",
    "build_prediction",
    "build_leakage",
    "correlate_key_byte",
    "recover_last_round_key",
    "run_lastround_trial",
    "first_order_success_rate",
    "position_correlation_profile",
    "correlations_to_csv",
    "ranking_report",
]

_INV_SBOX = np.array(INV_SBOX, dtype=np.uint8)
_SBOX = np.array(SBOX, dtype=np.uint8)
_LAST_ROUND = 9
_N_LINES = 4


# ---------------------------------------------------------------------------
# predictions


def predict_line(ciphertext_byte, key_guess):
    """S-box line read by the last-round load behind one ciphertext byte.

    The pre-substitution state byte is ``INV_SBOX[c XOR k]``; its two
    most significant bits select the 64-byte line.
    """
    c = int(ciphertext_byte)
    k = int(key_guess)
    if not (0 <= c <= 255 and 0 <= k <= 255):
        raise ValueError("byte values must lie in [0, 255]")
    return int(_INV_SBOX[c ^ k]) >> 6


def build_prediction(ciphertexts, key_guess, position):
    """One-hot prediction matrix for a (key-byte guess, position) pair.

    Row ``j`` is one-hot at ``predict_line(ciphertexts[j][position],
    key_guess)``; shape ``(n, 4)``, each row summing to 1.
    """
    cts = _ciphertext_array(ciphertexts)
    if not 0 <= int(position) <= 15:
        raise ValueError("position must lie in [0, 15]")
    lines = _INV_SBOX[cts[:, position] ^ np.uint8(key_guess)] >> 6
    out = np.zeros((cts.shape[0], _N_LINES))
    out[np.arange(cts.shape[0]), lines] = 1.0
    return out


def _ciphertext_array(ciphertexts):
    cts = np.asarray(
        [np.frombuffer(bytes(bytearray(c)), dtype=np.uint8) if not isinstance(c, np.ndarray) else c for c in ciphertexts],
        dtype=np.uint8,
    )
    if cts.ndim != 2 or cts.shape[1] != 16:
        raise ValueError("ciphertexts must be 16 bytes each")
    return cts


# ---------------------------------------------------------------------------
# leakage


class LeakageMatrix:
    """Observed last-round S-box line activity, one row per usable run.

    ``counts`` has shape ``(m, 4)``; ``kept`` holds the indices of the
    input runs behind each row so callers can align ciphertexts;
    ``excluded`` records ``(index, reason)`` for dropped runs.
    """

    __slots__ = ("counts", "mode", "kept", "excluded")

    def __init__(self, counts, mode, kept, excluded):
        self.counts = counts
        self.mode = mode
        self.kept = kept
        self.excluded = excluded

    def __len__(self):
        return self.counts.shape[0]

    def __repr__(self):
        return f"LeakageMatrix(rows={len(self)}, mode={self.mode!r}, excluded={len(self.excluded)})"


def build_leakage(
    runs,
    layout=None,
    mode="relative",
    outlier_quantiles=(0.05, 0.95),
    segmentations=None,
    prefetch="none",
):
    """Collapse observation runs into per-line last-round access counts.

    ``mode="absolute"`` keeps raw counts; ``mode="relative"`` drops rows
    whose totals fall outside the configured quantiles of the batch,
    then normalizes each remaining row to sum 1.  Runs whose rounds
    cannot be segmented are excluded and recorded, not fatal.
    """
    layout = layout or TableLayout(Style.SBOX)
    if layout.style is not Style.SBOX:
        raise ValueError("last-round line counting expects the single S-box layout")
    if mode not in ("absolute", "relative"):
        raise ValueError("mode must be 'absolute' or 'relative'")
    line_sets = np.array([layout.set_of_line(0, g) for g in range(_N_LINES)])

    rows, kept, excluded = [], [], []
    for i, run in enumerate(runs):
        try:
            seg = (
                segmentations[i]
                if segmentations is not None
                else segment_rounds(run, layout, prefetch=prefetch)
            )
            rows.append(round_accesses(run, seg, _LAST_ROUND).counts[line_sets])
            kept.append(i)
        except SegmentationError as exc:
            excluded.append((i, f"segmentation failed: {exc}"))
    counts = np.array(rows, dtype=np.float64).reshape(len(rows), _N_LINES)
    kept = np.array(kept, dtype=np.int64)

    if mode == "relative" and len(counts):
        totals = counts.sum(axis=1)
        lo, hi = np.quantile(totals, outlier_quantiles)
        good = (totals >= lo) & (totals <= hi) & (totals > 0)
        for i in kept[~good]:
            excluded.append((int(i), "outlier row total"))
        counts, kept = counts[good], kept[good]
        counts = counts / counts.sum(axis=1, keepdims=True)
    return LeakageMatrix(counts, mode, kept, excluded)


# ---------------------------------------------------------------------------
# correlation


class CorrelationResult:
    """Guess scores for one byte position of the round-10 key."""

    __slots__ = ("position", "scores", "ranking", "degenerate")

    def __init__(self, position, scores, ranking, degenerate):
        self.position = position
        self.scores = scores
        self.ranking = ranking
        self.degenerate = degenerate

    @property
    def best_guess(self):
        return int(self.ranking[0])

    @property
    def best_correlation(self):
        return float(self.scores[self.ranking[0]])

    @property
    def margin(self):
        return float(self.scores[self.ranking[0]] - self.scores[self.ranking[1]])

    def __repr__(self):
        return (
            f"CorrelationResult(position={self.position}, best=0x{self.best_guess:02x}, "
            f"r={self.best_correlation:.3f}, margin={self.margin:.3f})"
        )


def correlate_key_byte(leakage, ciphertexts, position, center_columns=True, per_column=False):
    """Pearson correlation of every key-byte guess against the leakage.

    The default flattens the ``n x 4`` prediction and leakage matrices
    to length-``4n`` vectors after removing per-line column means (so a
    line that is simply busier overall carries no spurious signal).
    ``per_column=True`` instead correlates each line's column separately
    and averages the four coefficients.  A leakage matrix with no
    variance yields a degenerate result with zero scores.
    """
    cts = _ciphertext_array(ciphertexts)
    L = np.asarray(leakage.counts if isinstance(leakage, LeakageMatrix) else leakage, dtype=np.float64)
    if isinstance(leakage, LeakageMatrix):
        cts = cts[leakage.kept]
    if L.shape != (cts.shape[0], _N_LINES):
        raise ValueError("leakage rows must align with ciphertexts")
    n = L.shape[0]
    if n < 2:
        return CorrelationResult(int(position), np.zeros(256), np.arange(256), True)
    guesses = np.arange(256, dtype=np.uint8)
    lines = (_INV_SBOX[cts[:, position][:, np.newaxis] ^ guesses[np.newaxis, :]] >> 6).astype(np.int64)

    Lc = L - L.mean(axis=0) if center_columns else L - L.mean()
    l_var = float((Lc**2).sum())
    if l_var < 1e-12:
        return CorrelationResult(int(position), np.zeros(256), np.arange(256), True)

    if per_column:
        scores = np.zeros(256)
        col_sd = Lc.std(axis=0)
        for k in range(256):
            A = np.zeros((n, _N_LINES))
            A[np.arange(n), lines[:, k]] = 1.0
            Ac = A - A.mean(axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                r = (Ac * Lc).mean(axis=0) / (Ac.std(axis=0) * col_sd)
            r = r[np.isfinite(r)]
            scores[k] = r.mean() if len(r) else 0.0
    elif center_columns:
        # One-hot structure collapses the flattened Pearson to a gather:
        # after column-centering L, sum(Ac * Lc) = sum_j Lc[j, line_j],
        # and sum(Ac^2) = n (1 - sum_g mean_g^2).
        num = Lc[np.arange(n)[:, np.newaxis], lines].sum(axis=0)
        freq = np.stack([(lines == g).mean(axis=0) for g in range(_N_LINES)], axis=1)
        a_var = n * (1.0 - (freq**2).sum(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            scores = num / np.sqrt(a_var * l_var)
        scores = np.where(np.isfinite(scores), scores, 0.0)
    else:
        lflat = Lc.ravel()
        scores = np.zeros(256)
        for k in range(256):
            A = np.zeros((n, _N_LINES))
            A[np.arange(n), lines[:, k]] = 1.0
            a = (A - A.mean()).ravel()
            denom = np.sqrt((a**2).sum() * l_var)
            scores[k] = float(a @ lflat / denom) if denom > 1e-12 else 0.0

    ranking = np.argsort(-scores, kind="stable")
    return CorrelationResult(int(position), scores, ranking, False)


# ---------------------------------------------------------------------------
# full-key recovery


class LastRoundRecovery:
    """Outcome of a last-round correlation attack."""

    __slots__ = (
        "rankings",
        "last_round_key",
        "resolved",
        "master_key",
        "completion",
        "n_used",
        "excluded",
    )

    def __init__(self, rankings, last_round_key, resolved, master_key, completion, n_used, excluded):
        self.rankings = rankings
        self.last_round_key = last_round_key
        self.resolved = resolved
        self.master_key = master_key
        self.completion = completion
        self.n_used = n_used
        self.excluded = excluded

    @property
    def claimed_bits(self):
        return 8 * sum(self.resolved)

    def __repr__(self):
        return (
            f"LastRoundRecovery(resolved={sum(self.resolved)}/16, "
            f"completion={self.completion!r}, n_used={self.n_used})"
        )


def _invert_schedule_batch(round_keys, round_index=10):
    """Batched inverse key expansion: ``(n, 16)`` round keys -> masters."""
    rk = np.atleast_2d(np.asarray(round_keys, dtype=np.uint8))
    n = rk.shape[0]
    base = 4 * round_index
    w = np.zeros((n, base + 4, 4), dtype=np.uint8)
    w[:, base : base + 4] = rk.reshape(n, 4, 4)
    for i in range(base + 3, 3, -1):
        t = w[:, i - 1]
        if i % 4 == 0:
            t = _SBOX[np.roll(t, -1, axis=1)].copy()
            t[:, 0] ^= RCON[i // 4]
        w[:, i - 4] = w[:, i] ^ t
    return w[:, :4].reshape(n, 16)


def _bruteforce_completion(base_key, unresolved, rankings, known_pair, limit, chunk=8192):
    """Search ranked candidates for the unresolved round-10 key bytes.

    Candidates are enumerated in growing per-position rank boxes (1, 2,
    4, ... 256) so highly ranked combinations are tried first; each
    candidate round-10 key is inverted to a master key and checked by
    encrypting the known plaintext.  Returns the master key or ``None``
    once ``limit`` combinations have been tried.
    """
    pt, ct = known_pair
    pt = np.frombuffer(bytes(bytearray(pt)), dtype=np.uint8)
    ct = np.frombuffer(bytes(bytearray(ct)), dtype=np.uint8)
    m = len(unresolved)
    cand = np.stack([rankings[p].ranking for p in unresolved]).astype(np.uint8)
    base = np.frombuffer(base_key, dtype=np.uint8)
    tried = 0
    level = 1
    while level <= 256:
        total = level**m
        floor = (level // 2) if level > 1 else 0
        for start in range(0, total, chunk):
            idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
            digits = np.empty((len(idx), m), dtype=np.int64)
            rem = idx
            for d in range(m - 1, -1, -1):
                digits[:, d] = rem % level
                rem = rem // level
            if floor:
                digits = digits[(digits >= floor).any(axis=1)]
            if not len(digits):
                continue
            keys10 = np.tile(base, (len(digits), 1))
            for d, p in enumerate(unresolved):
                keys10[:, p] = cand[d, digits[:, d]]
            masters = _invert_schedule_batch(keys10)
            outs = encrypt_batch(masters, np.tile(pt, (len(digits), 1)))
            hit = np.flatnonzero((outs == ct).all(axis=1))
            if len(hit):
                return bytes(masters[hit[0]])
            tried += len(digits)
            if tried >= limit:
                return None
        level *= 2
    return None


def recover_last_round_key(
    runs,
    ciphertexts,
    layout=None,
    mode="relative",
    center_columns=True,
    margin_threshold=0.02,
    min_observations=16,
    known_pair=None,
    max_bruteforce_bytes=4,
    bruteforce_limit=2**32,
    segmentations=None,
    outlier_quantiles=(0.05, 0.95),
    prefetch="none",
):
    """Rank every round-10 key byte and assemble the master key.

    A position counts as resolved when its rank-1 correlation leads
    rank 2 by at least ``margin_threshold``.  With all 16 resolved the
    round-10 key inverts directly; with at most ``max_bruteforce_bytes``
    unresolved and a ``known_pair`` of (plaintext, ciphertext), the
    remainder is brute-forced in ranking order; otherwise the result is
    partial and carries the rankings for the caller.
    """
    if len(runs) < min_observations:
        raise InsufficientDataError(
            f"need at least {min_observations} observations, got {len(runs)}"
        )
    leakage = build_leakage(
        runs,
        layout=layout,
        mode=mode,
        outlier_quantiles=outlier_quantiles,
        segmentations=segmentations,
        prefetch=prefetch,
    )
    if len(leakage) < min_observations:
        raise InsufficientDataError(
            f"only {len(leakage)} usable observations after exclusions, "
            f"need {min_observations}"
        )
    cts = _ciphertext_array(ciphertexts)
    rankings = [
        correlate_key_byte(leakage, cts, p, center_columns=center_columns) for p in range(16)
    ]
    resolved = [(not r.degenerate) and r.margin >= margin_threshold for r in rankings]
    last_round_key = bytes(r.best_guess for r in rankings)
    unresolved = [p for p in range(16) if not resolved[p]]

    master, completion = None, "partial"
    if not unresolved:
        master = bytes(invert_key_schedule(last_round_key, 10))
        completion = "direct"
        if known_pair is not None:
            pt, ct = known_pair
            check, _ = encrypt_traced(master, pt, Style.SBOX)
            if check != bytes(bytearray(ct)):
                master, completion = None, "failed-verification"
    elif len(unresolved) <= max_bruteforce_bytes and known_pair is not None:
        master = _bruteforce_completion(
            last_round_key, unresolved, rankings, known_pair, bruteforce_limit
        )
        completion = "bruteforce" if master is not None else "exhausted"

    return LastRoundRecovery(
        rankings,
        last_round_key,
        resolved,
        master,
        completion,
        len(leakage),
        leakage.excluded,
    )


# ---------------------------------------------------------------------------
# experiments


def run_lastround_trial(n_observations, profile, rng, mode="relative", **recover_kwargs):
    """One end-to-end experiment against a fresh random key.

    Synthesizes ``n_observations`` noisy runs, attacks them, and scores
    the per-position rank-1 guesses against the true round-10 key.
    Returns ``(bits_correct, recovery, true_key)`` where ``bits_correct``
    counts 8 bits per correct position.
    """
    key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    runs, cts = [], []
    first_pair = None
    for _ in range(n_observations):
        pt = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
        ct, trace = encrypt_traced(key, pt, Style.SBOX)
        runs.append(synthesize_observations(trace, profile, rng))
        cts.append(ct)
        if first_pair is None:
            first_pair = (pt, ct)
    recover_kwargs.setdefault("known_pair", first_pair)
    recovery = recover_last_round_key(runs, cts, mode=mode, **recover_kwargs)
    true_k10 = expand_key(key)[10]
    correct = [recovery.rankings[p].best_guess == int(true_k10[p]) for p in range(16)]
    return 8 * sum(correct), recovery, key


def first_order_success_rate(n_observations, trials, profile, mode="absolute", seed=None):
    """Fraction of byte positions whose rank-1 guess is correct.

    Averaged over ``trials`` independent keys; the headline synthetic
    benchmark uses 100 noise-free observations.
    """
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        bits, _, _ = run_lastround_trial(
            n_observations, profile, rng, mode=mode, known_pair=None
        )
        hits += bits // 8
    return hits / (16 * trials)


def position_correlation_profile(n_observations, trials, profile, mode="relative", seed=None):
    """Mean correct-key correlation per byte position over many keys.

    Under a replay channel whose service counts grow with load position
    the profile rises from position 0 to 15; the returned array feeds
    the monotonicity checks and position-vs-correlation plots.
    """
    rng = np.random.default_rng(seed)
    acc = np.zeros(16)
    for _ in range(trials):
        key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
        runs, cts = [], []
        for _ in range(n_observations):
            pt = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
            ct, trace = encrypt_traced(key, pt, Style.SBOX)
            runs.append(synthesize_observations(trace, profile, rng))
            cts.append(ct)
        leakage = build_leakage(runs, mode=mode)
        true_k10 = expand_key(key)[10]
        for p in range(16):
            res = correlate_key_byte(leakage, cts, p)
            acc[p] += res.scores[int(true_k10[p])]
    return acc / trials


# ---------------------------------------------------------------------------
# reports


def correlations_to_csv(rankings):
    """Full score dump as ``position,key_guess,correlation`` rows."""
    lines = ["position,key_guess,correlation"]
    for res in rankings:
        for k in range(256):
            lines.append(f"{res.position},{k},{res.scores[k]:.6f}")
    return "\n".join(lines) + "\n"


def ranking_report(recovery, top=5):
    """Human-readable per-position ranking table."""
    out = [
        "last-round key ranking",
        f"observations used: {recovery.n_used} (excluded: {len(recovery.excluded)})",
        f"resolved positions: {sum(recovery.resolved)}/16 ({recovery.claimed_bits} bits)",
        f"completion: {recovery.completion}",
    ]
    if recovery.master_key is not None:
        out.append(f"master key: {recovery.master_key.hex()}")
    out.append("pos  status    top guesses (correlation)")
    for p, res in enumerate(recovery.rankings):
        status = "resolved" if recovery.resolved[p] else "open"
        guesses = "  ".join(
            f"0x{int(k):02x} ({res.scores[k]:+.3f})" for k in res.ranking[:top]
        )
        out.append(f"{p:3d}  {status:<8}  {guesses}")
    return "\n".join(out) + "\n"
