"""AES-128 implementations instrumented to emit ground-truth table accesses.

Three lookup-table styles are modeled, differing only in how the round
function reads memory (the ciphertexts are identical):

``sbox``
    A single 256-entry, 1-byte-per-entry S-box read 16 times per round
    for all ten rounds (160 loads).  The table spans 4 cache lines.
``four_ttable``
    Four 1 KB T-tables of 256 32-bit entries.  Byte position ``i`` of the
    state is looked up in table ``i mod 4``; each table sees exactly 4
    loads per round, 40 per encryption, and spans 16 cache lines.
``large_ttable``
    One 2 KB table of 256 64-bit entries, each holding two copies of the
    32-bit T-table value so the four logical tables become byte-offset
    reads of a single table.  8 entries share a cache line (32 lines).

Every table load is recorded as a :class:`TraceEvent` carrying the round
(0-9), the load index within the round, the logical table, the entry
index, and the derived cache set.  An optional per-round prefetch sweep
touches every line of every table before the round's data loads; those
events are flagged so channel models can treat them separately.

The first-round entries equal ``p XOR k0`` byte for byte, and the last
round reads ``state9`` through the same tables (masked output), which is
what the recovery engines exploit.
"""

from __future__ import annotations

import math
from collections import namedtuple
from enum import Enum

import numpy as np

from .cache import DEFAULT_GEOMETRY, set_index

SBOX = [
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
]

INV_SBOX = [0] * 256
for _i, _v in enumerate(SBOX):
    INV_SBOX[_v] = _i

RCON = [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36]

#: Load order of the state bytes within a round: load ``l`` reads state
#: byte ``SHIFT_ORDER[l]`` (the ShiftRows source of output byte ``l``).
SHIFT_ORDER = [0, 5, 10, 15, 4, 9, 14, 3, 8, 13, 2, 7, 12, 1, 6, 11]

# MixColumns matrix; column m of it scales the m-th table's S-box output.
_MC = [[2, 3, 1, 1], [1, 2, 3, 1], [1, 1, 2, 3], [3, 1, 1, 2]]


def _xtime(a):
    a <<= 1
    if a & 0x100:
        a ^= 0x11B
    return a & 0xFF


_XT = [_xtime(a) for a in range(256)]
_MUL3 = [a ^ _XT[a] for a in range(256)]


def _gmul(c, a):
    if c == 1:
        return a
    if c == 2:
        return _XT[a]
    if c == 3:
        return _MUL3[a]
    raise ValueError(c)


# T_WORDS[m][x] = big-endian word whose byte r is MC[r][m] * SBOX[x];
# the inner T-table round XORs four of these per output column.
T_WORDS = [
    [sum(_gmul(_MC[r][m], SBOX[x]) << (24 - 8 * r) for r in range(4)) for x in range(256)]
    for m in range(4)
]

# Single large-entry table: each 8-byte entry holds two copies of the
# 32-bit T0 value; logical table m is read at byte offset (4 - m) % 4.
LARGE_ENTRY_BYTES = [
    bytes((T_WORDS[0][x] >> (24 - 8 * r)) & 0xFF for r in range(4)) * 2 for x in range(256)
]

# Byte position inside a T-table word where the plain S-box output sits
# (a row where the MixColumns coefficient is 1), used by the masked
# last round.
_IDENTITY_ROW = [next(r for r in range(4) if _MC[r][m] == 1) for m in range(4)]


class Style(str, Enum):
    """Table-lookup style of the instrumented cipher."""

    SBOX = "sbox"
    FOUR_TTABLE = "four_ttable"
    LARGE_TTABLE = "large_ttable"


_STYLE_SHAPE = {
    # style -> (number of tables, entry size in bytes)
    Style.SBOX: (1, 1),
    Style.FOUR_TTABLE: (4, 4),
    Style.LARGE_TTABLE: (1, 8),
}


class TableLayout:
    """Placement of a style's lookup tables inside one 4 KB page.

    Tables are contiguous and page-packed by default (table ``t`` starts
    at ``t * 256 * entry_size``).  The layout exposes the entry-to-line
    and line-to-set maps the channel and the attacks share.
    """

    def __init__(self, style, bases=None, geometry=DEFAULT_GEOMETRY):
        style = Style(style)
        n_tables, entry_size = _STYLE_SHAPE[style]
        table_bytes = 256 * entry_size
        if bases is None:
            bases = [t * table_bytes for t in range(n_tables)]
        bases = list(bases)
        if len(bases) != n_tables:
            raise ValueError(f"{style.value} needs {n_tables} table base offsets")
        for b in bases:
            if b % geometry.line_size:
                raise ValueError("table base offsets must be line-aligned")
            if not 0 <= b <= 4096 - table_bytes:
                raise ValueError("table must fit inside one 4 KB page")
        self.style = style
        self.geometry = geometry
        self.n_tables = n_tables
        self.entry_size = entry_size
        self.bases = bases
        self.entries_per_line = geometry.line_size // entry_size
        self.lines_per_table = table_bytes // geometry.line_size

    def line_of_entry(self, entry):
        """Cache line (within its table) holding ``entry``."""
        if not 0 <= entry < 256:
            raise ValueError("entry index out of range")
        return entry // self.entries_per_line

    def set_of_line(self, table, line):
        return set_index(self.bases[table] + line * self.geometry.line_size, self.geometry)

    def set_of_entry(self, table, entry):
        return set_index(self.bases[table] + entry * self.entry_size, self.geometry)

    def table_sets(self, table):
        """Sets covered by one table, in line order."""
        return [self.set_of_line(table, l) for l in range(self.lines_per_table)]

    def region_sets(self):
        """Sorted list of every set any table maps to."""
        region = set()
        for t in range(self.n_tables):
            region.update(self.table_sets(t))
        return sorted(region)


TraceEvent = namedtuple("TraceEvent", ["round", "load", "table", "entry", "set", "prefetch"])


class AccessTrace:
    """Ground-truth sequence of table loads from one traced encryption."""

    def __init__(self, style, events, prefetch=False, layout=None):
        self.style = Style(style)
        self.events = events
        self.prefetch = prefetch
        self.layout = layout or TableLayout(self.style)

    def data_events(self):
        return [e for e in self.events if not e.prefetch]

    def round_events(self, rnd, include_prefetch=False):
        return [e for e in self.events if e.round == rnd and (include_prefetch or not e.prefetch)]

    def __len__(self):
        return len(self.events)

    def to_text(self):
        """Line-oriented dump: ``round load table entry set flags``."""
        out = [
            "# ground-truth access trace",
            f"# style: {self.style.value}",
            f"# prefetch: {'per_round' if self.prefetch else 'none'}",
            "# columns: round load table entry set flags",
        ]
        for e in self.events:
            flag = "P" if e.prefetch else "-"
            out.append(f"{e.round} {e.load} {e.table} {e.entry} {e.set} {flag}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text, layout=None):
        style = None
        prefetch = False
        events = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("style:"):
                    style = Style(body.split(":", 1)[1].strip())
                elif body.startswith("prefetch:"):
                    prefetch = body.split(":", 1)[1].strip() == "per_round"
                continue
            r, l, t, e, s, flag = line.split()
            events.append(TraceEvent(int(r), int(l), int(t), int(e), int(s), flag == "P"))
        if style is None:
            raise ValueError("trace text is missing its `# style:` header")
        return cls(style, events, prefetch=prefetch, layout=layout)


def _as_key_bytes(key):
    b = bytes(bytearray(key))
    if len(b) != 16:
        raise ValueError(f"AES-128 key must be 16 bytes, got {len(b)}")
    return b


def expand_key(key):
    """FIPS-197 key expansion.

    Returns the eleven round keys as a ``(11, 16)`` uint8 array; row 0 is
    the master key.
    """
    key = _as_key_bytes(key)
    w = [list(key[4 * i : 4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [SBOX[b] for b in t]
            t[0] ^= RCON[i // 4]
        w.append([a ^ b for a, b in zip(w[i - 4], t)])
    rk = np.array(w, dtype=np.uint8).reshape(11, 16)
    return rk


def invert_key_schedule(round_key, round_index=10):
    """Recover the master key from any single round key.

    Walks the expansion backwards from ``round_index``; inverting the
    round-10 key is the last step of the last-round attacks.
    """
    rk = np.asarray(bytearray(bytes(bytearray(round_key)))) if not isinstance(round_key, np.ndarray) else round_key
    rk = np.asarray(rk, dtype=np.uint8).reshape(16)
    if not 0 <= round_index <= 10:
        raise ValueError("round_index must be in [0, 10]")
    w = [None] * 44
    base = 4 * round_index
    for i in range(4):
        w[base + i] = list(int(b) for b in rk[4 * i : 4 * i + 4])
    for i in range(base + 3, 3, -1):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [SBOX[b] for b in t]
            t[0] ^= RCON[i // 4]
        w[i - 4] = [a ^ b for a, b in zip(w[i], t)]
    master = bytes(b for word in w[:4] for b in word)
    return np.frombuffer(master, dtype=np.uint8).copy()


def _prefetch_events(layout, rnd, sink):
    idx = 0
    for t in range(layout.n_tables):
        for line in range(layout.lines_per_table):
            entry = line * layout.entries_per_line
            sink.append(TraceEvent(rnd, idx, t, entry, layout.set_of_line(t, line), True))
            idx += 1


def _mix_columns(b):
    out = [0] * 16
    for c in range(0, 16, 4):
        a0, a1, a2, a3 = b[c], b[c + 1], b[c + 2], b[c + 3]
        out[c] = _XT[a0] ^ _MUL3[a1] ^ a2 ^ a3
        out[c + 1] = a0 ^ _XT[a1] ^ _MUL3[a2] ^ a3
        out[c + 2] = a0 ^ a1 ^ _XT[a2] ^ _MUL3[a3]
        out[c + 3] = _MUL3[a0] ^ a1 ^ a2 ^ _XT[a3]
    return out


def encrypt_traced(key, plaintext, style, prefetch=False, layout=None):
    """Encrypt one block and record every table load.

    Parameters
    ----------
    key, plaintext : 16-byte values
    style : Style or str
    prefetch : bool
        Touch every line of every table before each round (flagged
        events) as some hardened implementations do.
    layout : TableLayout, optional

    Returns
    -------
    (bytes, AccessTrace)
    """
    style = Style(style)
    layout = layout or TableLayout(style)
    if layout.style != style:
        raise ValueError("layout was built for a different style")
    rk = expand_key(key)
    pt = bytes(bytearray(plaintext))
    if len(pt) != 16:
        raise ValueError("plaintext must be 16 bytes")
    keys = [list(map(int, rk[r])) for r in range(11)]
    state = [p ^ k for p, k in zip(pt, keys[0])]
    events = []
    set_of = layout.set_of_entry

    if style is Style.SBOX:
        sbox = SBOX
        for rnd in range(10):
            if prefetch:
                _prefetch_events(layout, rnd, events)
            shifted = [state[j] for j in SHIFT_ORDER]
            sub = [0] * 16
            for l in range(16):
                x = shifted[l]
                events.append(TraceEvent(rnd, l, 0, x, set_of(0, x), False))
                sub[l] = sbox[x]
            if rnd < 9:
                state = [a ^ k for a, k in zip(_mix_columns(sub), keys[rnd + 1])]
            else:
                state = [a ^ k for a, k in zip(sub, keys[10])]
    else:
        table_of_load = [0] * 16 if style is Style.LARGE_TTABLE else [l % 4 for l in range(16)]
        if style is Style.LARGE_TTABLE:
            words = [
                [int.from_bytes(LARGE_ENTRY_BYTES[x][(4 - m) % 4 : (4 - m) % 4 + 4], "big") for x in range(256)]
                for m in range(4)
            ]
        else:
            words = T_WORDS
        for rnd in range(9):
            if prefetch:
                _prefetch_events(layout, rnd, events)
            nxt = [0] * 16
            for c in range(4):
                w = 0
                for m in range(4):
                    l = 4 * c + m
                    x = state[SHIFT_ORDER[l]]
                    events.append(TraceEvent(rnd, l, table_of_load[l], x, set_of(table_of_load[l], x), False))
                    w ^= words[m][x]
                k = keys[rnd + 1]
                nxt[4 * c] = ((w >> 24) & 0xFF) ^ k[4 * c]
                nxt[4 * c + 1] = ((w >> 16) & 0xFF) ^ k[4 * c + 1]
                nxt[4 * c + 2] = ((w >> 8) & 0xFF) ^ k[4 * c + 2]
                nxt[4 * c + 3] = (w & 0xFF) ^ k[4 * c + 3]
            state = nxt
        # Last round: same tables, masked down to the plain S-box byte.
        if prefetch:
            _prefetch_events(layout, 9, events)
        out = [0] * 16
        k = keys[10]
        for c in range(4):
            for r in range(4):
                l = 4 * c + r
                x = state[SHIFT_ORDER[l]]
                events.append(TraceEvent(9, l, table_of_load[l], x, set_of(table_of_load[l], x), False))
                shift = 24 - 8 * _IDENTITY_ROW[r]
                out[l] = ((words[r][x] >> shift) & 0xFF) ^ k[l]
        state = out

    ct = bytes(state)
    return ct, AccessTrace(style, events, prefetch=prefetch, layout=layout)


# ---------------------------------------------------------------------------
# batched, trace-free engines (bulk agreement checks and brute-force oracles)

_SBOX_NP = np.array(SBOX, dtype=np.uint8)
_XT_NP = np.array(_XT, dtype=np.uint8)
_MUL3_NP = np.array(_MUL3, dtype=np.uint8)
_SHIFT_NP = np.array(SHIFT_ORDER)


def expand_key_batch(keys):
    """Vectorized key expansion: ``(n, 16)`` keys -> ``(n, 11, 16)``."""
    keys = np.asarray(keys, dtype=np.uint8)
    n = keys.shape[0]
    w = np.zeros((n, 44, 4), dtype=np.uint8)
    w[:, :4] = keys.reshape(n, 4, 4)
    for i in range(4, 44):
        t = w[:, i - 1]
        if i % 4 == 0:
            t = _SBOX_NP[np.roll(t, -1, axis=1)].copy()
            t[:, 0] ^= RCON[i // 4]
        w[:, i] = w[:, i - 4] ^ t
    return w.reshape(n, 11, 16)


def _mix_columns_batch(s):
    a = s.reshape(-1, 4, 4)
    b = _XT_NP[a]
    c = _MUL3_NP[a]
    out = np.empty_like(a)
    out[:, :, 0] = b[:, :, 0] ^ c[:, :, 1] ^ a[:, :, 2] ^ a[:, :, 3]
    out[:, :, 1] = a[:, :, 0] ^ b[:, :, 1] ^ c[:, :, 2] ^ a[:, :, 3]
    out[:, :, 2] = a[:, :, 0] ^ a[:, :, 1] ^ b[:, :, 2] ^ c[:, :, 3]
    out[:, :, 3] = c[:, :, 0] ^ a[:, :, 1] ^ a[:, :, 2] ^ b[:, :, 3]
    return out.reshape(-1, 16)


def encrypt_batch(keys, plaintexts, round_keys=None):
    """Encrypt ``(n, 16)`` blocks under ``(n, 16)`` keys, no tracing.

    All three styles compute the same cipher; this is the shared batched
    pipeline used for bulk equality checks and residual key searches.
    ``round_keys`` may carry a precomputed ``(n, 11, 16)`` schedule.
    """
    pts = np.asarray(plaintexts, dtype=np.uint8)
    if round_keys is None:
        round_keys = expand_key_batch(np.asarray(keys, dtype=np.uint8))
    s = pts ^ round_keys[:, 0]
    for rnd in range(1, 10):
        s = _SBOX_NP[s][:, _SHIFT_NP]
        s = _mix_columns_batch(s) ^ round_keys[:, rnd]
    s = _SBOX_NP[s][:, _SHIFT_NP] ^ round_keys[:, 10]
    return s


def unaccessed_line_probability(style):
    """Chance that a given table line is never touched by one encryption.

    With ``L`` lines per table and ``A`` uniform loads into that table,
    the probability is ``(1 - 1/L) ** A``: about 1e-20 for the S-box
    style (its four lines are hammered 160 times), roughly 0.076 for the
    four-table layout (40 loads over 16 lines), and 0.006 for the
    large-entry table (160 loads over 32 lines).
    """
    style = Style(style)
    layout = TableLayout(style)
    loads_per_table = 160 // layout.n_tables
    return math.pow(1.0 - 1.0 / layout.lines_per_table, loads_per_table)
