"""Naive, independent AES-128 reference used as the test oracle.

Everything here is derived from first principles (GF(2^8) arithmetic,
the affine S-box construction, textbook SubBytes/ShiftRows/MixColumns on
a 4x4 byte matrix) so that agreement with the package's table-based
engines is meaningful.
"""


def gf_mul(a, b):
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11B
        b >>= 1
    return r


def gf_inv(a):
    if a == 0:
        return 0
    # brute-force inverse in GF(2^8)
    for x in range(1, 256):
        if gf_mul(a, x) == 1:
            return x
    raise AssertionError


def _affine(x):
    y = 0
    for bit in range(8):
        b = (
            (x >> bit)
            ^ (x >> ((bit + 4) % 8))
            ^ (x >> ((bit + 5) % 8))
            ^ (x >> ((bit + 6) % 8))
            ^ (x >> ((bit + 7) % 8))
            ^ (0x63 >> bit)
        ) & 1
        y |= b << bit
    return y


REF_SBOX = [_affine(gf_inv(x)) for x in range(256)]
REF_INV_SBOX = [REF_SBOX.index(x) for x in range(256)]

_RCON = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36]


def ref_expand(key):
    words = [list(key[4 * i : 4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        t = list(words[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [REF_SBOX[b] for b in t]
            t[0] ^= _RCON[i // 4 - 1]
        words.append([a ^ b for a, b in zip(words[i - 4], t)])
    return [bytes(b for w in words[4 * r : 4 * r + 4] for b in w) for r in range(11)]


def _to_matrix(state):
    # matrix[row][col] with the usual column-major byte numbering
    return [[state[4 * c + r] for c in range(4)] for r in range(4)]


def _from_matrix(m):
    return [m[r][c] for c in range(4) for r in range(4)]


def _sub_bytes(state):
    return [REF_SBOX[b] for b in state]


def _shift_rows(state):
    m = _to_matrix(state)
    for r in range(4):
        m[r] = m[r][r:] + m[r][:r]
    return _from_matrix(m)


def _mix_columns(state):
    out = [0] * 16
    coef = [[2, 3, 1, 1], [1, 2, 3, 1], [1, 1, 2, 3], [3, 1, 1, 2]]
    for c in range(4):
        col = state[4 * c : 4 * c + 4]
        for r in range(4):
            acc = 0
            for i in range(4):
                acc ^= gf_mul(coef[r][i], col[i])
            out[4 * c + r] = acc
    return out


def _add_key(state, rk):
    return [a ^ b for a, b in zip(state, rk)]


def ref_encrypt(key, pt):
    rks = ref_expand(list(key))
    state = _add_key(list(pt), rks[0])
    for rnd in range(1, 10):
        state = _sub_bytes(state)
        state = _shift_rows(state)
        state = _mix_columns(state)
        state = _add_key(state, rks[rnd])
    state = _sub_bytes(state)
    state = _shift_rows(state)
    state = _add_key(state, rks[10])
    return bytes(state)


def ref_lookup_states(key, pt):
    """State at the start of each of the ten lookup rounds.

    Element ``r`` is the 16-byte state whose bytes are fed through the
    lookup tables in round ``r`` (element 0 is ``pt XOR k0``).
    """
    rks = ref_expand(list(key))
    state = _add_key(list(pt), rks[0])
    states = [list(state)]
    for rnd in range(1, 10):
        state = _sub_bytes(state)
        state = _shift_rows(state)
        state = _mix_columns(state)
        state = _add_key(state, rks[rnd])
        states.append(list(state))
    return states
