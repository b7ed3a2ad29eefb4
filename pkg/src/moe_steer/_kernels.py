"""Hot counting loops.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same contract. Set ``MOE_STEER_NUMBA=0`` to force the numpy path (also used
automatically when numba is not importable).
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MOE_STEER_NUMBA", "1").lower() not in ("0", "false", "no")


def count_routing_numpy(marker_ids, slots, n_markers, n_keys):
    """Activation counts for one shard.

    Returns ``(K, k, M)``: per-key activations (n_keys,), per-marker per-key
    co-activations (n_markers, n_keys) and marker occurrences (n_markers,).
    ``slots`` entries < 0 are padding.
    """
    flat = slots.reshape(-1)
    K = np.bincount(flat[flat >= 0], minlength=n_keys).astype(np.int64)
    is_marker = marker_ids >= 0
    M = np.bincount(marker_ids[is_marker], minlength=n_markers).astype(np.int64)
    sub = slots[is_marker]
    codes = marker_ids[is_marker].astype(np.int64)[:, None] * n_keys + sub
    codes = codes[sub >= 0]
    k = np.bincount(codes, minlength=n_markers * n_keys).astype(np.int64).reshape(n_markers, n_keys)
    return K, k, M


def _count_routing_loop(marker_ids, slots, n_markers, n_keys):
    K = np.zeros(n_keys, dtype=np.int64)
    k = np.zeros((n_markers, n_keys), dtype=np.int64)
    M = np.zeros(n_markers, dtype=np.int64)
    T, S = slots.shape
    for t in range(T):
        m = marker_ids[t]
        if m >= 0:
            M[m] += 1
        for j in range(S):
            e = slots[t, j]
            if e < 0:
                continue
            K[e] += 1
            if m >= 0:
                k[m, e] += 1
    return K, k, M


if HAVE_NUMBA:
    count_routing_numba = njit(nogil=True, cache=True)(_count_routing_loop)
else:  # pragma: no cover
    count_routing_numba = None


# canonical event record: {"i":"..."[,"d":"..."],"p":<int>,"t":"...","s":[[l,e,w],...]}
_PFX_I = np.frombuffer(b'{"i":"', dtype=np.uint8)
_PFX_D = np.frombuffer(b',"d":"', dtype=np.uint8)
_PFX_P = np.frombuffer(b',"p":', dtype=np.uint8)
_PFX_T = np.frombuffer(b',"t":"', dtype=np.uint8)
_PFX_S = np.frombuffer(b',"s":[', dtype=np.uint8)


def _match(buf, pos, pat):
    if pos + pat.shape[0] > buf.shape[0]:
        return False
    for j in range(pat.shape[0]):
        if buf[pos + j] != pat[j]:
            return False
    return True


def _string_end(buf, pos, stop):
    """Index of the closing quote of a JSON string whose body starts at pos, or -1."""
    while pos < stop:
        c = buf[pos]
        if c == 92:  # backslash
            pos += 2
            continue
        if c == 34:
            return pos
        if c < 32:
            return -1
        pos += 1
    return -1


def _read_index(buf, q, eol):
    """Parse a non-negative integer followed by ','; returns (value, next) or (-1, q)."""
    v = 0
    digits = 0
    while q < eol and 48 <= buf[q] <= 57:
        v = v * 10 + (buf[q] - 48)
        q += 1
        digits += 1
    if digits == 0 or digits > 9 or q >= eol or buf[q] != 44:
        return -1, q
    return v, q + 1


def _same_bytes(buf, a0, a1, b0, b1):
    if a1 - a0 != b1 - b0:
        return False
    for j in range(a1 - a0):
        if buf[a0 + j] != buf[b0 + j]:
            return False
    return True


def _scan_records_loop(buf, start, n_layers, n_experts, width, pi, pd, pp, pt, ps):
    """Scan canonical event lines from ``buf[start:]``.

    Returns ``(n, bad, spans, slots, new_inst, tok_hash)``; ``bad`` is the
    1-based record index of the first non-canonical line (0 when all parsed).
    ``spans[r]`` holds id start/end, domain start/end (-1 if absent) and
    token start/end offsets into ``buf``.
    """
    size = buf.shape[0]
    cap = 1
    for j in range(start, size):
        if buf[j] == 10:
            cap += 1
    spans = np.full((cap, 6), -1, dtype=np.int64)
    slots = np.full((cap, width), -1, dtype=np.int32)
    new_inst = np.zeros(cap, dtype=np.bool_)
    tok_hash = np.zeros(cap, dtype=np.uint64)
    n = 0
    rec = 0
    pos = start
    while pos < size:
        eol = pos
        while eol < size and buf[eol] != 10:
            eol += 1
        if eol == pos:
            pos = eol + 1
            continue
        rec += 1
        q = pos
        if not _match(buf, q, pi):
            return n, rec, spans, slots, new_inst, tok_hash
        q += pi.shape[0]
        i0 = q
        i1 = _string_end(buf, q, eol)
        if i1 < 0:
            return n, rec, spans, slots, new_inst, tok_hash
        q = i1 + 1
        if _match(buf, q, pd):
            q += pd.shape[0]
            d1 = _string_end(buf, q, eol)
            if d1 < 0:
                return n, rec, spans, slots, new_inst, tok_hash
            spans[n, 2] = q
            spans[n, 3] = d1
            q = d1 + 1
        if not _match(buf, q, pp):
            return n, rec, spans, slots, new_inst, tok_hash
        q += pp.shape[0]
        digits = 0
        while q < eol and 48 <= buf[q] <= 57:
            q += 1
            digits += 1
        if digits == 0 or not _match(buf, q, pt):
            return n, rec, spans, slots, new_inst, tok_hash
        q += pt.shape[0]
        t0 = q
        t1 = _string_end(buf, q, eol)
        if t1 < 0:
            return n, rec, spans, slots, new_inst, tok_hash
        q = t1 + 1
        if not _match(buf, q, ps):
            return n, rec, spans, slots, new_inst, tok_hash
        q += ps.shape[0]
        k = 0
        while q < eol and buf[q] == 91:  # '['
            q += 1
            layer, q = _read_index(buf, q, eol)
            if layer < 0:
                return n, rec, spans, slots, new_inst, tok_hash
            expert, q = _read_index(buf, q, eol)
            if expert < 0:
                return n, rec, spans, slots, new_inst, tok_hash
            while q < eol and buf[q] != 93:  # weight text up to ']'
                q += 1
            if q >= eol or k >= width or layer >= n_layers or expert >= n_experts:
                return n, rec, spans, slots, new_inst, tok_hash
            slots[n, k] = layer * n_experts + expert
            k += 1
            q += 1
            if q < eol and buf[q] == 44:
                q += 1
        if q + 2 != eol or buf[q] != 93 or buf[q + 1] != 125:
            return n, rec, spans, slots, new_inst, tok_hash
        spans[n, 0] = i0
        spans[n, 1] = i1
        spans[n, 4] = t0
        spans[n, 5] = t1
        new_inst[n] = n == 0 or not _same_bytes(buf, i0, i1, spans[n - 1, 0], spans[n - 1, 1])
        h = np.uint64(0xCBF29CE484222325)
        for j in range(t0, t1):
            h = (h ^ np.uint64(buf[j])) * np.uint64(0x100000001B3)
        tok_hash[n] = h
        n += 1
        pos = eol + 1
    return n, 0, spans, slots, new_inst, tok_hash


def _spans_equal_loop(buf, spans, rep, inverse):
    """True when every token span equals the span of its hash representative."""
    for r in range(inverse.shape[0]):
        s = rep[inverse[r]]
        if not _same_bytes(buf, spans[r, 4], spans[r, 5], spans[s, 4], spans[s, 5]):
            return False
    return True


if HAVE_NUMBA:
    _match = njit(inline="always")(_match)
    _string_end = njit(_string_end)
    _same_bytes = njit(_same_bytes)
    _read_index = njit(_read_index)
    scan_records_numba = njit(nogil=True, cache=True)(_scan_records_loop)
    spans_equal_numba = njit(nogil=True, cache=True)(_spans_equal_loop)
else:  # pragma: no cover
    scan_records_numba = spans_equal_numba = None


def scan_records(buf, start, n_layers, n_experts, width):
    return scan_records_numba(buf, start, n_layers, n_experts, width, _PFX_I, _PFX_D, _PFX_P, _PFX_T, _PFX_S)


def count_routing(marker_ids, slots, n_markers, n_keys):
    marker_ids = np.ascontiguousarray(marker_ids, dtype=np.int32)
    slots = np.ascontiguousarray(slots, dtype=np.int32)
    if USE_NUMBA:
        return count_routing_numba(marker_ids, slots, n_markers, n_keys)
    return count_routing_numpy(marker_ids, slots, n_markers, n_keys)

