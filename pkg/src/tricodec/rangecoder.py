"""Bit-exact integer arithmetic coder over explicit frequency tables.

Classic 32-bit low/high interval coder with underflow bookkeeping and
MSB-first bit IO. All state is integer, so encode/decode round-trips
are exact on any platform; the frequency table (summing to the coder's
total) is the only model input and must be identical on both sides.
"""

from __future__ import annotations

import numpy as np

from .errors import BitstreamError, ContractViolation

STATE_BITS = 32
FULL = 1 << STATE_BITS
HALF = FULL >> 1
QUARTER = FULL >> 2
MAX_TOTAL = 1 << (STATE_BITS - 2)


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.current = 0
        self.nbits = 0

    def write(self, bit):
        self.current = (self.current << 1) | bit
        self.nbits += 1
        if self.nbits == 8:
            self.buf.append(self.current)
            self.current = 0
            self.nbits = 0

    def flush(self):
        if self.nbits:
            self.buf.append(self.current << (8 - self.nbits))
            self.current = 0
            self.nbits = 0
        return bytes(self.buf)


class _BitReader:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.current = 0
        self.nbits = 0

    def read(self):
        if self.nbits == 0:
            if self.pos >= len(self.data):
                return 0    # zero-pad past the end
            self.current = self.data[self.pos]
            self.pos += 1
            self.nbits = 8
        self.nbits -= 1
        return (self.current >> self.nbits) & 1


def _check_table(cumfreq):
    if len(cumfreq) < 2:
        raise ContractViolation("frequency table needs at least one symbol")
    if cumfreq[0] != 0:
        raise ContractViolation("cumulative table must start at 0")
    total = int(cumfreq[-1])
    if total > MAX_TOTAL:
        raise ContractViolation(f"total frequency {total} exceeds {MAX_TOTAL}")
    return total


def cumulative(freqs):
    freqs = np.asarray(freqs, dtype=np.int64)
    if (freqs < 1).any():
        raise ContractViolation("every symbol needs frequency >= 1")
    return np.concatenate([[0], np.cumsum(freqs)])


def encode_symbols(symbols, cumfreq):
    """Arithmetic-code integer symbols (indices into the table)."""
    cumfreq = np.asarray(cumfreq, dtype=np.int64)
    total = _check_table(cumfreq)
    n_sym = len(cumfreq) - 1
    out = _BitWriter()
    low, high = 0, FULL - 1
    underflow = 0

    def emit(bit):
        nonlocal underflow
        out.write(bit)
        while underflow:
            out.write(1 - bit)
            underflow -= 1

    cf = cumfreq.tolist()
    for s in np.asarray(symbols, dtype=np.int64).reshape(-1).tolist():
        if not 0 <= s < n_sym:
            raise ContractViolation(f"symbol {s} outside table of {n_sym}")
        span = high - low + 1
        high = low + span * cf[s + 1] // total - 1
        low = low + span * cf[s] // total
        while True:
            if high < HALF:
                emit(0)
            elif low >= HALF:
                emit(1)
                low -= HALF
                high -= HALF
            elif low >= QUARTER and high < 3 * QUARTER:
                underflow += 1
                low -= QUARTER
                high -= QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) + 1
    underflow += 1
    emit(0 if low < QUARTER else 1)
    return out.flush()


def decode_symbols(data, n, cumfreq):
    """Recover exactly n symbols coded by encode_symbols."""
    cumfreq = np.asarray(cumfreq, dtype=np.int64)
    total = _check_table(cumfreq)
    n_sym = len(cumfreq) - 1
    reader = _BitReader(data)
    code = 0
    for _ in range(STATE_BITS):
        code = (code << 1) | reader.read()
    low, high = 0, FULL - 1
    cf = cumfreq.tolist()
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        span = high - low + 1
        value = ((code - low + 1) * total - 1) // span
        if value >= total:
            raise BitstreamError("corrupt stream: value outside model range")
        # binary search: greatest s with cf[s] <= value
        lo_i, hi_i = 0, n_sym
        while lo_i + 1 < hi_i:
            mid = (lo_i + hi_i) // 2
            if cf[mid] > value:
                hi_i = mid
            else:
                lo_i = mid
        s = lo_i
        out[i] = s
        high = low + span * cf[s + 1] // total - 1
        low = low + span * cf[s] // total
        while True:
            if high < HALF:
                pass
            elif low >= HALF:
                low -= HALF
                high -= HALF
                code -= HALF
            elif low >= QUARTER and high < 3 * QUARTER:
                low -= QUARTER
                high -= QUARTER
                code -= QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) + 1
            code = (code << 1) | reader.read()
    return out


def pack_bits(values, bits_per_symbol):
    """Pack non-negative ints MSB-first into bytes (big-endian bit order)."""
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    if bits_per_symbol < 1 or bits_per_symbol > 32:
        raise ContractViolation("bits_per_symbol must be in 1..32")
    if (values < 0).any() or (values >= (1 << bits_per_symbol)).any():
        raise ContractViolation("value does not fit in the given bit width")
    w = _BitWriter()
    for v in values.tolist():
        for b in range(bits_per_symbol - 1, -1, -1):
            w.write((v >> b) & 1)
    return w.flush()


def unpack_bits(data, n, bits_per_symbol):
    expected = (n * bits_per_symbol + 7) // 8
    if len(data) < expected:
        raise BitstreamError("truncated packed-bits payload")
    r = _BitReader(data)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = 0
        for _ in range(bits_per_symbol):
            v = (v << 1) | r.read()
        out[i] = v
    return out
