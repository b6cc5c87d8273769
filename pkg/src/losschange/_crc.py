"""CRC-64/XZ (ECMA-182 polynomial, reflected) used to seal binary artifacts."""
import numpy as np
from numba import njit

_POLY = np.uint64(0xC96C5795D7870F42)
_MASK = 0xFFFFFFFFFFFFFFFF


def _make_table():
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = np.uint64(i)
        for _ in range(8):
            if crc & np.uint64(1):
                crc = (crc >> np.uint64(1)) ^ _POLY
            else:
                crc = crc >> np.uint64(1)
        table[i] = crc
    return table


_TABLE = _make_table()


@njit(cache=True)
def _update(state, buf, table):
    crc = state
    for b in buf:
        crc = table[(crc ^ np.uint64(b)) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc


class CRC64:
    """Incremental CRC-64/XZ. ``CRC64().update(b"123456789").digest() == 0x995DC9BBDF1939FA``."""

    def __init__(self):
        self._state = np.uint64(_MASK)

    def update(self, data):
        buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        if buf.size:
            # numba may hand back a signed integer; keep the state unsigned
            self._state = np.uint64(int(_update(self._state, buf, _TABLE)) & _MASK)
        return self

    def digest(self):
        return (int(self._state) & _MASK) ^ _MASK


def crc64_file(path, end=None, chunk=1 << 24):
    """CRC of the first ``end`` bytes of a file (the whole file if None)."""
    crc = CRC64()
    with open(path, "rb") as f:
        remaining = end
        while remaining is None or remaining > 0:
            n = chunk if remaining is None else min(chunk, remaining)
            block = f.read(n)
            if not block:
                break
            crc.update(block)
            if remaining is not None:
                remaining -= len(block)
    return crc.digest()
