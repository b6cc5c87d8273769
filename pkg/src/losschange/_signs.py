import numpy as np


class SignChangeCounter:
    """Counts per-coordinate sign flips along a stream of vectors.

    Exact zeros are skipped: a flip is counted when a nonzero sign differs from
    the most recent nonzero sign of that coordinate.
    """

    def __init__(self, n):
        self.count = np.zeros(n, dtype=np.int64)
        self.first = np.zeros(n, dtype=np.int8)
        self.last = np.zeros(n, dtype=np.int8)
        self.n_updates = 0

    def update(self, vec):
        s = np.sign(vec).astype(np.int8)
        nz = s != 0
        self.count += nz & (self.last != 0) & (s != self.last)
        self.first = np.where(self.first == 0, s, self.first)
        self.last = np.where(nz, s, self.last)
        self.n_updates += 1
        return self

    def merge(self, later):
        """Combine with a counter that saw the stream segment right after this one."""
        out = SignChangeCounter(self.count.size)
        out.count = (self.count + later.count
                     + ((self.last != 0) & (later.first != 0) & (self.last != later.first)))
        out.first = np.where(self.first == 0, later.first, self.first)
        out.last = np.where(later.last == 0, self.last, later.last)
        out.n_updates = self.n_updates + later.n_updates
        return out
