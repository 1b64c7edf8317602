"""Unscrambled Sobol low-discrepancy points (Gray-code ordering).

Direction numbers are the Joe-Kuo ``new-joe-kuo-6.21201`` values for the
first eight dimensions.
"""

import numpy as np

MAX_DIM = 8
_BITS = 32

# (degree s, coefficient a, initial m_1..m_s) for dimensions 2..8
_JOE_KUO = [
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
    (4, 4, (1, 3, 5, 13)),
    (5, 2, (1, 1, 5, 5, 17)),
]


class UnsupportedDimensionError(ValueError):
    pass


def _direction_numbers(dim):
    v = np.zeros((dim, _BITS), dtype=np.uint64)
    v[0] = [1 << (_BITS - 1 - k) for k in range(_BITS)]
    for j in range(1, dim):
        s, a, m_init = _JOE_KUO[j - 1]
        m = list(m_init)
        for k in range(s, _BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for r in range(1, s):
                if (a >> (s - 1 - r)) & 1:
                    new ^= m[k - r] << r
            m.append(new)
        v[j] = [m[k] << (_BITS - 1 - k) for k in range(_BITS)]
    return v


def sobol_points(dim, n, skip=1):
    """Return points ``skip .. skip+n-1`` of the ``dim``-dimensional Sobol sequence.

    Index 0 is the all-zeros point, so the default ``skip=1`` drops it.
    """
    if not 1 <= dim <= MAX_DIM:
        raise UnsupportedDimensionError(
            f"Sobol dimension must be in [1, {MAX_DIM}], got {dim}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if skip < 0:
        raise ValueError(f"skip must be >= 0, got {skip}")
    if skip + n >= 2 ** _BITS:
        raise ValueError("requested points exceed the 32-bit sequence length")

    v = _direction_numbers(dim)
    # Gray code of index i is i ^ (i >> 1); bit b of it selects v[:, b].
    idx = np.arange(skip, skip + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    x = np.zeros((n, dim), dtype=np.uint64)
    for b in range(int(gray.max()).bit_length()):
        on = ((gray >> np.uint64(b)) & np.uint64(1)).astype(bool)
        x[on] ^= v[:, b]
    return x.astype(np.float64) / float(2 ** _BITS)
