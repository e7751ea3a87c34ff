"""Counter-based random numbers keyed by (seed, uid, counter).

Each agent owns a stream; the counter lives in its record, so draws do not
depend on which worker runs the agent.
"""

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)


@njit(nogil=True, cache=True)
def mix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(nogil=True, cache=True)
def hash3(seed, a, b):
    h = mix64(np.uint64(seed))
    h = mix64(h ^ np.uint64(a))
    return mix64(h ^ np.uint64(b))


@njit(nogil=True, cache=True)
def uniform(seed, uid, counter):
    """Uniform double in [0, 1)."""
    return np.float64(hash3(seed, uid, counter) >> _S11) * (1.0 / 9007199254740992.0)


@njit(nogil=True, cache=True)
def unit_vector(seed, uid, counter):
    """Uniformly distributed direction; consumes counters ``counter`` and ``counter + 1``."""
    z = 2.0 * uniform(seed, uid, counter) - 1.0
    phi = 2.0 * math.pi * uniform(seed, uid, counter + 1)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    return r * math.cos(phi), r * math.sin(phi), z
