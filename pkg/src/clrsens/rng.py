"""Keyed (counter-based) random streams.

Every draw is a pure function of ``(experiment_seed, replica_index,
step_index, substream)``.  The block cipher is Philox4x64-10 keyed with
``(seed, replica)``; the counter is ``(block, substream, 0, 0)``.  Each block
yields four 64-bit words, i.e. four standard normals (256-layer ziggurat, one
word each on the fast path) or 256 sign bits.

Layout, fixed per release so regression baselines stay stable:

* Gaussian component ``k`` of step ``n`` in dimension ``d`` is normal number
  ``g = n*d + k`` of the ``GAUSS_W`` substream: block ``g // 4``, lane ``g % 4``.
* The ``d(d-1)/2`` signs of ``V_n`` (row-major strict lower triangle) are bits
  ``n*nb + j`` of the ``AUX_V`` substream (bit 1 means ``+h``).
* Initial positions use the ``INIT`` substream, one uniform per coordinate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_TWO_M53 = 2.0**-53


class Substream(enum.IntEnum):
    GAUSS_W = 0
    AUX_V = 1
    INIT = 2


@dataclass(frozen=True)
class StreamKey:
    experiment_seed: int
    replica_index: int
    step_index: int
    substream: Substream = Substream.GAUSS_W


@nb.njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _MASK32) + (p2 & _MASK32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    return hi, a * b


@nb.njit(nogil=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64-10 block function; all arguments are ``uint64``."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _PHILOX_W0
            k1 = k1 + _PHILOX_W1
        hi0, lo0 = _mulhilo(_PHILOX_M0, c0)
        hi1, lo1 = _mulhilo(_PHILOX_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(inline="always")
def _open_unit(w):
    # (0, 1): safe for log()
    return (np.float64(w >> _S11) + 0.5) * _TWO_M53


@nb.njit(inline="always")
def _unit(w):
    # [0, 1)
    return np.float64(w >> _S11) * _TWO_M53


def _ziggurat_tables(layers: int = 256, r: float = 3.6541528853610088, v: float = 4.92867323399e-3):
    """Marsaglia-Tsang tables with 52-bit magnitudes: layer widths ``w``,
    fast-accept thresholds ``k`` and density values ``f``."""
    m1 = 2.0**52
    k = np.zeros(layers, dtype=np.uint64)
    w = np.zeros(layers)
    f = np.zeros(layers)
    dn = tn = r
    q = v / math.exp(-0.5 * dn * dn)
    k[0] = np.uint64(math.floor(dn / q * m1))
    k[1] = np.uint64(0)
    w[0] = q / m1
    w[layers - 1] = dn / m1
    f[0] = 1.0
    f[layers - 1] = math.exp(-0.5 * dn * dn)
    for i in range(layers - 2, 0, -1):
        dn = math.sqrt(-2.0 * math.log(v / dn + math.exp(-0.5 * dn * dn)))
        k[i + 1] = np.uint64(math.floor(dn / tn * m1))
        tn = dn
        f[i] = math.exp(-0.5 * dn * dn)
        w[i] = dn / m1
    return k, w, f


ZIG_R = 3.6541528853610088
ZIG_K, ZIG_W, ZIG_F = _ziggurat_tables()
_MASK52 = np.uint64((1 << 52) - 1)
_EXTRA = 3  # substream for ziggurat rejections


@nb.njit(inline="always")
def _zig_fast(w):
    idx = np.int64(w & np.uint64(0xFF))
    w = w >> np.uint64(8)
    neg = (w & np.uint64(1)) != 0
    rabs = (w >> np.uint64(1)) & _MASK52
    return idx, neg, rabs


@nb.njit(nogil=True)
def _zig_slow(k0, k1, g, idx, neg, rabs):
    # Rejection branch; further randomness comes from the keyed blocks
    # (g, EXTRA, attempt) so the draw stays a pure function of its key.
    attempt = 0
    while True:
        e0, e1, e2, e3 = philox4x64(np.uint64(g), np.uint64(_EXTRA), np.uint64(attempt),
                                    np.uint64(0), k0, k1)
        attempt += 1
        if idx == 0:
            xx = -math.log(_open_unit(e0)) / ZIG_R
            yy = -math.log(_open_unit(e1))
            if yy + yy > xx * xx:
                return -(ZIG_R + xx) if neg else ZIG_R + xx
            xx = -math.log(_open_unit(e2)) / ZIG_R
            yy = -math.log(_open_unit(e3))
            if yy + yy > xx * xx:
                return -(ZIG_R + xx) if neg else ZIG_R + xx
            continue
        x = np.float64(rabs) * ZIG_W[idx]
        if ZIG_F[idx] + _unit(e0) * (ZIG_F[idx - 1] - ZIG_F[idx]) < math.exp(-0.5 * x * x):
            return -x if neg else x
        idx, neg, rabs = _zig_fast(e1)
        if rabs < ZIG_K[idx]:
            x = np.float64(rabs) * ZIG_W[idx]
            return -x if neg else x


@nb.njit(inline="always")
def _zig(k0, k1, g, w):
    idx, neg, rabs = _zig_fast(w)
    if rabs < ZIG_K[idx]:
        x = np.float64(rabs) * ZIG_W[idx]
        return -x if neg else x
    return _zig_slow(k0, k1, g, idx, neg, rabs)


@nb.njit(nogil=True)
def normal_block(k0, k1, block, substream, out):
    """Fill ``out[:4]`` with the standard normals ``4*block .. 4*block+3``."""
    w0, w1, w2, w3 = philox4x64(
        np.uint64(block), np.uint64(substream), np.uint64(0), np.uint64(0), k0, k1
    )
    g = 4 * block
    out[0] = _zig(k0, k1, g, w0)
    out[1] = _zig(k0, k1, g + 1, w1)
    out[2] = _zig(k0, k1, g + 2, w2)
    out[3] = _zig(k0, k1, g + 3, w3)


@nb.njit(nogil=True)
def sign_bit(k0, k1, index, substream):
    w0, w1, w2, w3 = philox4x64(
        np.uint64(index >> 8), np.uint64(substream), np.uint64(0), np.uint64(0), k0, k1
    )
    lane = (index >> 6) & 3
    if lane == 0:
        w = w0
    elif lane == 1:
        w = w1
    elif lane == 2:
        w = w2
    else:
        w = w3
    return (w >> np.uint64(index & 63)) & np.uint64(1)


@nb.njit(nogil=True)
def uniform_at(k0, k1, index, substream):
    w0, w1, w2, w3 = philox4x64(
        np.uint64(index >> 2), np.uint64(substream), np.uint64(0), np.uint64(0), k0, k1
    )
    lane = index & 3
    if lane == 0:
        return _unit(w0)
    if lane == 1:
        return _unit(w1)
    if lane == 2:
        return _unit(w2)
    return _unit(w3)


@nb.njit(nogil=True)
def fill_gaussian(k0, k1, step, dim, sqrt_h, out, buf):
    """Write the ``dim`` scaled normals of ``step`` into ``out``."""
    g = step * dim
    block = -1
    for k in range(dim):
        b = (g + k) >> 2
        if b != block:
            normal_block(k0, k1, b, 0, buf)
            block = b
        out[k] = sqrt_h * buf[(g + k) & 3]


@nb.njit(nogil=True)
def fill_v(k0, k1, step, dim, h, out):
    nbits = dim * (dim - 1) // 2
    j = step * nbits
    for a in range(dim):
        out[a, a] = -h
        for c in range(a):
            v = h if sign_bit(k0, k1, j, 1) else -h
            out[a, c] = v
            out[c, a] = -v
            j += 1


def _key_words(seed: int, replica: int):
    return np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(replica & 0xFFFFFFFFFFFFFFFF)


def gaussian_increment(key: StreamKey, h: float, dim: int = 1) -> np.ndarray:
    """Brownian increment ``dW ~ N(0, h I_d)`` addressed by ``key``."""
    if not h > 0:
        raise ValueError("time step must be positive")
    k0, k1 = _key_words(key.experiment_seed, key.replica_index)
    out = np.empty(dim)
    fill_gaussian(k0, k1, key.step_index, dim, math.sqrt(h), out, np.empty(4))
    return out


def sample_V(key: StreamKey, h: float, dim: int = 1) -> np.ndarray:
    """Auxiliary matrix of the second-order scheme: ``-h`` on the diagonal,
    antisymmetric fair ``±h`` signs off it."""
    if not h > 0:
        raise ValueError("time step must be positive")
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    k0, k1 = _key_words(key.experiment_seed, key.replica_index)
    out = np.empty((dim, dim))
    fill_v(k0, k1, key.step_index, dim, h, out)
    return out


def initial_uniform(seed: int, replica: int, dim: int) -> np.ndarray:
    k0, k1 = _key_words(seed, replica)
    return np.array([uniform_at(k0, k1, k, int(Substream.INIT)) for k in range(dim)])


@nb.njit(nogil=True, cache=True)
def gaussian_matrix(seed_word, replica_start, count, step, dim, h):
    """Increments for ``count`` consecutive replicas at one step (test helper)."""
    out = np.empty((count, dim))
    buf = np.empty(4)
    sq = math.sqrt(h)
    for i in range(count):
        fill_gaussian(seed_word, np.uint64(replica_start + i), step, dim, sq, out[i], buf)
    return out


@nb.njit(nogil=True, cache=True)
def gaussian_steps(seed_word, replica_word, step_start, count, dim, h):
    """Increments of one replica over ``count`` consecutive steps (test helper)."""
    out = np.empty((count, dim))
    buf = np.empty(4)
    sq = math.sqrt(h)
    for n in range(count):
        fill_gaussian(seed_word, replica_word, step_start + n, dim, sq, out[n], buf)
    return out


@nb.njit(nogil=True, cache=True)
def v_steps(seed_word, replica_word, step_start, count, dim, h):
    out = np.empty((count, dim, dim))
    for n in range(count):
        fill_v(seed_word, replica_word, step_start + n, dim, h, out[n])
    return out
