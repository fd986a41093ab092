"""Counter-based, splittable random streams.

A stream is identified by a 64-bit key; its ``i``-th output is
``mix64(key + (i + 1) * GOLDEN)`` (the SplitMix64 output function applied to a
counter). Child streams are obtained by hashing the parent key with the child
index, so a tree node's randomness is a pure function of the root seed and
its path from the root. Nothing depends on which worker evaluates the node.

Compiled code threads ``(key, counter)`` through as scalars (array
arguments are costly across numba call boundaries); :class:`RandomStream`
wraps the same pair in a ``uint64[2]`` array for Python use. Normals come
from a 128-layer ziggurat.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SPLIT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO_M53 = 2.0**-53
_TWO_M52 = 2.0**-52


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def derive_key(key, index):
    """Key of child ``index`` of the stream ``key``."""
    return mix64(key ^ mix64((np.uint64(index) + _ONE) * _SPLIT))


@njit(cache=True, nogil=True)
def uniform_at(key, counter):
    """Uniform draw in the open interval (0, 1) and the advanced counter."""
    counter += _ONE
    bits = mix64(key + counter * GOLDEN)
    return (float(np.int64(bits >> _S11)) + 0.5) * _TWO_M53, counter


def _ziggurat_tables(blocks: int = 128, tail: float = 3.442619855899, area: float = 9.91256303526217e-3):
    # Layer edges for the 128-block normal ziggurat (Marsaglia-Tsang layout, Doornik's constants).
    x = np.empty(blocks + 1)
    f = math.exp(-0.5 * tail * tail)
    x[0] = area / f
    x[1] = tail
    for i in range(2, blocks):
        x[i] = math.sqrt(-2.0 * math.log(area / x[i - 1] + math.exp(-0.5 * x[i - 1] ** 2)))
    x[blocks] = 0.0
    ratio = x[1:] / x[:-1]
    return x, ratio


_ZIG_X, _ZIG_RATIO = _ziggurat_tables()
_ZIG_TAIL = 3.442619855899
_MASK7 = np.uint64(127)


@njit(cache=True, nogil=True)
def _normal_slow(key, counter, u, i):
    # Wedge or tail of the ziggurat; reached on roughly 3% of draws.
    while True:
        if i == 0:
            while True:
                a, counter = uniform_at(key, counter)
                b, counter = uniform_at(key, counter)
                xt = math.log(a) / _ZIG_TAIL
                yt = math.log(b)
                if -2.0 * yt >= xt * xt:
                    break
            return (xt - _ZIG_TAIL if u < 0.0 else _ZIG_TAIL - xt), counter
        xx = u * _ZIG_X[i]
        f0 = math.exp(-0.5 * (_ZIG_X[i] * _ZIG_X[i] - xx * xx))
        f1 = math.exp(-0.5 * (_ZIG_X[i + 1] * _ZIG_X[i + 1] - xx * xx))
        w, counter = uniform_at(key, counter)
        if f1 + w * (f0 - f1) < 1.0:
            return xx, counter
        counter += _ONE
        bits = mix64(key + counter * GOLDEN)
        u = (float(np.int64(bits >> _S11)) + 0.5) * _TWO_M52 - 1.0
        i = int(bits & _MASK7)
        if abs(u) < _ZIG_RATIO[i]:
            return u * _ZIG_X[i], counter


@njit(cache=True, nogil=True)
def normal_at(key, counter):
    """Standard normal (ziggurat) and the advanced counter; one hash on the fast path."""
    counter += _ONE
    bits = mix64(key + counter * GOLDEN)
    u = (float(np.int64(bits >> _S11)) + 0.5) * _TWO_M52 - 1.0
    i = int(bits & _MASK7)
    if abs(u) < _ZIG_RATIO[i]:
        return u * _ZIG_X[i], counter
    return _normal_slow(key, counter, u, i)


@njit(cache=True, nogil=True)
def next_u01(st):
    """Array-state form of :func:`uniform_at`; ``st = [key, counter]``."""
    u, st[1] = uniform_at(st[0], st[1])
    return u


@njit(cache=True, nogil=True)
def fill_normals(st, out):
    key = st[0]
    c = st[1]
    for i in range(out.shape[0]):
        out[i], c = normal_at(key, c)
    st[1] = c


@njit(cache=True, nogil=True)
def _fill_uniform(st, out):
    key = st[0]
    c = st[1]
    for i in range(out.shape[0]):
        out[i], c = uniform_at(key, c)
    st[1] = c


def seed_key(seed: int) -> np.uint64:
    """Root key for a user-facing integer seed (taken modulo 2**64)."""
    return np.uint64(mix64(np.uint64(int(seed) % 2**64)))


class RandomStream:
    """Python handle on a counter-based stream.

    Two streams built from the same ``(seed, *path)`` produce identical draws;
    :meth:`spawn` gives the child stream used for the subtree under ``index``.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0, *path: int, state: np.ndarray | None = None):
        if state is not None:
            self.state = np.array(state, dtype=np.uint64)
            return
        key = seed_key(seed)
        for idx in path:
            key = np.uint64(derive_key(key, np.uint64(idx)))
        self.state = np.array([key, 0], dtype=np.uint64)

    @property
    def key(self) -> np.uint64:
        return self.state[0]

    @property
    def counter(self) -> int:
        return int(self.state[1])

    def spawn(self, index: int) -> RandomStream:
        key = np.uint64(derive_key(self.state[0], np.uint64(index)))
        return RandomStream(state=np.array([key, 0], dtype=np.uint64))

    def copy(self) -> RandomStream:
        return RandomStream(state=self.state.copy())

    def uniform(self, size: int | None = None):
        if size is None:
            return next_u01(self.state)
        out = np.empty(int(size))
        _fill_uniform(self.state, out)
        return out

    def normal(self, size: int | None = None):
        if size is None:
            out = np.empty(1)
            fill_normals(self.state, out)
            return float(out[0])
        out = np.empty(int(size))
        fill_normals(self.state, out)
        return out

    def __repr__(self) -> str:
        return f"RandomStream(key={int(self.state[0]):#018x}, counter={int(self.state[1])})"
