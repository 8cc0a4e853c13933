"""Two's-complement bit representation of quantized weight layers.

Two bit orders show up here:

* A single word (:func:`encode_twos_complement`, :func:`decode_weight`) is
  written most-significant first, ``[v_Q, ..., v_1]``, with ``v_Q`` the
  sign bit.
* Layer bit tensors and flattened bit vectors store the least significant
  bit first, so ``bits[row, col, p]`` is ``v_{p+1}`` and the sign bit sits
  at ``p = Q - 1``. Flattening is row-major over ``(row, col, bit)``. With
  this order the per-bit gradient of the decoded weight,
  :func:`weight_gradient_vector`, lines up with the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Q_MIN, Q_MAX = 2, 16


class BitRangeError(ValueError):
    """Integer does not fit in the requested two's-complement width."""


def _check_q(Q: int) -> None:
    if not (Q_MIN <= int(Q) <= Q_MAX):
        raise ValueError(f"bit width Q must be in [{Q_MIN}, {Q_MAX}], got {Q}")


def int_range(Q: int) -> tuple[int, int]:
    """Smallest and largest integer representable with ``Q`` bits."""
    return -(1 << (Q - 1)), (1 << (Q - 1)) - 1


def encode_twos_complement(value: int, Q: int) -> np.ndarray:
    """Encode ``value`` as a ``Q``-bit word, sign bit first.

    >>> encode_twos_complement(3, 4).tolist()
    [0, 0, 1, 1]
    """
    _check_q(Q)
    lo, hi = int_range(Q)
    value = int(value)
    if not lo <= value <= hi:
        raise BitRangeError(f"{value} not representable in {Q} bits ([{lo}, {hi}])")
    raw = value & ((1 << Q) - 1)
    return np.array([(raw >> (Q - 1 - i)) & 1 for i in range(Q)], dtype=np.uint8)


def decode_weight(word: Sequence[int], delta: float) -> float:
    """Real value of a sign-bit-first word at step size ``delta``."""
    word = np.asarray(word)
    Q = word.shape[0]
    _check_q(Q)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not np.all((word == 0) | (word == 1)):
        raise ValueError("word must be binary")
    # word[0] is v_Q, word[Q-1] is v_1
    acc = -(1 << (Q - 1)) * int(word[0])
    for i in range(1, Q):
        acc += (1 << (Q - 1 - i)) * int(word[i])
    return acc * float(delta)


def weight_gradient_vector(Q: int, delta: float) -> np.ndarray:
    """Gradient of the decoded weight w.r.t. its bits, LSB first.

    ``[2^0, 2^1, ..., 2^(Q-2), -2^(Q-1)] * delta``.
    """
    _check_q(Q)
    g = np.array([float(1 << i) for i in range(Q)])
    g[-1] = -g[-1]
    return g * float(delta)


def ints_to_bits(ints: np.ndarray, Q: int) -> np.ndarray:
    """Vectorised encoding; appends a trailing LSB-first bit axis."""
    ints = np.asarray(ints, dtype=np.int64)
    lo, hi = int_range(Q)
    if ints.size and (ints.min() < lo or ints.max() > hi):
        raise BitRangeError(f"integers outside [{lo}, {hi}] for Q={Q}")
    raw = ints & ((1 << Q) - 1)
    shifts = np.arange(Q, dtype=np.int64)
    return ((raw[..., None] >> shifts) & 1).astype(np.uint8)


def bits_to_ints(bits: np.ndarray) -> np.ndarray:
    """Inverse of :func:`ints_to_bits` for binary input."""
    bits = np.asarray(bits, dtype=np.int64)
    Q = bits.shape[-1]
    place = np.array([1 << i for i in range(Q)], dtype=np.int64)
    place[-1] = -place[-1]
    return bits @ place


def bits_to_weights(bits: np.ndarray, delta: float) -> np.ndarray:
    """Decode a (possibly relaxed) LSB-first bit tensor to real weights."""
    bits = np.asarray(bits, dtype=np.float64)
    return bits @ weight_gradient_vector(bits.shape[-1], delta)


@dataclass(frozen=True)
class QuantLayer:
    """A K x C weight matrix held as Q-bit integers with step size ``delta``."""

    ints: np.ndarray
    Q: int
    delta: float

    def __post_init__(self):
        _check_q(self.Q)
        if not (self.delta > 0 and np.isfinite(self.delta)):
            raise ValueError("delta must be positive and finite")
        ints = np.array(self.ints, dtype=np.int64)
        if ints.ndim != 2:
            raise ValueError("QuantLayer ints must be a 2-D array")
        lo, hi = int_range(self.Q)
        if ints.size and (ints.min() < lo or ints.max() > hi):
            raise BitRangeError(f"integers outside [{lo}, {hi}] for Q={self.Q}")
        ints.setflags(write=False)
        object.__setattr__(self, "ints", ints)
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ints.shape

    @property
    def bits(self) -> np.ndarray:
        """(K, C, Q) uint8 bit tensor, LSB first."""
        return ints_to_bits(self.ints, self.Q)

    def weights(self) -> np.ndarray:
        return self.ints.astype(np.float64) * self.delta

    @classmethod
    def from_bits(cls, bits: np.ndarray, delta: float) -> "QuantLayer":
        bits = np.asarray(bits)
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("bit tensor must be binary")
        return cls(bits_to_ints(bits), bits.shape[-1], delta)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_layer(weights: np.ndarray, Q: int) -> QuantLayer:
    """Symmetric layer-wise uniform quantization, no clipping of outliers.

    ``delta = max|w| / (2^(Q-1) - 1)`` (``1.0`` for an all-zero layer);
    weights are rounded half away from zero and clamped to the range.
    """
    _check_q(Q)
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    delta = amax / ((1 << (Q - 1)) - 1) if amax > 0 else 1.0
    lo, hi = int_range(Q)
    ints = np.clip(_round_half_away(w / delta), lo, hi).astype(np.int64)
    return QuantLayer(ints, Q, delta)


def hamming_distance(a: Sequence[int], b: Sequence[int]) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


@dataclass(frozen=True)
class BitLayout:
    """Maps flat decision-vector indices to ``(row, col, bit)`` coordinates.

    ``rows`` lists the class rows covered, in order: ``(s, t)`` for a
    single-sample attack, ``range(K)`` for the triggered attack.
    """

    rows: tuple[int, ...]
    n_cols: int
    Q: int

    @property
    def size(self) -> int:
        return len(self.rows) * self.n_cols * self.Q

    def flatten(self, layer_bits: np.ndarray) -> np.ndarray:
        """Select the covered rows of a (K, C, Q) tensor and flatten them."""
        return np.asarray(layer_bits)[list(self.rows)].reshape(-1)

    def unflatten(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec)
        if vec.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {vec.shape}")
        return vec.reshape(len(self.rows), self.n_cols, self.Q)

    def scatter(self, layer_bits: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """Copy of ``layer_bits`` with the covered rows replaced by ``vec``."""
        out = np.array(layer_bits, dtype=np.result_type(layer_bits, vec))
        out[list(self.rows)] = self.unflatten(vec)
        return out

    def coord(self, index: int) -> tuple[int, int, int]:
        if not 0 <= index < self.size:
            raise IndexError(index)
        r, rem = divmod(int(index), self.n_cols * self.Q)
        c, p = divmod(rem, self.Q)
        return self.rows[r], c, p

    def index(self, row: int, col: int, bit: int) -> int:
        r = self.rows.index(row)
        if not (0 <= col < self.n_cols and 0 <= bit < self.Q):
            raise IndexError((row, col, bit))
        return (r * self.n_cols + col) * self.Q + bit
