"""Fixed-point quantization and binary/Gray code conversion.

Every output code in the simulator is an ``n_bits`` word, MSB first.  A
:class:`QuantSpec` fixes the input domain a function is compiled over, the
output range its levels cover and the encoding the ACAM arrays store.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised for non-finite values handed to the quantizer."""


class Encoding(str, enum.Enum):
    BINARY = "binary"
    GRAY = "gray"


class Spacing(str, enum.Enum):
    UNIFORM = "uniform"
    # geometric levels, for probabilities that only ever feed a log unit
    LOG = "log"


@dataclass(frozen=True)
class QuantSpec:
    in_lo: float
    in_hi: float
    out_lo: float
    out_hi: float
    n_bits: int = 8
    encoding: Encoding = Encoding.GRAY
    spacing: Spacing = Spacing.UNIFORM

    def __post_init__(self):
        if not (math.isfinite(self.in_lo) and math.isfinite(self.in_hi) and self.in_lo < self.in_hi):
            raise ValueError(f"bad input domain [{self.in_lo}, {self.in_hi}]")
        if not (math.isfinite(self.out_lo) and math.isfinite(self.out_hi) and self.out_lo < self.out_hi):
            raise ValueError(f"bad output range [{self.out_lo}, {self.out_hi}]")
        if not 1 <= int(self.n_bits) <= 16:
            raise ValueError(f"n_bits must be in [1, 16], got {self.n_bits}")
        object.__setattr__(self, "n_bits", int(self.n_bits))
        object.__setattr__(self, "encoding", Encoding(self.encoding))
        object.__setattr__(self, "spacing", Spacing(self.spacing))
        if self.spacing is Spacing.LOG and self.out_lo <= 0:
            raise ValueError("log-spaced levels need out_lo > 0")

    @property
    def max_level(self) -> int:
        return (1 << self.n_bits) - 1

    @property
    def step(self) -> float:
        """Output spacing between adjacent levels (in log units for LOG spacing)."""
        if self.spacing is Spacing.LOG:
            return (math.log(self.out_hi) - math.log(self.out_lo)) / self.max_level
        return (self.out_hi - self.out_lo) / self.max_level

    @property
    def span(self) -> float:
        return self.in_hi - self.in_lo

    def with_encoding(self, encoding) -> "QuantSpec":
        return QuantSpec(self.in_lo, self.in_hi, self.out_lo, self.out_hi,
                         self.n_bits, Encoding(encoding), self.spacing)

    def to_dict(self) -> dict:
        return {
            "in_lo": self.in_lo, "in_hi": self.in_hi,
            "out_lo": self.out_lo, "out_hi": self.out_hi,
            "n_bits": self.n_bits, "encoding": self.encoding.value,
            "spacing": self.spacing.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(float(d["in_lo"]), float(d["in_hi"]), float(d["out_lo"]), float(d["out_hi"]),
                   int(d.get("n_bits", 8)), d.get("encoding", "gray"), d.get("spacing", "uniform"))


@dataclass(frozen=True)
class CodeWord:
    bits: tuple
    encoding: Encoding

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"bits must be 0/1, got {self.bits}")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "encoding", Encoding(self.encoding))

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    def to_int(self) -> int:
        v = 0
        for b in self.bits:
            v = (v << 1) | b
        return v

    @classmethod
    def from_int(cls, value: int, n_bits: int, encoding=Encoding.BINARY) -> "CodeWord":
        value = int(value)
        if not 0 <= value < (1 << n_bits):
            raise ValueError(f"{value} does not fit in {n_bits} bits")
        return cls(tuple((value >> i) & 1 for i in range(n_bits - 1, -1, -1)), encoding)

    @classmethod
    def parse(cls, text: str, encoding=Encoding.BINARY) -> "CodeWord":
        return cls(tuple(int(c) for c in text), encoding)

    def __str__(self):
        suffix = "g" if self.encoding is Encoding.GRAY else "b"
        return "".join(map(str, self.bits)) + suffix


# -- integer-level helpers (vectorized) ------------------------------------

def gray_encode(level):
    """Binary level(s) -> Gray code integer(s)."""
    level = np.asarray(level, dtype=np.int64)
    return level ^ (level >> 1)


def gray_decode(code, n_bits: int = 16):
    """Gray code integer(s) -> binary level(s) by XOR-folding the higher bits."""
    code = np.asarray(code, dtype=np.int64)
    out = code.copy()
    shift = 1
    while shift < n_bits:
        out ^= out >> shift
        shift <<= 1
    return out


def quantize_levels(v, q: QuantSpec):
    """Round-half-even level index of each value, clamped to the output range."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        bad = v[~np.isfinite(v)].ravel()[0]
        raise DomainError(f"cannot quantize non-finite value {bad}")
    if q.spacing is Spacing.LOG:
        vc = np.clip(v, q.out_lo, q.out_hi)
        lo = math.log(q.out_lo)
        t = (np.log(vc) - lo) * q.max_level / (math.log(q.out_hi) - lo)
    else:
        vc = np.clip(v, q.out_lo, q.out_hi)
        # scale by levels before dividing so k/levels inputs land exactly
        t = (vc - q.out_lo) * q.max_level / (q.out_hi - q.out_lo)
    return np.clip(np.rint(t), 0, q.max_level).astype(np.int64)


def level_values(levels, q: QuantSpec):
    levels = np.asarray(levels, dtype=np.float64)
    if q.spacing is Spacing.LOG:
        lo = math.log(q.out_lo)
        return np.exp(lo + levels * (math.log(q.out_hi) - lo) / q.max_level)
    return q.out_lo + levels * (q.out_hi - q.out_lo) / q.max_level


def encode_levels(levels, q: QuantSpec):
    """Level index -> stored code integer under the spec's encoding."""
    if q.encoding is Encoding.GRAY:
        return gray_encode(levels)
    return np.asarray(levels, dtype=np.int64)


def decode_codes(codes, q: QuantSpec):
    if q.encoding is Encoding.GRAY:
        return gray_decode(codes, q.n_bits)
    return np.asarray(codes, dtype=np.int64)


# -- CodeWord API -----------------------------------------------------------

def quantize(v: float, q: QuantSpec) -> CodeWord:
    level = int(quantize_levels(v, q))
    return CodeWord.from_int(int(encode_levels(level, q)), q.n_bits, q.encoding)


def dequantize(c: CodeWord, q: QuantSpec) -> float:
    if c.n_bits != q.n_bits:
        raise ValueError(f"code has {c.n_bits} bits, spec expects {q.n_bits}")
    level = c.to_int() if c.encoding is Encoding.BINARY else int(gray_decode(c.to_int(), c.n_bits))
    return float(level_values(level, q))


def binary_to_gray(b: CodeWord) -> CodeWord:
    if b.encoding is not Encoding.BINARY:
        raise ValueError("binary_to_gray expects a binary code word")
    bits = b.bits
    g = [bits[0]] + [bits[k - 1] ^ bits[k] for k in range(1, len(bits))]
    return CodeWord(tuple(g), Encoding.GRAY)


def gray_to_binary(g: CodeWord) -> CodeWord:
    if g.encoding is not Encoding.GRAY:
        raise ValueError("gray_to_binary expects a Gray code word")
    out, acc = [], 0
    for bit in g.bits:  # MSB first: each binary bit is the XOR of all Gray bits above and at it
        acc ^= bit
        out.append(acc)
    return CodeWord(tuple(out), Encoding.BINARY)
