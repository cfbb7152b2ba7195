"""Compile a scalar function into one interval set per output bit.

A single-feature decision tree that memorises its training data is a union
of disjoint intervals, so the compiler works with intervals directly: it
scans a dense grid for code changes, bisects each change down to adjacent
floats, and records the maximal runs where each encoded bit is 1.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from nldpe.codes import (
    CodeWord,
    Encoding,
    QuantSpec,
    decode_codes,
    encode_levels,
    level_values,
    quantize_levels,
)
from nldpe.functions import get_builtin

DEFAULT_GRID = 1 << 18


class CompilationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BitIntervalSet:
    bit_index: int
    intervals: tuple  # ((lo, hi), ...) closed, sorted, disjoint
    encoding: Encoding = Encoding.GRAY

    @property
    def row_count(self) -> int:
        return len(self.intervals)

    @property
    def los(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.intervals], dtype=np.float64)

    @property
    def his(self) -> np.ndarray:
        return np.array([hi for _, hi in self.intervals], dtype=np.float64)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not self.intervals:
            return np.zeros(x.shape, dtype=bool)
        los, his = self.los, self.his
        idx = np.searchsorted(los, x, side="right") - 1
        safe = np.clip(idx, 0, len(los) - 1)
        return (idx >= 0) & (x <= his[safe])


@dataclass(frozen=True)
class CompiledFunction:
    name: str
    qspec: QuantSpec
    bits: tuple  # BitIntervalSet per bit, indexed by bit_index (LSB first)
    func: Optional[Callable] = field(default=None, compare=False, repr=False)

    def row_counts(self) -> list[int]:
        """Rows per output bit, MSB first."""
        return [b.row_count for b in reversed(self.bits)]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "qspec": self.qspec.to_dict(),
            "bits": [
                {"bit": b.bit_index, "intervals": [[lo, hi] for lo, hi in b.intervals]}
                for b in self.bits
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, func: Optional[Callable] = None) -> "CompiledFunction":
        q = QuantSpec.from_dict(d["qspec"])
        bits = tuple(
            BitIntervalSet(int(b["bit"]), tuple((float(lo), float(hi)) for lo, hi in b["intervals"]), q.encoding)
            for b in sorted(d["bits"], key=lambda b: b["bit"])
        )
        return cls(d["name"], q, bits, func)


def _as_vector_fn(f):
    def g(x):
        y = np.asarray(f(x), dtype=np.float64)
        if y.shape != np.shape(x):
            y = np.vectorize(lambda v: float(f(v)), otypes=[float])(x)
        return y
    return g


def _code_fn(f, q: QuantSpec):
    def code_at(x):
        y = f(x)
        bad = ~np.isfinite(y)
        if np.any(bad):
            point = np.asarray(x)[bad].ravel()[0]
            raise CompilationError(f"function is not finite at x={point!r}")
        return encode_levels(quantize_levels(y, q), q)
    return code_at


def _locate_changes(code_at, xs, codes):
    """Return sorted (last_left, first_right, code_right) for every code change."""
    k = np.nonzero(codes[:-1] != codes[1:])[0]
    a, b = xs[k], xs[k + 1]
    ca, cb = codes[k], codes[k + 1]
    found_left, found_right, found_code = [], [], []
    while a.size:
        lo, hi = a.copy(), b.copy()
        active = np.ones(lo.shape, dtype=bool)
        for _ in range(80):
            mid = lo + (hi - lo) * 0.5
            active &= (mid > lo) & (mid < hi)
            if not active.any():
                break
            cm = code_at(mid)
            same = (cm == ca) & active
            lo = np.where(same, mid, lo)
            hi = np.where(active & ~same, mid, hi)
        c_hi = code_at(hi)
        found_left.append(lo)
        found_right.append(hi)
        found_code.append(c_hi)
        # a steep cell can hold several level changes; keep scanning its remainder
        more = c_hi != cb
        a, b, ca, cb = hi[more], b[more], c_hi[more], cb[more]
    if not found_left:
        return np.empty(0), np.empty(0), np.empty(0, dtype=np.int64)
    left = np.concatenate(found_left)
    right = np.concatenate(found_right)
    code = np.concatenate(found_code)
    order = np.argsort(left, kind="stable")
    return left[order], right[order], code[order]


def compile_function(f: Callable, q: QuantSpec, name: str = "custom",
                     grid_points: int = DEFAULT_GRID) -> CompiledFunction:
    fv = _as_vector_fn(f)
    code_at = _code_fn(fv, q)
    xs = np.linspace(q.in_lo, q.in_hi, int(grid_points))
    codes = code_at(xs)
    left, right, new_codes = _locate_changes(code_at, xs, codes)

    # piecewise-constant code: segment s covers [starts[s], ends[s]]
    starts = np.concatenate([[q.in_lo], right])
    ends = np.concatenate([left, [q.in_hi]])
    seg_codes = np.concatenate([[codes[0]], new_codes]).astype(np.int64)

    bits = []
    for i in range(q.n_bits):
        on = ((seg_codes >> i) & 1).astype(bool)
        intervals = []
        s = 0
        n = len(on)
        while s < n:
            if not on[s]:
                s += 1
                continue
            e = s
            while e + 1 < n and on[e + 1]:
                e += 1
            intervals.append((float(starts[s]), float(ends[e])))
            s = e + 1
        bits.append(BitIntervalSet(i, tuple(intervals), q.encoding))
    return CompiledFunction(name, q, tuple(bits), fv)


@functools.lru_cache(maxsize=128)
def compile_builtin(name: str, n_bits: int = 8, encoding: str = "gray",
                    domain: Optional[tuple] = None, grid_points: int = DEFAULT_GRID) -> CompiledFunction:
    b = get_builtin(name)
    q = b.qspec(n_bits, encoding, domain)
    return compile_function(b.func, q, b.name, grid_points)


@functools.lru_cache(maxsize=128)
def compile_spec(name: str, q: QuantSpec, grid_points: int = DEFAULT_GRID) -> CompiledFunction:
    """Compile a built-in function over an explicit QuantSpec (cached)."""
    return compile_function(get_builtin(name).func, q, name, grid_points)


def row_counts(c: CompiledFunction) -> list[int]:
    return c.row_counts()


def eval_compiled_codes(c: CompiledFunction, x) -> np.ndarray:
    """Stored-encoding code integers for each input (inputs clamped to the domain)."""
    x = np.clip(np.asarray(x, dtype=np.float64), c.qspec.in_lo, c.qspec.in_hi)
    out = np.zeros(x.shape, dtype=np.int64)
    for b in c.bits:
        out |= b.contains(x).astype(np.int64) << b.bit_index
    return out


def eval_compiled(c: CompiledFunction, x: float) -> CodeWord:
    code = int(eval_compiled_codes(c, np.float64(x)))
    return CodeWord.from_int(code, c.qspec.n_bits, c.qspec.encoding)


def compiled_values(c: CompiledFunction, x) -> np.ndarray:
    return level_values(decode_codes(eval_compiled_codes(c, x), c.qspec), c.qspec)


def compile_fixed_mse(c: CompiledFunction, points: int = 100_000) -> float:
    if c.func is None:
        raise ValueError("compiled function carries no reference callable")
    xs = np.linspace(c.qspec.in_lo, c.qspec.in_hi, points)
    return float(np.mean((compiled_values(c, xs) - c.func(xs)) ** 2))
