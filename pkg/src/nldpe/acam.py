"""Analog CAM arrays and 8-array function units.

Each cell stores a range as two conductances.  The input ``x`` of a unit is
mapped linearly onto the data-line span ``[TH(g_min), TH(g_max)]`` and a
stored bound ``t`` is programmed at ``G = TH^-1(dl(t))``; a search reads the
(optionally noisy) conductances back through ``TH`` and compares.  A row
matches when every cell holds its feature in range, an array ORs its rows,
and a unit decodes its Gray bits with an XOR chain.

Bounds at the edge of the input domain are stored as wildcard sides: the
comparator is parked at the conductance extreme and never pulls the match
line low, so noise cannot clip the domain ends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from nldpe.codes import CodeWord, Encoding, QuantSpec, decode_codes, level_values
from nldpe.dtcompile import BitIntervalSet, CompiledFunction
from nldpe.faults import FaultAddressError, FaultMap, FaultMode, MitigationPlan
from nldpe.noise import (
    DEFAULT_TRANSFER,
    G_MAX,
    G_MIN,
    NoiseSpec,
    conductance_to_threshold,
    program_conductance,
    read_conductance,
    threshold_to_conductance,
)

# rows per output-bit array, MSB first
STANDARD_CAPACITIES = (1, 2, 2, 5, 8, 16, 32, 64)
_CHUNK = 8192


class AcamMappingError(ValueError):
    pass


def _transfer_of(t) -> tuple:
    if t is None:
        return DEFAULT_TRANSFER
    if isinstance(t, NoiseSpec):
        return t.acam_transfer
    return tuple(float(v) for v in t)


# -- data-line mapping -----------------------------------------------------------

def dl_span(transfer=DEFAULT_TRANSFER) -> tuple[float, float]:
    return (float(conductance_to_threshold(G_MIN, transfer)),
            float(conductance_to_threshold(G_MAX, transfer)))


def x_to_g(x, x_lo: float, x_hi: float, transfer=DEFAULT_TRANSFER) -> np.ndarray:
    """Input-domain value -> conductance storing it as a threshold."""
    v_lo, v_hi = dl_span(transfer)
    x = np.clip(np.asarray(x, dtype=np.float64), x_lo, x_hi)
    v = v_lo + (x - x_lo) * ((v_hi - v_lo) / (x_hi - x_lo))
    return np.clip(threshold_to_conductance(v, transfer), G_MIN, G_MAX)


def g_to_x(g, x_lo: float, x_hi: float, transfer=DEFAULT_TRANSFER) -> np.ndarray:
    v_lo, v_hi = dl_span(transfer)
    v = conductance_to_threshold(g, transfer)
    return x_lo + (v - v_lo) * ((x_hi - x_lo) / (v_hi - v_lo))


def x_to_g_slope(g, x_lo: float, x_hi: float, transfer=DEFAULT_TRANSFER) -> np.ndarray:
    """dx/dG of the readback map at conductance ``g``."""
    a, b, _ = transfer
    v_lo, v_hi = dl_span(transfer)
    return a * np.exp(b) * np.asarray(g, dtype=np.float64) ** (a - 1.0) * ((x_hi - x_lo) / (v_hi - v_lo))


# -- arrays ------------------------------------------------------------------------

@dataclass(frozen=True)
class AcamCell:
    lo_g: float
    hi_g: float
    wildcard: bool = False


@dataclass(frozen=True, eq=False)
class AcamArray:
    bit_index: int
    lo_g: np.ndarray      # (capacity, features) target conductances
    hi_g: np.ndarray
    lo_wild: np.ndarray   # bool, side parked as don't-care
    hi_wild: np.ndarray
    enabled: np.ndarray   # bool (capacity,)
    x_lo: float
    x_hi: float
    transfer: tuple = DEFAULT_TRANSFER
    stuck: dict = field(default_factory=dict)  # (row, 2*feature+side) -> FaultMode

    @property
    def capacity(self) -> int:
        return self.lo_g.shape[0]

    @property
    def n_features(self) -> int:
        return self.lo_g.shape[1]

    @property
    def active_rows(self) -> int:
        return int(self.enabled.sum())

    @property
    def cells(self) -> int:
        return self.capacity * self.n_features

    def cell(self, row: int, feature: int = 0) -> AcamCell:
        return AcamCell(float(self.lo_g[row, feature]), float(self.hi_g[row, feature]),
                        bool(self.lo_wild[row, feature] and self.hi_wild[row, feature]))

    def stored_thresholds(self) -> tuple[np.ndarray, np.ndarray]:
        """Noise-free (lo, hi) thresholds in input units; wildcard sides are infinite."""
        lo = np.where(self.lo_wild, -np.inf, g_to_x(self.lo_g, self.x_lo, self.x_hi, self.transfer))
        hi = np.where(self.hi_wild, np.inf, g_to_x(self.hi_g, self.x_lo, self.x_hi, self.transfer))
        return lo, hi

    def with_thresholds(self, lo_x, hi_x) -> "AcamArray":
        """Reprogram non-wildcard sides to new input-unit thresholds (pins persist)."""
        lo_g = np.where(self.lo_wild, self.lo_g, x_to_g(lo_x, self.x_lo, self.x_hi, self.transfer))
        hi_g = np.where(self.hi_wild, self.hi_g, x_to_g(hi_x, self.x_lo, self.x_hi, self.transfer))
        return replace(self, lo_g=lo_g, hi_g=hi_g)

    def to_dict(self) -> dict:
        rows = []
        for r in range(self.capacity):
            rows.append({"lo_g": self.lo_g[r].tolist(), "hi_g": self.hi_g[r].tolist(),
                         "lo_wild": self.lo_wild[r].tolist(), "hi_wild": self.hi_wild[r].tolist(),
                         "enabled": bool(self.enabled[r])})
        return {"bit": self.bit_index, "domain": [self.x_lo, self.x_hi],
                "transfer": list(self.transfer), "rows": rows,
                "stuck": [[r, c, m.value] for (r, c), m in sorted(self.stuck.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "AcamArray":
        rows = d["rows"]
        f = len(rows[0]["lo_g"]) if rows else 1

        def col(key, dtype):
            return np.array([r[key] for r in rows], dtype=dtype).reshape(len(rows), f)
        return cls(int(d["bit"]), col("lo_g", float), col("hi_g", float),
                   col("lo_wild", bool), col("hi_wild", bool),
                   np.array([r["enabled"] for r in rows], dtype=bool),
                   float(d["domain"][0]), float(d["domain"][1]), tuple(d.get("transfer", DEFAULT_TRANSFER)),
                   {(int(r), int(c)): FaultMode(m) for r, c, m in d.get("stuck", [])})


def array_from_rows(rows: Sequence, domain=(0.0, 1.0), bit_index: int = 0,
                    transfer=DEFAULT_TRANSFER, capacity: Optional[int] = None) -> AcamArray:
    """Build an array from rows of per-feature ``(lo, hi)`` bounds; ``None`` is a wildcard side."""
    transfer = _transfer_of(transfer)
    x_lo, x_hi = map(float, domain)
    n = len(rows)
    cap = n if capacity is None else int(capacity)
    if n > cap:
        raise AcamMappingError(f"bit {bit_index}: {n} rows exceed capacity {cap}")
    f = len(rows[0]) if rows else 1
    lo_g = np.full((cap, f), G_MIN)
    hi_g = np.full((cap, f), G_MAX)
    lo_w = np.ones((cap, f), dtype=bool)
    hi_w = np.ones((cap, f), dtype=bool)
    for r, row in enumerate(rows):
        if len(row) != f:
            raise AcamMappingError("rows must have the same number of features")
        for j, (lo, hi) in enumerate(row):
            if lo is not None and lo > x_lo:
                lo_g[r, j] = x_to_g(lo, x_lo, x_hi, transfer)
                lo_w[r, j] = False
            if hi is not None and hi < x_hi:
                hi_g[r, j] = x_to_g(hi, x_lo, x_hi, transfer)
                hi_w[r, j] = False
    enabled = np.zeros(cap, dtype=bool)
    enabled[:n] = True
    return AcamArray(bit_index, lo_g, hi_g, lo_w, hi_w, enabled, x_lo, x_hi, transfer)


def map_intervals_to_array(s: BitIntervalSet, transfer=None, capacity: Optional[int] = None,
                           domain: tuple = (0.0, 1.0)) -> AcamArray:
    """One row per interval; thresholds stored through the inverse transfer."""
    cap = s.row_count if capacity is None else capacity
    if s.row_count > cap:
        raise AcamMappingError(f"bit {s.bit_index} needs {s.row_count} rows, array holds {cap}")
    return array_from_rows([[iv] for iv in s.intervals], domain, s.bit_index, _transfer_of(transfer), cap)


# -- noisy readback ------------------------------------------------------------

def _thresholds(arr: AcamArray, rows: np.ndarray, noise: Optional[NoiseSpec], unit_id: int,
                read_idx: Optional[np.ndarray]):
    """Input-unit thresholds of ``rows``: (R, F) noise-free, (N, R, F) with read noise."""
    bounds = []
    for side, g_t, wild in ((0, arr.lo_g[rows], arr.lo_wild[rows]), (1, arr.hi_g[rows], arr.hi_wild[rows])):
        dev = 2 * np.arange(arr.n_features) + side
        r_key = rows[:, None]
        if noise is None or noise.is_noiseless:
            g = g_t
        else:
            g = program_conductance(g_t, noise, unit_id, arr.bit_index, r_key, dev[None, :])
            if read_idx is not None:
                g = read_conductance(g, noise, read_idx[:, None, None], unit_id, arr.bit_index,
                                     r_key[None], dev[None, None, :])
        pinned = np.zeros(g_t.shape, dtype=bool)
        pin_g = np.zeros(g_t.shape)
        for k, r in enumerate(rows):
            for j in range(arr.n_features):
                m = arr.stuck.get((int(r), 2 * j + side))
                if m is not None:
                    pinned[k, j] = True
                    pin_g[k, j] = m.conductance
        g = np.where(pinned, pin_g, g)
        x = g_to_x(g, arr.x_lo, arr.x_hi, arr.transfer)
        open_side = wild & ~pinned
        x = np.where(open_side, -np.inf if side == 0 else np.inf, x)
        bounds.append(x)
    return bounds[0], bounds[1]


def _search(arr: AcamArray, xs: np.ndarray, noise, unit_id: int, read_offset: int) -> np.ndarray:
    """Match lines of every enabled row for inputs ``xs`` (N, F) -> (N, R) bool."""
    rows = np.nonzero(arr.enabled)[0]
    n = xs.shape[0]
    if rows.size == 0:
        return np.zeros((n, 0), dtype=bool)
    noisy_read = noise is not None and not noise.is_noiseless and noise.read_scale > 0
    if not noisy_read:
        lo, hi = _thresholds(arr, rows, noise, unit_id, None)
        return np.all((lo[None] <= xs[:, None, :]) & (xs[:, None, :] <= hi[None]), axis=2)
    out = np.empty((n, rows.size), dtype=bool)
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        idx = np.arange(read_offset + s, read_offset + e, dtype=np.int64)
        lo, hi = _thresholds(arr, rows, noise, unit_id, idx)
        x = xs[s:e, None, :]
        out[s:e] = np.all((lo <= x) & (x <= hi), axis=2)
    return out


def match_row(arr: AcamArray, row: int, x_vec, noise: Optional[NoiseSpec] = None,
              unit_id: int = 0, read_index: int = 0) -> bool:
    x = np.asarray(x_vec, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != arr.n_features:
        raise ValueError(f"expected {arr.n_features} features, got {x.shape[1]}")
    if not arr.enabled[row]:
        return False
    rows = np.array([row])
    read = None
    if noise is not None and not noise.is_noiseless and noise.read_scale > 0:
        read = np.array([read_index], dtype=np.int64)
    lo, hi = _thresholds(arr, rows, noise, unit_id, read)
    return bool(np.all((lo <= x) & (x <= hi)))


def eval_bits(arr: AcamArray, xs, noise: Optional[NoiseSpec] = None, unit_id: int = 0,
              read_offset: int = 0) -> np.ndarray:
    """OR of match lines for many inputs; input ``k`` uses search index ``read_offset + k``."""
    xs = np.asarray(xs, dtype=np.float64)
    xs = xs.reshape(-1, arr.n_features) if arr.n_features > 1 else xs.reshape(-1, 1)
    return _search(arr, xs, noise, unit_id, read_offset).any(axis=1)


def eval_bit(arr: AcamArray, x, noise: Optional[NoiseSpec] = None, unit_id: int = 0,
             read_index: int = 0) -> int:
    return int(eval_bits(arr, np.atleast_1d(x), noise, unit_id, read_index)[0])


# -- units -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AcamUnit:
    name: str
    qspec: QuantSpec
    arrays: tuple        # AcamArray per output bit, LSB first
    unit_id: int = 0

    @property
    def total_cells(self) -> int:
        return sum(a.cells for a in self.arrays)

    @property
    def n_bits(self) -> int:
        return len(self.arrays)

    def capacities(self) -> list[int]:
        """Rows per bit array, MSB first."""
        return [a.capacity for a in reversed(self.arrays)]

    def with_faults(self, fm: FaultMap) -> "AcamUnit":
        arrays = list(self.arrays)
        for (a, r, c), m in fm.sites().items():
            if not 0 <= a < len(arrays):
                raise FaultAddressError(f"no array {a} in unit {self.name!r}")
            arr = arrays[a]
            if not (0 <= r < arr.capacity and 0 <= c < 2 * arr.n_features):
                raise FaultAddressError(f"cell ({a}, {r}, {c}) outside unit {self.name!r}")
            arrays[a] = replace(arr, stuck={**arr.stuck, (r, c): m})
        return replace(self, arrays=tuple(arrays))

    def remap_rows(self, plan: MitigationPlan) -> "AcamUnit":
        arrays = list(self.arrays)
        for p in plan.arrays:
            arr = arrays[p.bit_index]
            lo_g, hi_g = arr.lo_g.copy(), arr.hi_g.copy()
            lo_w, hi_w = arr.lo_wild.copy(), arr.hi_wild.copy()
            en = arr.enabled.copy()
            for src, dst in p.remaps:
                lo_g[dst], hi_g[dst] = lo_g[src], hi_g[src]
                lo_w[dst], hi_w[dst] = lo_w[src], hi_w[src]
                en[dst] = True
            en[list(p.disabled)] = False
            arrays[p.bit_index] = replace(arr, lo_g=lo_g, hi_g=hi_g, lo_wild=lo_w, hi_wild=hi_w, enabled=en)
        return replace(self, arrays=tuple(arrays))

    def with_id(self, unit_id: int) -> "AcamUnit":
        return replace(self, unit_id=int(unit_id))

    def to_dict(self) -> dict:
        return {"kind": "acam_unit", "name": self.name, "unit_id": self.unit_id,
                "qspec": self.qspec.to_dict(), "total_cells": self.total_cells,
                "arrays": [a.to_dict() for a in reversed(self.arrays)]}

    @classmethod
    def from_dict(cls, d: dict) -> "AcamUnit":
        arrays = sorted((AcamArray.from_dict(a) for a in d["arrays"]), key=lambda a: a.bit_index)
        return cls(d["name"], QuantSpec.from_dict(d["qspec"]), tuple(arrays), int(d.get("unit_id", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def unit_capacities(c: CompiledFunction, capacities="standard") -> list[int]:
    """Rows per bit array, LSB first."""
    counts = [b.row_count for b in c.bits]
    n = c.qspec.n_bits
    if isinstance(capacities, str):
        if capacities not in ("standard", "fit"):
            raise ValueError(f"capacities must be 'standard', 'fit' or a tuple, got {capacities!r}")
        base = list(reversed(STANDARD_CAPACITIES)) if n == 8 else counts
        if capacities == "fit":
            return [max(b, k) for b, k in zip(base, counts)]
        return base
    caps = list(reversed([int(v) for v in capacities]))
    if len(caps) != n:
        raise ValueError(f"need {n} capacities, got {len(caps)}")
    return caps


def program_unit(c: CompiledFunction, transfer=None, capacities="standard", unit_id: int = 0) -> AcamUnit:
    """Map every bit of a compiled function onto its own array.

    Programming noise is not baked into the image: it is a fixed per-cell draw
    keyed by (seed, unit_id, bit, row, device) and applied at search time.
    """
    caps = unit_capacities(c, capacities)
    domain = (c.qspec.in_lo, c.qspec.in_hi)
    arrays = tuple(map_intervals_to_array(b, transfer, cap, domain) for b, cap in zip(c.bits, caps))
    return AcamUnit(c.name, c.qspec, arrays, int(unit_id))


def eval_unit_codes(u: AcamUnit, xs, noise: Optional[NoiseSpec] = None, read_offset: int = 0,
                    ledger=None) -> np.ndarray:
    """Binary output levels for many inputs (inputs clamped to the unit's domain)."""
    xs = np.clip(np.asarray(xs, dtype=np.float64), u.qspec.in_lo, u.qspec.in_hi)
    shape = xs.shape
    flat = xs.ravel()
    code = np.zeros(flat.shape, dtype=np.int64)
    for arr in u.arrays:
        code |= eval_bits(arr, flat, noise, u.unit_id, read_offset).astype(np.int64) << arr.bit_index
    if ledger is not None:
        n = flat.size
        ledger.add("acam_unit_search", n)
        ledger.add("acam_cell_search", n * u.total_cells)
        if u.qspec.encoding is Encoding.GRAY:
            ledger.add("xor_decode", n * (u.n_bits - 1))
        ledger.add_unit_call(u.name, n)
    return decode_codes(code, u.qspec).reshape(shape)


def eval_unit(u: AcamUnit, x: float, noise: Optional[NoiseSpec] = None, read_index: int = 0,
              ledger=None) -> CodeWord:
    level = int(eval_unit_codes(u, np.float64(x), noise, read_index, ledger))
    return CodeWord.from_int(level, u.n_bits, Encoding.BINARY)


def eval_unit_values(u: AcamUnit, xs, noise: Optional[NoiseSpec] = None, read_offset: int = 0,
                     ledger=None) -> np.ndarray:
    return level_values(eval_unit_codes(u, xs, noise, read_offset, ledger), u.qspec)
