"""Stuck-at fault maps, injection, and ACAM row-remap mitigation.

A fault site is ``(array, row, col)``.  For crossbar images ``array`` is the
physical plane index and ``col`` the bit line.  For ACAM units ``array`` is
the output bit index (0 = LSB) and ``col`` addresses one RRAM of a cell as
``2 * feature + side`` with side 0 for the lower bound, 1 for the upper.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from nldpe.noise import G_MAX, G_MIN, STREAM_MISC, keyed_uniform


class FaultMode(str, enum.Enum):
    STUCK_LOW = "stuck_low"    # pinned at g_min
    STUCK_HIGH = "stuck_high"  # pinned at g_max

    @property
    def conductance(self) -> float:
        return G_MIN if self is FaultMode.STUCK_LOW else G_MAX


class FaultAddressError(ValueError):
    pass


@dataclass(frozen=True)
class FaultMap:
    entries: frozenset = frozenset()  # {(array, row, col, FaultMode)}

    def __post_init__(self):
        norm = set()
        seen = {}
        for a, r, c, m in self.entries:
            site = (int(a), int(r), int(c))
            m = FaultMode(m)
            if seen.get(site, m) is not m:
                raise ValueError(f"conflicting fault modes at {site}")
            seen[site] = m
            norm.add(site + (m,))
        object.__setattr__(self, "entries", frozenset(norm))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries, key=lambda e: e[:3]))

    def sites(self) -> dict:
        return {(a, r, c): m for a, r, c, m in self.entries}

    def for_array(self, array: int) -> dict:
        return {(r, c): m for a, r, c, m in self.entries if a == array}

    def merge(self, other: "FaultMap") -> "FaultMap":
        return FaultMap(self.entries | other.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["array", "row", "col", "mode"])
        for a, r, c, m in self:
            w.writerow([a, r, c, m.value])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FaultMap":
        rows = csv.DictReader(io.StringIO(text))
        try:
            return cls(frozenset((int(d["array"]), int(d["row"]), int(d["col"]), d["mode"].strip())
                                 for d in rows))
        except (KeyError, TypeError) as e:
            raise ValueError(f"fault CSV needs columns array,row,col,mode: {e}") from None


def random_fault_map(shape: tuple, rate: float, seed: int = 0, high_fraction: float = 0.5) -> FaultMap:
    """Independent faults at ``rate`` over every site of an (arrays, rows, cols) grid."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("fault rate must be in [0, 1]")
    n_arr, n_rows, n_cols = shape
    a, r, c = np.meshgrid(np.arange(n_arr), np.arange(n_rows), np.arange(n_cols), indexing="ij")
    u = keyed_uniform(seed, STREAM_MISC, 0, a, r, c)
    hit = u < rate
    high = keyed_uniform(seed, STREAM_MISC, 1, a, r, c) < high_fraction
    entries = frozenset(
        (int(ai), int(ri), int(ci), FaultMode.STUCK_HIGH if hi else FaultMode.STUCK_LOW)
        for ai, ri, ci, hi in zip(a[hit], r[hit], c[hit], high[hit])
    )
    return FaultMap(entries)


def inject_faults(image, fm: FaultMap):
    """Pin the listed cells of a crossbar image or ACAM unit; idempotent."""
    if not len(fm):
        return image
    return image.with_faults(fm)


# -- ACAM mitigation -------------------------------------------------------------

@dataclass(frozen=True)
class ArrayPlan:
    bit_index: int
    remaps: tuple = ()        # ((faulty_row, spare_row), ...)
    disabled: tuple = ()      # rows whose pre-charge is skipped
    frozen: tuple = ()        # ((row, col), ...) cells NAF must not update
    unrecoverable: bool = False


@dataclass(frozen=True)
class MitigationPlan:
    arrays: tuple = field(default_factory=tuple)

    @property
    def is_empty(self) -> bool:
        return not self.arrays

    @property
    def unrecoverable_bits(self) -> list[int]:
        return [p.bit_index for p in self.arrays if p.unrecoverable]

    def to_dict(self) -> dict:
        return {"arrays": [
            {"bit": p.bit_index, "remaps": [list(t) for t in p.remaps],
             "disabled": list(p.disabled), "frozen": [list(t) for t in p.frozen],
             "unrecoverable": p.unrecoverable}
            for p in self.arrays]}


def mitigation_plan(unit, fm: FaultMap) -> MitigationPlan:
    """Move every enabled row touching a stuck cell onto a fault-free unused row."""
    plans = []
    for arr in unit.arrays:
        faults = fm.for_array(arr.bit_index)
        faults.update(arr.stuck)
        if not faults:
            continue
        bad_rows = sorted({r for r, _ in faults})
        for r in bad_rows:
            if not 0 <= r < arr.capacity:
                raise FaultAddressError(f"row {r} outside array for bit {arr.bit_index}")
        bad = set(bad_rows)
        spares = [r for r in range(arr.capacity) if not arr.enabled[r] and r not in bad]
        remaps, disabled, stuck_on = [], [], []
        for r in bad_rows:
            if not arr.enabled[r]:
                continue
            if spares:
                remaps.append((r, spares.pop(0)))
                disabled.append(r)
            else:
                stuck_on.append(r)
        frozen = tuple(sorted(k for k in faults if k[0] in stuck_on))
        plans.append(ArrayPlan(arr.bit_index, tuple(remaps), tuple(disabled), frozen, bool(stuck_on)))
    return MitigationPlan(tuple(plans))


def apply_mitigation(unit, plan: MitigationPlan):
    return unit.remap_rows(plan)
