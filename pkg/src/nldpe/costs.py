"""Event counting and static per-event energy model.

Per-event energies are derived from component power at a 1 GHz clock,
divided by the number of parallel instances (power in mW over 1 GHz is pJ
per cycle).  Duty cycles are unknown, so those figures are approximations;
the ACAM cell search uses the direct 0.44 fJ figure instead.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from nldpe.dtcompile import compile_builtin, compile_fixed_mse
from nldpe.functions import TABLE1_ORDER

EVENT_KINDS = (
    "crossbar_column_read",
    "acam_unit_search",
    "acam_cell_search",
    "xor_decode",
    "adder_op",
    "dac_conversion",
    "buffer_access",
)

COMPUTE_COMPONENTS = ("DPE", "ACAM", "Adders")


class UnknownEventError(KeyError):
    pass


@dataclass
class RunLedger:
    counters: Counter = field(default_factory=Counter)
    unit_calls: Counter = field(default_factory=Counter)

    def add(self, kind: str, n: int = 1):
        if kind not in EVENT_KINDS:
            raise UnknownEventError(f"unknown event kind {kind!r}")
        if n < 0:
            raise ValueError("event counts only grow")
        self.counters[kind] += int(n)

    def add_unit_call(self, name: str, n: int = 1):
        self.unit_calls[name] += int(n)

    def merge(self, other: "RunLedger") -> "RunLedger":
        out = RunLedger(Counter(self.counters), Counter(self.unit_calls))
        out.counters.update(other.counters)
        out.unit_calls.update(other.unit_calls)
        return out

    def count(self, kind: str) -> int:
        return int(self.counters.get(kind, 0))

    def to_dict(self) -> dict:
        return {"counters": {k: self.count(k) for k in EVENT_KINDS},
                "unit_calls": dict(sorted(self.unit_calls.items()))}


def tally(run: Callable, *args, **kwargs) -> RunLedger:
    """Run ``run(*args, ledger=..., **kwargs)`` on a fresh ledger and return the ledger."""
    ledger = RunLedger()
    run(*args, ledger=ledger, **kwargs)
    return ledger


@dataclass(frozen=True)
class Component:
    name: str
    power_mw: float
    area_mm2: float
    instances: int
    events: tuple = ()                       # event kinds charged to this component
    energy_per_event_pj: Optional[float] = None

    def __post_init__(self):
        if self.power_mw < 0 or self.area_mm2 < 0 or self.instances < 1:
            raise ValueError(f"component {self.name}: costs must be non-negative")
        if self.energy_per_event_pj is not None and self.energy_per_event_pj < 0:
            raise ValueError(f"component {self.name}: negative event energy")

    def event_energy_pj(self, clock_ghz: float) -> float:
        if self.energy_per_event_pj is not None:
            return self.energy_per_event_pj
        return self.power_mw / clock_ghz / self.instances


def default_components() -> tuple:
    return (
        Component("DPE", 1.31, 0.011534, 4 * 256, ("crossbar_column_read",)),
        Component("ACAM", 43.52, 0.041431, 256, ("acam_cell_search",), 0.44e-3),
        Component("Input buffer", 0.23, 0.00077, 256, ("buffer_access",)),
        Component("Output buffer", 0.23, 0.00077, 256),
        Component("Register", 0.12, 0.000385, 128),
        Component("DAC", 4.0, 0.00017, 4 * 256, ("dac_conversion",)),
        Component("XOR", 0.385, 0.000215, 7 * 256, ("xor_decode",)),
        Component("Tile register", 0.69, 0.00231, 768),
        Component("Adders", 12.8, 0.0154, 256, ("adder_op",)),
        Component("Shared memory", 20.7, 0.083, 64 * 1024),
    )


@dataclass(frozen=True)
class ComponentCosts:
    components: tuple = field(default_factory=default_components)
    clock_ghz: float = 1.0

    def by_event(self) -> dict:
        out = {}
        for c in self.components:
            for e in c.events:
                out[e] = c
        return out

    def to_dict(self) -> dict:
        return {"clock_ghz": self.clock_ghz, "components": [
            {"name": c.name, "power_mw": c.power_mw, "area_mm2": c.area_mm2, "instances": c.instances,
             "events": list(c.events), "energy_per_event_pj": c.event_energy_pj(self.clock_ghz)}
            for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentCosts":
        if not d.get("components"):
            return cls(clock_ghz=float(d.get("clock_ghz", 1.0)))
        comps = tuple(Component(c["name"], float(c["power_mw"]), float(c.get("area_mm2", 0.0)),
                                int(c.get("instances", 1)), tuple(c.get("events", ())),
                                c.get("energy_per_event_pj")) for c in d["components"])
        return cls(comps, float(d.get("clock_ghz", 1.0)))


def energy_report(ledger: RunLedger, costs: Optional[ComponentCosts] = None) -> dict:
    """Per-component energy (pJ), totals and percentage shares."""
    costs = costs or ComponentCosts()
    charged = costs.by_event()
    per_component = {c.name: 0.0 for c in costs.components}
    for kind, n in ledger.counters.items():
        if kind == "acam_unit_search":
            continue  # counted through its cell searches
        if kind not in charged:
            raise UnknownEventError(f"no component charges event kind {kind!r}")
        c = charged[kind]
        per_component[c.name] += n * c.event_energy_pj(costs.clock_ghz)
    total = sum(per_component.values())
    rows = []
    for name, e in per_component.items():
        rows.append({"component": name, "energy_pj": e,
                     "share_pct": 100.0 * e / total if total else 0.0})
    compute = sum(per_component[n] for n in COMPUTE_COMPONENTS if n in per_component)
    return {"components": rows, "total_pj": total,
            "compute_share_pct": 100.0 * compute / total if total else 0.0,
            "counters": ledger.to_dict()["counters"],
            "note": "per-event energies from power at the clock rate are approximate"}


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "energy_pj", "share_pct"])
    for r in report["components"]:
        w.writerow([r["component"], f"{r['energy_pj']:.6g}", f"{r['share_pct']:.4f}"])
    w.writerow(["total", f"{report['total_pj']:.6g}", "100.0000" if report["total_pj"] else "0.0000"])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def table1_rows(functions: Iterable[str] = TABLE1_ORDER, bits: int = 8,
                encodings: Iterable[str] = ("binary", "gray")) -> dict:
    """{(function, encoding): (counts MSB first, mse)} on the default domains."""
    out = {}
    for f in functions:
        for enc in encodings:
            c = compile_builtin(f, bits, enc)
            out[(f, enc)] = (c.row_counts(), compile_fixed_mse(c))
    return out


def emit_table1(functions: Iterable[str] = TABLE1_ORDER, bits: int = 8,
                encodings: Iterable[str] = ("binary", "gray")) -> str:
    """Row counts per bit (MSB first), totals and compiled-function MSE, one column per cell."""
    functions, encodings = list(functions), list(encodings)
    data = table1_rows(functions, bits, encodings)
    cols = [(f, e) for f in functions for e in encodings]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + [f"{f}_{e}" for f, e in cols])
    for k in range(bits):
        w.writerow([f"bit_{bits - 1 - k}"] + [data[c][0][k] for c in cols])
    w.writerow(["total"] + [sum(data[c][0]) for c in cols])
    w.writerow(["mse"] + [f"{data[c][1]:.6e}" for c in cols])
    return buf.getvalue()
