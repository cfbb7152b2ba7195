import csv
import io
import json

import numpy as np
import pytest

from nldpe import acam, costs
from nldpe import pipelines as P
from nldpe.dtcompile import compile_builtin


def _attention_ledger(seed=0, tokens=4):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, (tokens, 8))
    W = [r.uniform(-1, 1, (8, 8)) / np.sqrt(8) for _ in range(3)]
    return costs.tally(P.attention, X, X, X, *W)


def test_single_unit_search_counts():
    ledger = costs.RunLedger()
    acam.eval_unit(acam.program_unit(compile_builtin("sigmoid")), 0.3, ledger=ledger)
    assert ledger.count("acam_cell_search") == 130
    assert ledger.count("xor_decode") == 7
    assert ledger.count("acam_unit_search") == 1


def test_dot_product_counts():
    r = np.random.default_rng(0)
    ledger = costs.tally(P.dot_logexp, r.random(256), r.random(256))
    assert ledger.unit_calls == {"log": 2 * 256, "exp": 256}
    assert ledger.count("adder_op") == 256 + 255


def test_empty_ledger_zero():
    rep = costs.energy_report(costs.RunLedger())
    assert rep["total_pj"] == 0.0
    assert all(r["energy_pj"] == 0.0 for r in rep["components"])


def test_unit_search_energy():
    ledger = costs.RunLedger()
    ledger.add("acam_cell_search", 130)
    rep = costs.energy_report(ledger)
    acam_row = next(r for r in rep["components"] if r["component"] == "ACAM")
    assert acam_row["energy_pj"] == pytest.approx(0.0572)


def test_doubling_counts_doubles_energy():
    one = _attention_ledger()
    two = one.merge(one)
    r1, r2 = costs.energy_report(one), costs.energy_report(two)
    for a, b in zip(r1["components"], r2["components"]):
        assert b["energy_pj"] == pytest.approx(2 * a["energy_pj"])
    assert sum(r["share_pct"] for r in r1["components"]) == pytest.approx(100.0)


def test_compute_units_dominate_attention():
    assert costs.energy_report(_attention_ledger())["compute_share_pct"] > 50.0


def test_ledger_deterministic():
    assert _attention_ledger(3).to_dict() == _attention_ledger(3).to_dict()


def test_event_energy_from_power():
    c = costs.Component("X", 2.0, 0.0, 4)
    assert c.event_energy_pj(1.0) == 0.5
    assert c.event_energy_pj(2.0) == 0.25


def test_ledger_rejects_bad_events():
    ledger = costs.RunLedger()
    with pytest.raises(costs.UnknownEventError):
        ledger.add("teleport")
    with pytest.raises(ValueError):
        ledger.add("adder_op", -1)
    with pytest.raises(ValueError):
        costs.Component("X", -1.0, 0.0, 1)


def test_costs_dict_roundtrip():
    cc = costs.ComponentCosts()
    back = costs.ComponentCosts.from_dict(cc.to_dict())
    led = _attention_ledger()
    assert costs.energy_report(led, back)["total_pj"] == pytest.approx(costs.energy_report(led, cc)["total_pj"])


def test_report_formats():
    rep = costs.energy_report(_attention_ledger())
    rows = list(csv.reader(io.StringIO(costs.report_csv(rep))))
    assert rows[0] == ["component", "energy_pj", "share_pct"] and rows[-1][0] == "total"
    assert json.loads(costs.report_json(rep))["total_pj"] == pytest.approx(rep["total_pj"])


def test_table1_csv():
    text = costs.emit_table1(["identity", "log"], 8)
    rows = {r[0]: r[1:] for r in csv.reader(io.StringIO(text))}
    header = rows["row"]
    assert header == ["identity_binary", "identity_gray", "log_binary", "log_gray"]
    assert int(rows["total"][1]) == 128
    for k in range(8):
        b, g = rows[f"bit_{k}"][0::2], rows[f"bit_{k}"][1::2]
        assert all(int(x) >= int(y) for x, y in zip(b, g))
