import numpy as np
import pytest

from nldpe import faults
from nldpe.acam import eval_unit_codes, program_unit
from nldpe.dtcompile import compile_builtin
from nldpe.faults import FaultMap, FaultMode, mitigation_plan, random_fault_map
from nldpe.noise import (
    G_MAX,
    G_MIN,
    NoiseSpec,
    conductance_to_threshold,
    keyed_normal,
    program_conductance,
    sample_conductance,
    sigma,
    threshold_span,
    threshold_to_conductance,
)


def test_sigma_prog_at_gmax():
    assert NoiseSpec().sigma_prog(G_MAX) == pytest.approx(0.4, rel=1e-9)


def test_sigma_monotone_then_flat():
    g = np.linspace(G_MIN, G_MAX, 5000)
    for params in (NoiseSpec().prog, NoiseSpec().fluct):
        s = sigma(g, params)
        assert np.all(np.diff(s) >= 0)
        assert np.all(s >= 0) and np.all(np.isfinite(s))
        assert np.all(s[g >= params[2]] == s[-1])


def test_scale_zero_is_noise_free():
    nz = NoiseSpec.noiseless()
    g = np.linspace(1, 100, 50)
    assert np.all(nz.sigma_prog(g) == 0)
    assert np.array_equal(sample_conductance(g, nz, (np.arange(50),), 7), g)


def test_read_std_matches_sigma():
    nz = NoiseSpec(seed=5)
    g0 = 40.0
    gp = program_conductance(g0, nz, 0, 0)
    reads = sample_conductance(np.full(10_000, g0), nz, (0, 0), np.arange(10_000))
    assert np.allclose(reads.mean() - gp, 0, atol=5 * nz.sigma_fluct(gp) / 100)
    assert np.std(reads) == pytest.approx(float(np.squeeze(nz.sigma_fluct(gp))), rel=0.05)


def test_write_component_fixed_across_reads():
    nz = NoiseSpec(seed=2, read_scale=0.0)
    a = sample_conductance(50.0, nz, (3, 4), 0)
    b = sample_conductance(50.0, nz, (3, 4), 999)
    assert a == b and a != 50.0


def test_keyed_draws_independent_of_order():
    k = np.arange(1000)
    whole = keyed_normal(9, 1, 4, k)
    rev = keyed_normal(9, 1, 4, k[::-1])[::-1]
    assert np.array_equal(whole, rev)
    assert abs(whole.mean()) < 0.15 and abs(whole.std() - 1) < 0.1


def test_transfer_monotone_and_invertible():
    g = np.geomspace(G_MIN, G_MAX, 1000)
    th = conductance_to_threshold(g)
    assert np.all(np.diff(th) > 0)
    assert np.allclose(threshold_to_conductance(th), g, rtol=1e-9)
    lo, hi = threshold_span()
    assert lo == pytest.approx(th[0]) and hi == pytest.approx(th[-1])


def test_bad_noise_specs():
    with pytest.raises(ValueError):
        NoiseSpec(scale=-1)
    with pytest.raises(ValueError):
        NoiseSpec(prog=(1, 2))
    with pytest.raises(ValueError):
        NoiseSpec(acam_transfer=(0, 0, 0))


def test_fault_map_csv_roundtrip_and_conflicts():
    fm = random_fault_map((3, 8, 4), 0.2, seed=1)
    assert len(fm) > 0
    assert FaultMap.from_csv(fm.to_csv()) == fm
    with pytest.raises(ValueError):
        FaultMap(frozenset({(0, 0, 0, "stuck_low"), (0, 0, 0, "stuck_high")}))
    with pytest.raises(ValueError):
        FaultMap.from_csv("a,b\n1,2\n")


def test_random_fault_rate():
    fm = random_fault_map((4, 64, 64), 0.1, seed=3)
    assert abs(len(fm) / (4 * 64 * 64) - 0.1) < 0.01
    highs = sum(m is FaultMode.STUCK_HIGH for *_, m in fm)
    assert abs(highs / len(fm) - 0.5) < 0.05


def test_empty_map_is_identity():
    u = program_unit(compile_builtin("sigmoid"))
    assert faults.inject_faults(u, FaultMap()) is u
    assert mitigation_plan(u, FaultMap()).is_empty


def test_injection_idempotent():
    u = program_unit(compile_builtin("sigmoid"), capacities="fit")
    fm = FaultMap(frozenset({(0, 10, 0, "stuck_high"), (3, 0, 1, "stuck_low")}))
    once = faults.inject_faults(u, fm)
    twice = faults.inject_faults(once, fm)
    xs = np.linspace(-8, 8, 3001)
    assert np.array_equal(eval_unit_codes(once, xs), eval_unit_codes(twice, xs))
    assert [a.stuck for a in once.arrays] == [a.stuck for a in twice.arrays]


def test_single_fault_remapped_to_spare():
    c = compile_builtin("tanh")
    u = program_unit(c, capacities=(1, 2, 2, 5, 8, 16, 32, 64))
    # bit 6 array: 2 rows, 1 used -> one spare
    fm = FaultMap(frozenset({(6, 0, 1, "stuck_low")}))
    plan = mitigation_plan(u, fm)
    assert plan.arrays[0].remaps == ((0, 1),) and not plan.unrecoverable_bits
    fixed = faults.apply_mitigation(u.with_faults(fm), plan)
    xs = np.linspace(-8, 8, 20001)
    assert not np.array_equal(eval_unit_codes(u.with_faults(fm), xs), eval_unit_codes(u, xs))
    assert np.array_equal(eval_unit_codes(fixed, xs), eval_unit_codes(u, xs))


def test_half_full_array_remaps():
    c = compile_builtin("identity")
    u = program_unit(c, capacities=(1, 1, 2, 4, 8, 16, 64, 64))
    assert u.arrays[1].active_rows == 32 and u.arrays[1].capacity == 64
    plan = mitigation_plan(u, FaultMap(frozenset({(1, 5, 0, "stuck_high")})))
    assert plan.arrays[0].remaps and not plan.unrecoverable_bits


def test_all_rows_faulted_is_unrecoverable():
    u = program_unit(compile_builtin("sigmoid"))
    cap = u.arrays[0].capacity
    fm = FaultMap(frozenset((0, r, 0, "stuck_high") for r in range(cap)))
    plan = mitigation_plan(u, fm)
    assert plan.unrecoverable_bits == [0]
    assert len(plan.arrays[0].frozen) == cap


def test_fault_outside_array_rejected():
    u = program_unit(compile_builtin("sigmoid"))
    with pytest.raises(faults.FaultAddressError):
        u.with_faults(FaultMap(frozenset({(7, 5, 0, "stuck_low")})))
