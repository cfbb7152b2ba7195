import warnings

import numpy as np
import pytest

from nldpe.codes import QuantSpec
from nldpe.crossbar import (
    RESIDUAL_GAIN,
    CrossbarImage,
    ResidualClampWarning,
    identity_image,
    program_asl,
    program_dsl,
    vmm,
)
from nldpe.faults import FaultMap, random_fault_map
from nldpe.noise import G_MAX, G_MIN, NoiseSpec

QW = QuantSpec(0.0, 1.0, -1.0, 1.0, 8)
STEP = 1.0 / 255


def _rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


def test_zero_matrix_cells_at_gmin():
    img = program_dsl(np.zeros((4, 4)), QW)
    assert np.all(img.g == G_MIN)
    noisy = program_dsl(np.zeros((4, 4)), QW, NoiseSpec(seed=1))
    assert np.all(noisy.g >= G_MIN) and np.any(noisy.g > G_MIN)


def test_single_weight_roundtrip_and_slices():
    for w in (0.0, 0.5, -0.3, 1.0, -1.0, 0.123):
        img = program_dsl(np.array([[w]]), QW)
        k = int(np.rint(abs(w) * 255))
        assert img.effective_weights()[0, 0] == pytest.approx(np.sign(w) * k * STEP, abs=1e-12)
        digits = (img.target_g[:8, 0, 0] + img.target_g[8:, 0, 0] - 2 * G_MIN) / (G_MAX - G_MIN)
        assert int(round(sum(int(round(d)) << i for i, d in enumerate(digits)))) == k


def test_multi_bit_slices_reconstruct():
    W = _rand((8, 8), 4)
    for sb in (1, 2, 4, 8):
        img = program_dsl(W, QW, slice_bits=sb)
        assert np.allclose(img.effective_weights(), np.rint(np.abs(W) * 255) * np.sign(W) * STEP, atol=1e-9)


def test_asl_noise_free_residual_idle():
    W = _rand((6, 5))
    img = program_asl(W, None, 1.0)
    assert np.all(img.residual_g == G_MIN)
    assert np.allclose(img.effective_weights(), W, atol=1e-12)


def test_asl_residual_beats_primary_only():
    W = _rand((32, 32), 2)
    errs_full, errs_primary = [], []
    for s in range(30):
        img = program_asl(W, NoiseSpec(seed=s, read_scale=0.0), 1.0)
        primary = (img.g[0] - img.g[1]) * img.w_per_level
        errs_full.append(np.abs(img.effective_weights() - W).mean())
        errs_primary.append(np.abs(primary - W).mean())
    assert np.mean(errs_full) < np.mean(errs_primary)
    assert all(f < p for f, p in zip(errs_full, errs_primary))


def test_asl_clamp_warns():
    W = np.array([[0.5]])
    fm = FaultMap(frozenset({(0, 0, 0, "stuck_high"), (1, 0, 0, "stuck_low")}))
    with pytest.warns(ResidualClampWarning):
        program_asl(W, None, 1.0, faults=fm)


def test_identity_image_passes_input():
    x = _rand((3, 16), 5)
    for scheme in ("asl", "dsl"):
        assert np.allclose(vmm(identity_image(16, scheme), x).analog_out, x, atol=1e-12)


def test_random_matmul_within_quantization():
    W, x = _rand((8, 8), 6), _rand((10, 8), 7)
    out = vmm(program_dsl(W, QW), x).analog_out
    assert np.max(np.abs(out - x @ W)) <= 8 * STEP / 2 + 1e-12
    assert np.allclose(vmm(program_asl(W, None, 1.0), x).analog_out, x @ W, atol=1e-12)


def test_zero_input_zero_output_under_noise():
    img = program_asl(_rand((8, 8)), NoiseSpec(seed=3), 1.0)
    assert np.all(vmm(img, np.zeros(8), NoiseSpec(seed=3), reads=4).analog_out == 0)


def test_linearity_noise_free():
    img = program_dsl(_rand((16, 12), 8), QW)
    a, b = _rand(16, 9), _rand(16, 10)
    assert np.allclose(vmm(img, a + b).analog_out, vmm(img, a).analog_out + vmm(img, b).analog_out, atol=1e-12)


def test_dsl_asl_agree_within_step():
    W, x = _rand((16, 16), 11), np.abs(_rand((4, 16), 12))
    d = vmm(program_dsl(W, QW), x).analog_out
    a = vmm(program_asl(W, None, 1.0), x).analog_out
    assert np.max(np.abs(d - a)) <= 16 * STEP / 2 + 1e-12


def test_reads_average_lowers_error():
    W, x = _rand((32, 8), 13), _rand((50, 32), 14)
    nz = NoiseSpec(seed=4, read_scale=5.0)
    img = program_asl(W, nz, 1.0)
    clean = x @ img.effective_weights()
    e1 = np.mean((vmm(img, x, nz, reads=1).analog_out - clean) ** 2)
    e16 = np.mean((vmm(img, x, nz, reads=16).analog_out - clean) ** 2)
    assert e16 < e1 / 4


def test_vmm_batch_equals_rows():
    img = program_asl(_rand((8, 4)), NoiseSpec(seed=1), 1.0)
    x = _rand((5, 8), 2)
    nz = NoiseSpec(seed=1)
    whole = vmm(img, x, nz).analog_out
    rows = np.stack([vmm(img, x[i], nz, read_offset=i).analog_out for i in range(5)])
    assert np.array_equal(whole, rows)


def test_faults_pin_and_serialize():
    W = _rand((8, 8))
    fm = random_fault_map((4, 8, 8), 0.2, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResidualClampWarning)
        img = program_asl(W, NoiseSpec(seed=2), 1.0, faults=fm)
    for (p, r, c), m in fm.sites().items():
        assert img.g[p, r, c] == m.conductance
    again = img.with_faults(fm)
    assert np.array_equal(again.g, img.g)
    back = CrossbarImage.from_dict(img.to_dict())
    assert np.array_equal(back.effective_weights(), img.effective_weights())


def test_asl_partner_compensates_stuck_cells():
    # positive weight with its negative cell stuck low: nothing to compensate
    fm = FaultMap(frozenset({(1, 0, 0, "stuck_low")}))
    assert program_asl(np.array([[0.4]]), None, 1.0, faults=fm).effective_weights()[0, 0] == pytest.approx(0.4)
    # positive cell stuck high: the negative cell is raised to keep the difference
    fm = FaultMap(frozenset({(0, 0, 0, "stuck_high")}))
    assert program_asl(np.array([[0.4]]), None, 1.0, faults=fm).effective_weights()[0, 0] == pytest.approx(0.4)
    # a negative weight cannot be reached; the residual pair recovers a tenth of the span
    with pytest.warns(ResidualClampWarning):
        w = program_asl(np.array([[-0.4]]), None, 1.0, faults=fm).effective_weights()[0, 0]
    assert w == pytest.approx(-0.1)


def test_shape_and_range_errors():
    with pytest.raises(ValueError):
        program_dsl(np.ones((2, 2)) * 2, QW)
    with pytest.raises(ValueError):
        program_asl(np.ones((300, 2)))
    with pytest.raises(ValueError):
        vmm(program_asl(np.ones((3, 2))), np.ones(4))
    assert RESIDUAL_GAIN == 10.0
