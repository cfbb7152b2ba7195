"""RRAM crossbar VMM with digital (bit-sliced) and analog (value + residual) weight mapping.

Signed weights use differential planes.  D-SL stores each weight magnitude as
base-``2^slice_bits`` digits, one cell per digit, with levels spaced
uniformly in conductance; column currents are combined by shift-and-add.
A-SL stores the weight as one continuous conductance difference and a
second pair holding ten times the measured programming residual, read back
as ``primary + residual / 10``.

Programming noise is drawn once when an image is programmed; read
fluctuation is drawn per read inside :func:`vmm`.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from nldpe.codes import QuantSpec
from nldpe.faults import FaultAddressError, FaultMap, FaultMode
from nldpe.noise import G_MAX, G_MIN, NoiseSpec, program_conductance, read_conductance

MAX_DIM = 256
RESIDUAL_GAIN = 10.0
_G_SPAN = G_MAX - G_MIN
# first hash key of every crossbar cell, keeps draws apart from ACAM cells
_XBAR_TAG = 0xC805


class ResidualClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VmmResult:
    analog_out: np.ndarray


@dataclass(frozen=True, eq=False)
class CrossbarImage:
    scheme: str                 # "dsl" or "asl"
    target_g: np.ndarray        # (planes, rows, cols) requested conductances
    g: np.ndarray               # achieved conductances after programming
    w_per_level: float          # weight units per D-SL level or per uS for A-SL
    n_slices: int = 1
    slice_bits: int = 8
    xbar_id: int = 0
    stuck: dict = field(default_factory=dict)   # (plane, row, col) -> FaultMode

    @property
    def shape(self) -> tuple[int, int]:
        return self.g.shape[1], self.g.shape[2]

    @property
    def planes(self) -> int:
        return self.g.shape[0]

    # planes: D-SL -> pos slices (LSB first) then neg slices; A-SL -> pos, neg, pos_res, neg_res
    @property
    def pos_g(self) -> np.ndarray:
        return self.g[: self.n_slices] if self.scheme == "dsl" else self.g[0]

    @property
    def neg_g(self) -> np.ndarray:
        return self.g[self.n_slices:] if self.scheme == "dsl" else self.g[1]

    @property
    def residual_g(self) -> Optional[np.ndarray]:
        return self.g[2:4] if self.scheme == "asl" else None

    def effective_weights(self, g: Optional[np.ndarray] = None) -> np.ndarray:
        """Weights the image realizes for conductances ``g`` (default: achieved)."""
        g = self.g if g is None else g
        if self.scheme == "asl":
            dg = (g[..., 0, :, :] - g[..., 1, :, :]) + (g[..., 2, :, :] - g[..., 3, :, :]) / RESIDUAL_GAIN
            return dg * self.w_per_level
        step = _G_SPAN / ((1 << self.slice_bits) - 1)
        s = self.n_slices
        radix = (float(1 << self.slice_bits) ** np.arange(s)).reshape((s, 1, 1))
        pos = ((g[..., :s, :, :] - G_MIN) / step * radix).sum(axis=-3)
        neg = ((g[..., s:, :, :] - G_MIN) / step * radix).sum(axis=-3)
        return (pos - neg) * self.w_per_level

    def with_faults(self, fm: FaultMap) -> "CrossbarImage":
        stuck = dict(self.stuck)
        for (p, r, c), m in fm.sites().items():
            if not (0 <= p < self.planes and 0 <= r < self.shape[0] and 0 <= c < self.shape[1]):
                raise FaultAddressError(f"cell ({p}, {r}, {c}) outside a {self.planes}x{self.shape} image")
            stuck[(p, r, c)] = m
        return replace(self, g=_pin(self.g, stuck), stuck=stuck)

    def to_dict(self) -> dict:
        return {"kind": "crossbar", "scheme": self.scheme, "shape": list(self.shape),
                "w_per_level": self.w_per_level, "n_slices": self.n_slices,
                "slice_bits": self.slice_bits, "xbar_id": self.xbar_id,
                "target_g": self.target_g.tolist(), "g": self.g.tolist(),
                "stuck": [[p, r, c, m.value] for (p, r, c), m in sorted(self.stuck.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "CrossbarImage":
        return cls(d["scheme"], np.array(d["target_g"], dtype=float), np.array(d["g"], dtype=float),
                   float(d["w_per_level"]), int(d["n_slices"]), int(d["slice_bits"]), int(d["xbar_id"]),
                   {(int(p), int(r), int(c)): FaultMode(m) for p, r, c, m in d.get("stuck", [])})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _pin(g: np.ndarray, stuck: dict) -> np.ndarray:
    if not stuck:
        return g
    g = g.copy()
    for (p, r, c), m in stuck.items():
        g[p, r, c] = m.conductance
    return g


def _stuck_of(faults: Optional[FaultMap]) -> dict:
    return {} if faults is None else faults.sites()


def _program(target: np.ndarray, noise: Optional[NoiseSpec], xbar_id: int, stuck: dict,
             plane_offset: int = 0) -> np.ndarray:
    p, r, c = np.meshgrid(np.arange(target.shape[0]) + plane_offset, np.arange(target.shape[1]),
                          np.arange(target.shape[2]), indexing="ij")
    if noise is None:
        g = np.clip(target, G_MIN, G_MAX)
    else:
        g = program_conductance(target, noise, _XBAR_TAG, xbar_id, p, r, c)
    shifted = {(k[0] - plane_offset, k[1], k[2]): m for k, m in stuck.items()
               if plane_offset <= k[0] < plane_offset + target.shape[0]}
    return _pin(g, shifted)


def _check_shape(W: np.ndarray):
    if W.ndim != 2 or W.shape[0] > MAX_DIM or W.shape[1] > MAX_DIM or W.size == 0:
        raise ValueError(f"crossbar weights must be a non-empty matrix up to {MAX_DIM}x{MAX_DIM}, got {W.shape}")


def program_dsl(W, q: QuantSpec, noise: Optional[NoiseSpec] = None, slice_bits: int = 1,
                faults: Optional[FaultMap] = None, xbar_id: int = 0) -> CrossbarImage:
    """Sign-magnitude fixed-point weights, one cell per ``slice_bits`` digit.

    ``q`` gives the weight range and bit width; the magnitude scale is
    ``max(|out_lo|, |out_hi|)`` over ``2^n_bits - 1`` levels.
    """
    W = np.asarray(W, dtype=np.float64)
    _check_shape(W)
    m_max = max(abs(q.out_lo), abs(q.out_hi))
    if np.any(W < q.out_lo - 1e-12 * m_max) or np.any(W > q.out_hi + 1e-12 * m_max):
        raise ValueError(f"weights outside [{q.out_lo}, {q.out_hi}]")
    if not 1 <= slice_bits <= q.n_bits:
        raise ValueError("slice_bits must be in [1, n_bits]")
    levels = (1 << q.n_bits) - 1
    k = np.rint(np.abs(W) * levels / m_max).astype(np.int64)
    n_slices = math.ceil(q.n_bits / slice_bits)
    base = 1 << slice_bits
    step = _G_SPAN / (base - 1)
    digits = np.stack([(k >> (slice_bits * s)) & (base - 1) for s in range(n_slices)])
    pos = np.where(W > 0, digits, 0)
    neg = np.where(W < 0, digits, 0)
    target = G_MIN + np.concatenate([pos, neg]).astype(np.float64) * step
    stuck = _stuck_of(faults)
    g = _program(target, noise, xbar_id, stuck)
    return CrossbarImage("dsl", target, g, m_max / levels, n_slices, slice_bits, xbar_id, stuck)


def program_asl(W, noise: Optional[NoiseSpec] = None, w_max: Optional[float] = None,
                faults: Optional[FaultMap] = None, xbar_id: int = 0) -> CrossbarImage:
    """Continuous differential weights plus a 10x residual-correction pair.

    ``w_max`` maps to the full conductance span (default ``max|W|``).  Stuck
    cells are known before programming; the partner cell of a stuck one is
    retargeted so the pair difference still lands on the weight.
    """
    W = np.asarray(W, dtype=np.float64)
    _check_shape(W)
    if w_max is None:
        w_max = float(np.max(np.abs(W))) or 1.0
    if np.any(np.abs(W) > w_max * (1 + 1e-12)):
        raise ValueError("weights exceed w_max")
    w_per_g = w_max / _G_SPAN
    dg = W / w_per_g
    stuck = _stuck_of(faults)
    pin = np.full((4,) + W.shape, np.nan)
    for (p, r, c), m in stuck.items():
        if p < 4:
            pin[p, r, c] = m.conductance

    t_pos = G_MIN + np.maximum(dg, 0.0)
    t_neg = G_MIN + np.maximum(-dg, 0.0)
    t_pos = np.where(np.isnan(pin[1]), t_pos, np.clip(pin[1] + dg, G_MIN, G_MAX))
    t_neg = np.where(np.isnan(pin[0]), t_neg, np.clip(pin[0] - dg, G_MIN, G_MAX))
    primary_t = np.stack([t_pos, t_neg])
    primary = _program(primary_t, noise, xbar_id, stuck, 0)

    eps = dg - (primary[0] - primary[1])
    d = RESIDUAL_GAIN * eps
    r_pos = G_MIN + np.maximum(d, 0.0)
    r_neg = G_MIN + np.maximum(-d, 0.0)
    r_pos = np.where(np.isnan(pin[3]), r_pos, pin[3] + d)
    r_neg = np.where(np.isnan(pin[2]), r_neg, pin[2] - d)
    res_t = np.stack([r_pos, r_neg])
    over = (res_t > G_MAX) | (res_t < G_MIN)
    if np.any(over & np.isnan(pin[2:4])):
        warnings.warn(f"{int(over.sum())} residual cells clamped to the conductance range",
                      ResidualClampWarning, stacklevel=2)
    res_t = np.clip(res_t, G_MIN, G_MAX)
    residual = _program(res_t, noise, xbar_id, stuck, 2)
    target = np.concatenate([primary_t, res_t])
    g = np.concatenate([primary, residual])
    return CrossbarImage("asl", target, g, w_per_g, 1, 0, xbar_id, stuck)


def identity_image(n: int, scheme: str = "asl") -> CrossbarImage:
    """Identity crossbar for ACAM-only cores."""
    eye = np.eye(n)
    if scheme == "asl":
        return program_asl(eye, None, 1.0)
    return program_dsl(eye, QuantSpec(0.0, 1.0, -1.0, 1.0, 8), None, 1)


def read_weights(img: CrossbarImage, noise: Optional[NoiseSpec], read_index) -> np.ndarray:
    """Effective weights seen by reads ``read_index`` (scalar or 1-D array)."""
    if noise is None or noise.is_noiseless or noise.read_scale == 0:
        return img.effective_weights()
    ri = np.asarray(read_index, dtype=np.int64)
    p, r, c = np.meshgrid(np.arange(img.planes), np.arange(img.shape[0]), np.arange(img.shape[1]),
                          indexing="ij")
    g = read_conductance(img.g, noise, ri.reshape(ri.shape + (1, 1, 1)), _XBAR_TAG, img.xbar_id, p, r, c)
    if img.stuck:
        idx = tuple(np.array(k) for k in zip(*img.stuck))
        g[(Ellipsis,) + idx] = img.g[idx]
    return img.effective_weights(g)


def vmm(img: CrossbarImage, x, noise: Optional[NoiseSpec] = None, reads: int = 1,
        read_offset: int = 0, ledger=None) -> VmmResult:
    """Column outputs ``x @ W_eff`` averaged over ``reads`` noisy reads.

    ``x`` may be one input vector or a batch (N, rows); batch row ``n`` read
    ``k`` uses read index ``read_offset + n * reads + k``.
    """
    x = np.asarray(x, dtype=np.float64)
    rows, cols = img.shape
    if x.shape[-1] != rows:
        raise ValueError(f"input length {x.shape[-1]} does not match {rows} crossbar rows")
    if reads < 1:
        raise ValueError("reads must be >= 1")
    batch = x.reshape(-1, rows)
    n = batch.shape[0]
    noisy = noise is not None and not noise.is_noiseless and noise.read_scale > 0
    if not noisy:
        out = batch @ img.effective_weights()
    else:
        out = np.empty((n, cols))
        per = max(1, 64 // reads)
        for s in range(0, n, per):
            e = min(n, s + per)
            idx = read_offset + np.arange(s * reads, e * reads)
            w = read_weights(img, noise, idx).reshape(e - s, reads, rows, cols)
            out[s:e] = np.einsum("nr,nkrc->nc", batch[s:e], w) / reads
    if ledger is not None:
        ledger.add("crossbar_column_read", n * reads * cols * img.planes)
        ledger.add("dac_conversion", n * rows)
    return VmmResult(out.reshape(x.shape[:-1] + (cols,)))
