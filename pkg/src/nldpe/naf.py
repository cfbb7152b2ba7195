"""Noise-aware fine-tuning through a differentiable relaxation of the ACAM.

Per bit ``i`` and stored row ``r`` the relaxation computes

    m_i = sum_r ReLU(x - wL_r) * ReLU(wH_r - x) / W_r^2,   q_i = m_i / (m_i + eps)

where ``wL``/``wH`` are thresholds taken through the conductance map, the
device noise and back, and ``W_r`` is the row's nominal width (held constant
in the backward pass).  Normalizing by ``W_r^2`` makes the soft transition
``eps * W_r`` wide on every row; with one absolute eps the wide tail rows get
transitions so thin that a single sample in them throws the bound across the
domain.  A wildcard side is replaced by the mirror image of the trained side
about the domain edge.  Gray bits decode as ``b_i = (q_i - b_{i+1})^2`` and
``y = sum_i b_i 2^i``.  Gradients are derived by hand; noise samples are
constants in the backward pass.

The device model is per-chip: programming error is a fixed draw per cell
(keyed exactly like the hardware simulator), read fluctuation is fresh on
every evaluation.  Fine-tuning therefore learns to pre-compensate the
write error of the cells it will be deployed on.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from nldpe.acam import AcamArray, AcamUnit, g_to_x, x_to_g
from nldpe.codes import Encoding, QuantSpec
from nldpe.crossbar import program_asl, read_weights
from nldpe.dtcompile import CompiledFunction
from nldpe.faults import FaultMap
from nldpe.noise import (
    G_MAX,
    G_MIN,
    STREAM_MISC,
    NoiseSpec,
    keyed_uniform,
    program_conductance,
    read_conductance,
)

DEFAULT_EPSILON = 1e-12
DEFAULT_STEP = 0.05         # in transition widths per unit-slope gradient
_TRAIN_READS = 1 << 40     # training read indices never collide with evaluation searches


class DivergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NafConfig:
    epochs: int = 10
    batch: int = 25
    step_size: Optional[float] = None   # None: per-task default
    lambda1: float = 0.0
    lambda2: float = 0.0
    samples_per_dt: int = 5000
    decay: float = 0.7                  # per-epoch step multiplier
    max_move: float = 1.0               # per-step cap on a bound's move, in transition widths
    eps_scale: float = 0.05             # final training eps (transition width ~ eps * row width)
    eps_start: Optional[float] = None   # first-epoch eps, annealed geometrically to eps_scale
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambdas must be non-negative")
        if self.batch < 1 or self.samples_per_dt < 1:
            raise ValueError("batch and samples_per_dt must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "NafConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True, eq=False)
class SoftAcamParams:
    """Trainable thresholds of one bit array, in input units measured from ``x_lo``."""
    bit_index: int
    w_lo: np.ndarray        # (R,)
    w_hi: np.ndarray
    rows: np.ndarray        # physical row of each entry (noise keys, faults)
    lo_open: np.ndarray     # bool: wildcard side, not trainable
    hi_open: np.ndarray
    frozen_lo: np.ndarray   # bool: stuck device, not trainable
    frozen_hi: np.ndarray
    pin_lo: np.ndarray      # conductance of stuck devices (nan otherwise)
    pin_hi: np.ndarray
    x_lo: float
    span: float
    transfer: tuple
    unit_id: int = 0
    epsilon: float = DEFAULT_EPSILON
    g_min: float = G_MIN
    g_max: float = G_MAX

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def g_ratio(self) -> float:
        return (self.g_max - self.g_min) / self.span

    @property
    def n_rows(self) -> int:
        return self.w_lo.shape[0]

    def with_(self, **kw) -> "SoftAcamParams":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class SoftUnitParams:
    qspec: QuantSpec
    bits: tuple             # SoftAcamParams per bit, LSB first

    def with_epsilon(self, eps: float) -> "SoftUnitParams":
        return replace(self, bits=tuple(b.with_(epsilon=eps) for b in self.bits))


@dataclass(frozen=True)
class FrozenNoise:
    """Fixed conductance offsets per bit: {bit: (d_lo, d_hi)} with shapes (R,) or (N, R)."""
    offsets: dict


# -- parameter extraction ------------------------------------------------------------

def soft_params_from_array(arr: AcamArray, unit_id: int = 0, epsilon: float = DEFAULT_EPSILON) -> SoftAcamParams:
    if arr.n_features != 1:
        raise ValueError("soft relaxation covers single-feature arrays")
    rows = np.nonzero(arr.enabled)[0]
    lo, hi = arr.stored_thresholds()
    span = arr.x_hi - arr.x_lo
    pin_lo = np.full(rows.size, np.nan)
    pin_hi = np.full(rows.size, np.nan)
    for k, r in enumerate(rows):
        for side, pin in ((0, pin_lo), (1, pin_hi)):
            m = arr.stuck.get((int(r), side))
            if m is not None:
                pin[k] = m.conductance
    lo_open = arr.lo_wild[rows, 0] & np.isnan(pin_lo)
    hi_open = arr.hi_wild[rows, 0] & np.isnan(pin_hi)
    w_lo = np.where(lo_open, -span, lo[rows, 0] - arr.x_lo)
    w_hi = np.where(hi_open, 2 * span, hi[rows, 0] - arr.x_lo)
    return SoftAcamParams(arr.bit_index, w_lo, w_hi, rows, lo_open, hi_open,
                          ~np.isnan(pin_lo), ~np.isnan(pin_hi), pin_lo, pin_hi,
                          arr.x_lo, span, arr.transfer, unit_id, epsilon)


def soft_params_from_unit(u: AcamUnit, epsilon: float = DEFAULT_EPSILON) -> SoftUnitParams:
    return SoftUnitParams(u.qspec, tuple(soft_params_from_array(a, u.unit_id, epsilon) for a in u.arrays))


def params_to_array(p: SoftAcamParams, template: AcamArray, harden: bool = True) -> AcamArray:
    """Write thresholds back into an array image.

    With ``harden`` the relaxed bounds are mapped to the hard comparator
    bounds they stand for (see ``soft_offsets``).
    """
    w_lo, w_hi = _to_hard(p) if harden else (p.w_lo, p.w_hi)
    lo_x = np.array(template.stored_thresholds()[0][:, 0])
    hi_x = np.array(template.stored_thresholds()[1][:, 0])
    lo_x[p.rows] = np.where(p.lo_open, lo_x[p.rows], p.x_lo + w_lo)
    hi_x[p.rows] = np.where(p.hi_open, hi_x[p.rows], p.x_lo + w_hi)
    lo_x = np.where(np.isfinite(lo_x), lo_x, template.x_lo)
    hi_x = np.where(np.isfinite(hi_x), hi_x, template.x_hi)
    return template.with_thresholds(lo_x[:, None], hi_x[:, None])


@functools.lru_cache(maxsize=64)
def soft_offsets(eps: float) -> tuple:
    """Where the relaxed loss settles for an exactly representable target.

    A closed target row [0, 1] is stationary at [-c, 1 + c]; a row open below
    whose bound lies 1 from the domain edge is stationary at h.  Both are
    scale free because matches are width normalized, so one quadrature per
    eps serves every row.
    """
    if eps < 1e-6:
        return (1.0 - math.sqrt(1.0 - 4.0 * eps)) / 2.0, 1.0 / (1.0 - 2.0 * eps)
    from scipy.optimize import brentq

    def closed(c):
        w = 1.0 + 2.0 * c
        x = np.linspace(-c, 1.0 + c, 200_001)
        ra, rb = x + c, 1.0 + c - x
        n = ra * rb / w ** 2
        t = (x >= 0.0) & (x <= 1.0)
        return np.mean((n / (n + eps) - t) * rb / (n + eps) ** 2)

    def open_(h):
        x = np.linspace(0.0, h, 200_001)
        ra, rb = x + h, h - x
        n = ra * rb / (2.0 * h) ** 2
        return np.mean((n / (n + eps) - (x <= 1.0)) * ra / (n + eps) ** 2)

    try:
        return brentq(closed, 0.0, 5.0, xtol=1e-12), brentq(open_, 1.0, 20.0, xtol=1e-12)
    except ValueError as e:
        raise ValueError(f"relaxation epsilon {eps} too large for a stationary point") from e


def _to_soft(p: SoftAcamParams, lo: np.ndarray, hi: np.ndarray):
    c, h = soft_offsets(p.epsilon)
    tl = ~(p.lo_open | p.frozen_lo)
    th = ~(p.hi_open | p.frozen_hi)
    wt = hi - lo
    s_lo = np.where(tl, lo - c * wt, lo)
    s_hi = np.where(th, hi + c * wt, hi)
    s_hi = np.where(p.lo_open & th, h * hi, s_hi)
    s_lo = np.where(p.hi_open & tl, p.span - h * (p.span - lo), s_lo)
    return s_lo, s_hi


def _to_hard(p: SoftAcamParams):
    c, h = soft_offsets(p.epsilon)
    tl = ~(p.lo_open | p.frozen_lo)
    th = ~(p.hi_open | p.frozen_hi)
    wt = (p.w_hi - p.w_lo) / (1.0 + c * (tl.astype(float) + th))
    lo = np.where(tl, p.w_lo + c * wt, p.w_lo)
    hi = np.where(th, p.w_hi - c * wt, p.w_hi)
    hi = np.where(p.lo_open & th, p.w_hi / h, hi)
    lo = np.where(p.hi_open & tl, p.span - (p.span - p.w_lo) / h, lo)
    return lo, hi


def _row_width(p: SoftAcamParams) -> np.ndarray:
    w = np.where(p.lo_open, 2.0 * p.w_hi, np.where(p.hi_open, 2.0 * (p.span - p.w_lo), p.w_hi - p.w_lo))
    w = np.where(p.lo_open & p.hi_open, 3.0 * p.span, w)
    return np.maximum(w, 1e-12 * p.span)


# -- forward pieces ---------------------------------------------------------------------

def _side(p: SoftAcamParams, w: np.ndarray, side: int, noise, read_idx, offsets):
    """Noisy unmapped thresholds and their derivative wrt ``w``.

    Returns arrays shaped (R,) or (N, R) when per-read noise applies.
    """
    open_ = p.lo_open if side == 0 else p.hi_open
    frozen = p.frozen_lo if side == 0 else p.frozen_hi
    pin = p.pin_lo if side == 0 else p.pin_hi
    g_lin = w * p.g_ratio + p.g_min
    inside = (g_lin > p.g_min) & (g_lin < p.g_max)
    x_t = (np.clip(g_lin, p.g_min, p.g_max) - p.g_min) / p.g_ratio
    x_hi = p.x_lo + p.span
    g_t = x_to_g(p.x_lo + x_t, p.x_lo, x_hi, p.transfer)
    g_t = np.where(frozen, pin, g_t)
    if offsets is not None:
        g_n = np.clip(g_t + offsets, G_MIN, G_MAX)
    elif noise is None or noise.is_noiseless:
        g_n = g_t
    else:
        dev = side
        g_n = program_conductance(g_t, noise, p.unit_id, p.bit_index, p.rows, dev)
        g_n = np.where(frozen, pin, g_n)
        if read_idx is not None and noise.read_scale > 0:
            g_n = read_conductance(g_n, noise, read_idx[:, None], p.unit_id, p.bit_index, p.rows[None, :], dev)
    g_n = np.where(frozen, pin, g_n)
    x_n = g_to_x(g_n, p.x_lo, x_hi, p.transfer) - p.x_lo
    a = p.transfer[0]
    interior = (g_n > G_MIN) & (g_n < G_MAX)
    dx = np.where(interior, (g_n / g_t) ** (a - 1.0), 0.0) * inside
    dx = np.where(open_ | frozen, 0.0, dx)
    x_n = np.where(open_, w, x_n)
    return x_n, dx


def _bit_forward(p: SoftAcamParams, xw: np.ndarray, noise, read_idx, offsets):
    """Squashed match q (N,) plus intermediates for the backward pass."""
    off_lo = off_hi = None
    if offsets is not None:
        off_lo, off_hi = offsets.offsets[p.bit_index]
    lo, dlo = _side(p, p.w_lo, 0, noise, read_idx, off_lo)
    hi, dhi = _side(p, p.w_hi, 1, noise, read_idx, off_hi)
    both = p.lo_open & p.hi_open
    lo = np.where(both, -p.span, np.where(p.lo_open, -hi, lo))
    hi = np.where(both, 2.0 * p.span, np.where(p.hi_open, 2.0 * p.span - lo, hi))
    inv_w2 = _row_width(p) ** -2.0
    a = xw[:, None] - lo
    b = hi - xw[:, None]
    ra, rb = np.maximum(a, 0.0), np.maximum(b, 0.0)
    m = (ra * rb * inv_w2).sum(axis=1) if p.n_rows else np.zeros(xw.shape)
    q = m / (m + p.epsilon)
    return q, (m, a, b, dlo, dhi, inv_w2)


def _bit_backward(p: SoftAcamParams, gq: np.ndarray, cache, revive: bool = False, exact: bool = False):
    """Per-sample gradient of a scalar wrt (w_lo, w_hi) given dL/dq (N,).

    Training treats the row width and the mirrored side of a wildcard row as
    constants, which keeps the step for a bound independent of its partner.
    ``exact`` differentiates through both instead.

    Noise can push a narrow row's bounds past each other or off its target;
    the ReLU product is then zero where the row should match and so is its
    gradient.  With ``revive`` (training only) the backward pass treats an
    input between crossed bounds, or within a quarter row width outside a bound,
    as inside the row, so a wanted match pulls the bound toward it.
    """
    m, a, b, dlo, dhi, inv_w2 = cache
    gm = (gq * p.epsilon / (m + p.epsilon) ** 2)[:, None] * inv_w2
    pa, pb = a > 0, b > 0
    da, db = np.maximum(a, 0.0), np.maximum(b, 0.0)
    if exact:
        width = inv_w2 ** -0.5
        floor = width <= 1e-12 * p.span
        d_width = -2.0 * da * db / width * ~floor
        lo_only = p.lo_open & ~p.hi_open
        hi_only = p.hi_open & ~p.lo_open
        # d(lo_eff)/dw_lo etc. per row; open sides read back as constants
        g_lo = -(pa * db * dlo) - hi_only * da * pb * dlo + d_width * np.where(hi_only, -2.0, -1.0)
        g_hi = da * pb * dhi + lo_only * pa * db * dhi + d_width * np.where(lo_only, 2.0, 1.0)
        g_lo = np.where(p.lo_open | p.frozen_lo, 0.0, gm * g_lo)
        g_hi = np.where(p.hi_open | p.frozen_hi, 0.0, gm * g_hi)
        return g_lo, g_hi
    if revive:
        band = 0.25 * np.sqrt(inv_w2) ** -1.0
        crossed = (a < 0) & (b < 0)
        near_lo = (a <= 0) & (a > -band) & pb
        near_hi = (b <= 0) & (b > -band) & pa
        pa, pb = pa | crossed | near_lo, pb | crossed | near_hi
        da, db = np.where(crossed, -a, da), np.where(crossed, -b, db)
    g_lo = -(gm * pa * db) * dlo
    g_hi = (gm * da * pb) * dhi
    return g_lo, g_hi


def _read_indices(n: int, read_offset: int, noise) -> Optional[np.ndarray]:
    if noise is None or isinstance(noise, FrozenNoise) or noise.is_noiseless or noise.read_scale == 0:
        return None
    return np.arange(read_offset, read_offset + n, dtype=np.int64)


def _split_noise(noise):
    if isinstance(noise, FrozenNoise):
        return None, noise
    return noise, None


def soft_bits(p: SoftUnitParams, x, noise=None, read_offset: int = 0) -> np.ndarray:
    """Squashed per-bit matches q_i, shape (N, n_bits), LSB first."""
    q = p.qspec
    xw = np.clip(np.atleast_1d(np.asarray(x, dtype=np.float64)), q.in_lo, q.in_hi) - q.in_lo
    ns, off = _split_noise(noise)
    ridx = _read_indices(xw.size, read_offset, noise)
    return np.stack([_bit_forward(b, xw, ns, ridx, off)[0] for b in p.bits], axis=1)


def _decode(qs: np.ndarray, encoding: Encoding):
    n = qs.shape[1]
    bs = np.empty_like(qs)
    if encoding is Encoding.GRAY:
        bs[:, n - 1] = qs[:, n - 1]
        for i in range(n - 2, -1, -1):
            bs[:, i] = (qs[:, i] - bs[:, i + 1]) ** 2
    else:
        bs[:] = qs
    return bs


def soft_forward(p: SoftUnitParams, x, noise=None, read_offset: int = 0):
    """Relaxed unit output in level units (float for scalar x, array otherwise)."""
    qs = soft_bits(p, x, noise, read_offset)
    y = _decode(qs, p.qspec.encoding) @ (2.0 ** np.arange(qs.shape[1]))
    return float(y[0]) if np.ndim(x) == 0 else y


def soft_gradient(p: SoftUnitParams, x, target, noise=None, read_offset: int = 0):
    """Gradient of mean (y - target)^2 wrt every bit's (w_lo, w_hi).

    Returns a list of (g_lo, g_hi) per bit (LSB first), averaged over inputs.
    """
    q = p.qspec
    xw = np.clip(np.atleast_1d(np.asarray(x, dtype=np.float64)), q.in_lo, q.in_hi) - q.in_lo
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), xw.shape)
    ns, off = _split_noise(noise)
    ridx = _read_indices(xw.size, read_offset, noise)
    outs = [_bit_forward(b, xw, ns, ridx, off) for b in p.bits]
    qs = np.stack([o[0] for o in outs], axis=1)
    n = qs.shape[1]
    bs = _decode(qs, q.encoding)
    y = bs @ (2.0 ** np.arange(n))
    gy = 2.0 * (y - t)
    gq = np.empty_like(qs)
    if q.encoding is Encoding.GRAY:
        gb = gy[:, None] * (2.0 ** np.arange(n))[None, :]
        # b_i depends on q_i and b_{i+1}; sweep LSB -> MSB accumulating into b_{i+1}
        for i in range(n - 1):
            d = 2.0 * (qs[:, i] - bs[:, i + 1])
            gq[:, i] = gb[:, i] * d
            gb[:, i + 1] = gb[:, i + 1] - gb[:, i] * d
        gq[:, n - 1] = gb[:, n - 1]
    else:
        gq = gy[:, None] * (2.0 ** np.arange(n))[None, :]
    grads = []
    for i, (b, o) in enumerate(zip(p.bits, outs)):
        g_lo, g_hi = _bit_backward(b, gq[:, i], o[1], exact=True)
        grads.append((g_lo.mean(axis=0), g_hi.mean(axis=0)))
    return grads


def bit_loss_and_grad(p: SoftAcamParams, xw: np.ndarray, target: np.ndarray, noise=None,
                      read_idx: Optional[np.ndarray] = None, offsets: Optional[FrozenNoise] = None,
                      revive: bool = False):
    """Mean (q - t)^2 of one bit and its gradient wrt (w_lo, w_hi); ``xw`` measured from x_lo."""
    q, cache = _bit_forward(p, xw, noise, read_idx, offsets)
    loss = float(np.mean((q - target) ** 2))
    g_lo, g_hi = _bit_backward(p, 2.0 * (q - target), cache, revive)
    return loss, g_lo.mean(axis=0), g_hi.mean(axis=0)


# -- per-DT fine-tuning ------------------------------------------------------------------

@dataclass
class DtResult:
    params: SoftAcamParams
    array: AcamArray
    losses: list
    diverged: bool = False


def _eps_at(cfg: NafConfig, epoch: int) -> float:
    start = cfg.eps_start if cfg.eps_start is not None else cfg.eps_scale
    if cfg.epochs <= 1:
        return cfg.eps_scale
    return start * (cfg.eps_scale / start) ** (epoch / (cfg.epochs - 1))


def finetune_dt(c: CompiledFunction, bit: int, noise: Optional[NoiseSpec], cfg: NafConfig = NafConfig(),
                array: Optional[AcamArray] = None, unit_id: int = 0) -> DtResult:
    """SGD on one bit's thresholds against the noise-free compiled bit.

    ``array`` is the deployed array for that bit (carrying stuck cells); by
    default it is programmed from ``c`` with the standard capacities.
    """
    from nldpe.acam import program_unit
    if array is None:
        array = program_unit(c, capacities="fit", unit_id=unit_id).arrays[bit]
    q = c.qspec
    target_set = c.bits[bit]
    p = soft_params_from_array(array, unit_id, _eps_at(cfg, 0))
    # start where the relaxed loss settles for the noise-free bounds
    p = p.with_(**dict(zip(("w_lo", "w_hi"), _to_soft(p, p.w_lo, p.w_hi))))
    train_lo = ~(p.lo_open | p.frozen_lo)
    train_hi = ~(p.hi_open | p.frozen_hi)
    base_step = cfg.step_size if cfg.step_size is not None else DEFAULT_STEP
    losses, best, best_loss, rising, diverged = [], p, math.inf, 0, False
    n = cfg.samples_per_dt
    for epoch in range(cfg.epochs):
        eps = _eps_at(cfg, epoch)
        if eps != p.epsilon:
            hard = _to_hard(p)
            p = p.with_(epsilon=eps)
            p = p.with_(**dict(zip(("w_lo", "w_hi"), _to_soft(p, *hard))))
        # per-row step: a unit-slope gradient (1/span per sample) moves a bound
        # by step_size transition widths, so narrow and wide rows converge alike
        delta = soft_offsets(eps)[0] * _row_width(p)
        step = base_step * cfg.decay ** epoch * p.span * delta
        lim = delta * cfg.max_move
        u = keyed_uniform(cfg.seed, STREAM_MISC, 0x7A1, unit_id, bit, epoch, np.arange(n))
        xs = q.in_lo + u * q.span
        t = target_set.contains(xs).astype(np.float64)
        xw = xs - q.in_lo
        total = 0.0
        for s in range(0, n, cfg.batch):
            e = min(n, s + cfg.batch)
            ridx = None
            if noise is not None and not noise.is_noiseless and noise.read_scale > 0:
                base = _TRAIN_READS + (((unit_id * 64 + bit) * 4096 + epoch) << 16)
                ridx = np.arange(base + s, base + e, dtype=np.int64)
            loss, g_lo, g_hi = bit_loss_and_grad(p, xw[s:e], t[s:e], noise, ridx, revive=True)
            total += loss * (e - s)
            p = p.with_(w_lo=p.w_lo - np.clip(step * g_lo, -lim, lim) * train_lo,
                        w_hi=p.w_hi - np.clip(step * g_hi, -lim, lim) * train_hi)
        epoch_loss = total / n
        losses.append(epoch_loss)
        if epoch_loss < best_loss:
            best, best_loss = p, epoch_loss
        rising = rising + 1 if len(losses) > 1 and epoch_loss > losses[-2] else 0
        if rising >= 5:
            diverged = True
            break
    final = best if diverged else p
    return DtResult(final, params_to_array(final, array), losses, diverged)


def finetune_unit(u: AcamUnit, c: CompiledFunction, noise: Optional[NoiseSpec], cfg: NafConfig = NafConfig(),
                  jobs: int = 1):
    """Fine-tune every bit array of a deployed unit independently."""
    def one(i):
        return finetune_dt(c, i, noise, cfg, u.arrays[i], u.unit_id)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, range(u.n_bits)))
    else:
        results = [one(i) for i in range(u.n_bits)]
    return replace(u, arrays=tuple(r.array for r in results)), results


# -- crossbar (A-SL) fine-tuning -------------------------------------------------------

def asl_loss(y, y_hat, W, eps_resid, lambda1: float, lambda2: float) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    W = np.asarray(W, dtype=np.float64)
    e = np.asarray(eps_resid, dtype=np.float64)
    mse = float(np.mean((y - y_hat) ** 2))
    w_inf = float(np.max(np.abs(W))) if W.size else 0.0
    e_inf = float(np.max(np.abs(e))) if e.size else 0.0
    return mse + lambda1 * w_inf + lambda2 * e_inf


@dataclass
class CrossbarResult:
    W: np.ndarray
    losses: list
    diverged: bool = False


def _max_subgrad(A: np.ndarray) -> np.ndarray:
    g = np.zeros_like(A)
    if A.size:
        k = np.unravel_index(np.argmax(np.abs(A)), A.shape)
        g[k] = np.sign(A[k])
    return g


def finetune_crossbar(W, data, noise: Optional[NoiseSpec], cfg: NafConfig = NafConfig(),
                      w_max: Optional[float] = None, faults: Optional[FaultMap] = None,
                      frozen: Optional[np.ndarray] = None, batch: int = 64) -> CrossbarResult:
    """Minibatch SGD on the A-SL loss with a fresh programmed-and-read image per batch.

    ``data`` is ``(X, Y)``; frozen weights (e.g. those on stuck cells) keep
    their values while the rest adapt around what the faulty cells realize.
    """
    X, Y = (np.asarray(a, dtype=np.float64) for a in data)
    W = np.array(W, dtype=np.float64)
    if X.shape[0] != Y.shape[0] or X.shape[1] != W.shape[0] or Y.shape[1] != W.shape[1]:
        raise ValueError("data shapes do not match the weight matrix")
    if w_max is None:
        w_max = 2.0 * (float(np.max(np.abs(W))) or 1.0)
    mask = np.ones_like(W) if frozen is None else (~np.asarray(frozen, dtype=bool)).astype(float)
    n, cols = X.shape[0], W.shape[1]
    if cfg.step_size is not None:
        lr = cfg.step_size
    else:
        lam = float(np.linalg.eigvalsh(X.T @ X / n)[-1])
        lr = 0.5 * cols / max(lam, 1e-12)
    w_per_g = w_max / (G_MAX - G_MIN)
    noisy = noise is not None and not noise.is_noiseless
    losses, diverged, step = [], False, 0
    for epoch in range(cfg.epochs):
        order = np.argsort(keyed_uniform(cfg.seed, STREAM_MISC, 0xC4, epoch, np.arange(n)))
        total, tail, k = 0.0, np.zeros_like(W), 0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            xb, yb = X[idx], Y[idx]
            if noisy or faults is not None:
                ns = noise.with_(seed=(noise.seed * 1_000_003 + step) & 0xFFFFFFFF) if noisy else None
                img = program_asl(np.clip(W, -w_max, w_max), ns, w_max, faults)
                w_nom = img.effective_weights()
                # one fresh read per sample, as a deployed crossbar sees
                w_eff = read_weights(img, ns, np.arange(len(idx))) if noisy else w_nom
                primary = (img.g[0] - img.g[1]) * w_per_g
                eps = np.clip(W, -w_max, w_max) - primary
            else:
                w_eff = np.clip(W, -w_max, w_max)
                eps = np.zeros_like(W)
            step += 1
            y_hat = xb @ w_eff if w_eff.ndim == 2 else np.einsum("br,brc->bc", xb, w_eff)
            r = y_hat - yb
            loss = asl_loss(yb, y_hat, W, eps, cfg.lambda1, cfg.lambda2)
            total += loss * len(idx)
            outer = xb[:, :, None] * r[:, None, :]
            if w_eff.ndim == 3:
                # read deviation scales with sigma(G) of the active cell: d delta/dW = delta * dlog(sigma)/dG * dG/dW
                g = G_MIN + np.abs(W) / w_per_g
                a, _, c = noise.fluct
                dlog = np.where(g < c, a / g, 0.0)
                outer = outer * (1.0 + (w_eff - w_nom) * dlog * np.sign(W) / w_per_g)
            grad = 2.0 * outer.sum(axis=0) / r.size
            if cfg.lambda1:
                grad += cfg.lambda1 * _max_subgrad(W)
            if cfg.lambda2 and noisy:
                # eps ~ sigma_prog(G) * N; d eps / dW through the sigma slope of the active cell
                g = G_MIN + np.abs(W) / w_per_g
                a, _, c = noise.prog
                dlog = np.where(g < c, a / g, 0.0)
                grad += cfg.lambda2 * np.abs(_max_subgrad(eps)) * np.abs(eps) * dlog * np.sign(W) / w_per_g
            W = W - lr * cfg.decay ** epoch * grad * mask
            tail, k = tail + W, k + 1
        losses.append(total / n)
        if len(losses) > 5 and all(losses[-k] > losses[-k - 1] for k in range(1, 6)):
            diverged = True
            break
    if noisy and not diverged:
        # average of the last epoch's iterates cancels most of the read-noise random walk
        W = tail / k
    return CrossbarResult(W, losses, diverged)
