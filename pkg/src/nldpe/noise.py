"""RRAM conductance noise, the ACAM conductance-to-threshold transfer, and keyed sampling.

Conductances are in microsiemens.  Standard deviations follow a clipped
power law ``sigma(G) = exp(a * log(clip(G, 0, c)) + b)``; programming noise is
drawn once per cell, read fluctuation once per (cell, read).  All draws come
from a counter-based hash keyed by ``(seed, stream, *site, read)`` so results
never depend on evaluation order or parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

G_MIN = 0.01   # 100 MOhm
G_MAX = 150.0  # 6.7 kOhm
_TINY_G = np.finfo(np.float64).tiny

# Synthetic defaults: sigma_prog saturates at 0.4 uS from 100 uS upward,
# sigma_fluct at 0.02 uS from 50 uS upward; the transfer maps [G_MIN, G_MAX]
# onto roughly [4.6e-4, 1.0] normalized data-line volts.
DEFAULT_PROG = (0.5, math.log(0.04), 100.0)
DEFAULT_FLUCT = (0.5, math.log(0.02 / math.sqrt(50.0)), 50.0)
DEFAULT_TRANSFER = (0.8, -0.8 * math.log(G_MAX), 0.0)

STREAM_PROG = 1
STREAM_READ = 2
STREAM_MISC = 3


@dataclass(frozen=True)
class NoiseSpec:
    prog: tuple = DEFAULT_PROG
    fluct: tuple = DEFAULT_FLUCT
    acam_transfer: tuple = DEFAULT_TRANSFER
    seed: int = 0
    scale: float = 1.0
    # extra multiplier on read fluctuation only (inference-time noise)
    read_scale: float = 1.0

    def __post_init__(self):
        for name in ("prog", "fluct", "acam_transfer"):
            v = tuple(float(t) for t in getattr(self, name))
            if len(v) != 3 or not all(math.isfinite(t) for t in v):
                raise ValueError(f"{name} must be three finite reals, got {v}")
            object.__setattr__(self, name, v)
        if self.prog[2] <= 0 or self.fluct[2] <= 0:
            raise ValueError("clip points c_prog and c_fluct must be positive")
        if self.scale < 0 or self.read_scale < 0:
            raise ValueError("noise scales must be non-negative")
        if self.acam_transfer[0] <= 0:
            raise ValueError("transfer exponent a_ACAM must be positive")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @classmethod
    def noiseless(cls, **kw) -> "NoiseSpec":
        return cls(scale=0.0, **kw)

    @property
    def is_noiseless(self) -> bool:
        return self.scale == 0.0

    def with_(self, **kw) -> "NoiseSpec":
        return replace(self, **kw)

    def sigma_prog(self, g):
        return self.scale * sigma(g, self.prog)

    def sigma_fluct(self, g):
        return self.scale * self.read_scale * sigma(g, self.fluct)

    def to_dict(self) -> dict:
        return {"prog": list(self.prog), "fluct": list(self.fluct),
                "acam_transfer": list(self.acam_transfer), "seed": self.seed,
                "scale": self.scale, "read_scale": self.read_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(tuple(d.get("prog", DEFAULT_PROG)), tuple(d.get("fluct", DEFAULT_FLUCT)),
                   tuple(d.get("acam_transfer", DEFAULT_TRANSFER)), int(d.get("seed", 0)),
                   float(d.get("scale", 1.0)), float(d.get("read_scale", 1.0)))


def sigma(g, params) -> np.ndarray:
    """Noise standard deviation at conductance ``g`` for fitted ``(a, b, c)``."""
    a, b, c = params
    g = np.clip(np.asarray(g, dtype=np.float64), _TINY_G, c)
    return np.exp(a * np.log(g) + b)


# -- counter-based keyed RNG --------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed, stream, keys):
    with np.errstate(over="ignore"):
        h = _mix(np.atleast_1d(np.uint64(seed) + _GOLDEN * np.uint64(stream)))
        for k in keys:
            k = np.asarray(k).astype(np.int64).astype(np.uint64)
            h = _mix(h ^ (k * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
    return h


def keyed_uniform(seed: int, stream: int, *keys) -> np.ndarray:
    """Uniform (0, 1) draws, one per broadcast key tuple."""
    h = _key(seed, stream, keys)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def keyed_normal(seed: int, stream: int, *keys) -> np.ndarray:
    """Standard normal draws via Box-Muller on two hashed uniforms."""
    h = _key(seed, stream, keys)
    with np.errstate(over="ignore"):
        h2 = _mix(h ^ np.uint64(0xD1B54A32D192ED03))
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# -- conductance sampling -----------------------------------------------------

def program_conductance(g_target, spec: NoiseSpec, *site) -> np.ndarray:
    """Target plus the cell's one-time write error, clamped to the device range."""
    g_target = np.asarray(g_target, dtype=np.float64)
    if spec.is_noiseless:
        return np.clip(g_target, G_MIN, G_MAX)
    n = keyed_normal(spec.seed, STREAM_PROG, *site)
    return np.clip(g_target + spec.sigma_prog(g_target) * n, G_MIN, G_MAX)


def read_conductance(g_programmed, spec: NoiseSpec, read_index, *site) -> np.ndarray:
    """Programmed conductance plus a fresh read fluctuation for ``read_index``."""
    g_programmed = np.asarray(g_programmed, dtype=np.float64)
    if spec.is_noiseless or spec.read_scale == 0.0:
        return g_programmed
    n = keyed_normal(spec.seed, STREAM_READ, read_index, *site)
    return np.clip(g_programmed + spec.sigma_fluct(g_programmed) * n, G_MIN, G_MAX)


def sample_conductance(g_target, spec: NoiseSpec, site, read_index=0) -> np.ndarray:
    """Readout conductance G = G_target + G_write + G_read for one or many sites.

    ``site`` is a tuple of integer (array-like) coordinates identifying cells.
    """
    site = tuple(site) if isinstance(site, (tuple, list)) else (site,)
    g = program_conductance(g_target, spec, *site)
    return read_conductance(g, spec, read_index, *site)


# -- ACAM transfer --------------------------------------------------------------

def conductance_to_threshold(g, params=DEFAULT_TRANSFER) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError("conductance must be positive")
    a, b, c = params
    return np.exp(a * np.log(g) + b) + c


def threshold_to_conductance(th, params=DEFAULT_TRANSFER) -> np.ndarray:
    a, b, c = params
    th = np.asarray(th, dtype=np.float64)
    if np.any(th <= c):
        raise ValueError("threshold below the transfer offset has no conductance")
    return np.exp((np.log(th - c) - b) / a)


def threshold_span(params=DEFAULT_TRANSFER) -> tuple[float, float]:
    """Data-line voltage span reachable by the ACAM comparators."""
    return (float(conductance_to_threshold(G_MIN, params)), float(conductance_to_threshold(G_MAX, params)))
