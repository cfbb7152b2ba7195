"""Built-in scalar functions and their default compilation domains."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import erf, expit

from nldpe.codes import Encoding, QuantSpec


def sigmoid(x):
    return expit(x)


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def identity(x):
    return np.asarray(x, dtype=np.float64)


def _minimum(f, lo, hi):
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return float(res.fun)


@dataclass(frozen=True)
class Builtin:
    name: str
    func: Callable
    in_lo: float
    in_hi: float
    out_lo: float
    out_hi: float
    monotone: bool

    def qspec(self, n_bits: int = 8, encoding=Encoding.GRAY, domain=None) -> QuantSpec:
        in_lo, in_hi = domain if domain is not None else (self.in_lo, self.in_hi)
        if domain is None:
            out_lo, out_hi = self.out_lo, self.out_hi
        else:
            # output range follows the function over the requested domain
            xs = np.linspace(in_lo, in_hi, 1 << 16)
            ys = self.func(xs)
            out_lo, out_hi = float(np.min(ys)), float(np.max(ys))
            if out_hi <= out_lo:
                out_hi = out_lo + 1.0
        if self.name == "log" and domain is None and n_bits != 8:
            in_lo = 2.0 ** -n_bits
            out_lo = math.log(in_lo)
        return QuantSpec(in_lo, in_hi, out_lo, out_hi, n_bits, Encoding(encoding))


_SILU_MIN = _minimum(lambda x: float(silu(x)), -4.0, 0.0)
_GELU_MIN = _minimum(lambda x: float(gelu(x)), -4.0, 0.0)

BUILTINS: dict[str, Builtin] = {
    "sigmoid": Builtin("sigmoid", sigmoid, -8.0, 8.0, 0.0, 1.0, True),
    "tanh": Builtin("tanh", np.tanh, -8.0, 8.0, -1.0, 1.0, True),
    "silu": Builtin("silu", silu, -8.0, 8.0, _SILU_MIN, float(silu(8.0)), False),
    "gelu": Builtin("gelu", gelu, -8.0, 8.0, _GELU_MIN, float(gelu(8.0)), False),
    "relu": Builtin("relu", relu, -1.0, 1.0, 0.0, 1.0, True),
    "identity": Builtin("identity", identity, -1.0, 1.0, -1.0, 1.0, True),
    # log excludes zero: inputs below one LSB of the unit range sit on the floor code
    "log": Builtin("log", np.log, 2.0 ** -8, 1.0, math.log(2.0 ** -8), 0.0, True),
    "exp": Builtin("exp", np.exp, -8.0, 0.0, 0.0, 1.0, True),
}

TABLE1_ORDER = ("sigmoid", "tanh", "silu", "gelu", "relu", "identity", "log", "exp")


def get_builtin(name: str) -> Builtin:
    try:
        return BUILTINS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown function {name!r}; choose from {sorted(BUILTINS)}") from None
