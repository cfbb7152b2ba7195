"""Core modes and log/exp pipelines built from crossbar and ACAM primitives.

Multiplication runs as ``a * b = exp(log|a| + log|b|)`` with signs handled
digitally (sign bits XOR, magnitude through the units).  Every exp and log
goes through a programmed ACAM unit; adders work on dequantized unit
outputs.  Attention folds ``1/sqrt(d_k)`` into the query and key weights
and, in the fused graph, feeds the log-probabilities of the softmax straight
into the second data-dependent product, skipping an exp followed by a log.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from nldpe.acam import AcamUnit, eval_unit_codes, eval_unit_values, program_unit
from nldpe.codes import CodeWord, Encoding, QuantSpec, Spacing, level_values, quantize_levels
from nldpe.crossbar import CrossbarImage, identity_image, program_asl, vmm
from nldpe.dtcompile import compile_spec
from nldpe.noise import NoiseSpec


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    n_bits: int = 8
    encoding: str = "gray"
    floor_bits: int = 8        # log units cover [range * 2^-floor_bits, range]
    mul_range: float = 1.0     # operand magnitude covered by mul/dot units
    exp_floor: float = 8.0     # softmax exp units cover [-exp_floor, 0]
    qk_range: float = 2.0      # |Q|, |K| magnitudes after the folded scale
    v_range: float = 2.0
    grid_points: int = 1 << 18

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# -- unit construction ---------------------------------------------------------

def log_spec(cfg: PipelineConfig, rng: float) -> QuantSpec:
    lo = rng * 2.0 ** -cfg.floor_bits
    return QuantSpec(lo, rng, math.log(lo), math.log(rng), cfg.n_bits, cfg.encoding)


def exp_spec(cfg: PipelineConfig, in_lo: float, in_hi: float, spacing=Spacing.UNIFORM) -> QuantSpec:
    out_hi = math.exp(in_hi)
    out_lo = math.exp(in_lo) if spacing is Spacing.LOG else 0.0
    return QuantSpec(in_lo, in_hi, out_lo, out_hi, cfg.n_bits, cfg.encoding, spacing)


@functools.lru_cache(maxsize=256)
def _unit(name: str, q: QuantSpec, unit_id: int, grid: int) -> AcamUnit:
    return program_unit(compile_spec(name, q, grid), capacities="fit", unit_id=unit_id)


# fixed ids keep programming-noise draws distinct per pipeline stage
_IDS = {"mul_log": 11, "mul_exp": 12, "sm_exp": 21, "sm_log": 22, "sm_exp2": 23,
        "q_log": 31, "k_log": 32, "v_log": 33, "s_exp": 34, "p_log": 35, "o_exp": 36}


def get_unit(name: str, q: QuantSpec, stage: str, cfg: PipelineConfig) -> AcamUnit:
    return _unit(name, q, _IDS.get(stage, 0), cfg.grid_points)


@dataclass
class RunContext:
    """Noise, event ledger and the running search counter of one pipeline run."""
    noise: Optional[NoiseSpec] = None
    ledger: object = None
    next_read: int = 0
    trace: list = field(default_factory=list)

    def search(self, unit: AcamUnit, xs, stage: str, op: str) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        off = self.next_read
        self.next_read += xs.size
        self.trace.append(Stage(stage, "acam", op))
        return eval_unit_values(unit, xs, self.noise, off, self.ledger)

    def adds(self, n: int, stage: str):
        if self.ledger is not None and n:
            self.ledger.add("adder_op", int(n))
        self.trace.append(Stage(stage, "adder", "add"))

    def note(self, stage: str, kind: str, op: str):
        self.trace.append(Stage(stage, kind, op))


def _ctx(noise, ledger) -> RunContext:
    return RunContext(noise, ledger)


# -- multiply / dot ------------------------------------------------------------------

def _log_magnitudes(x, rng, cfg, ctx, stage):
    """(sign, log|x| via unit, zero mask) for signed inputs."""
    x = np.asarray(x, dtype=np.float64)
    q = log_spec(cfg, rng)
    zero = np.abs(x) < q.in_lo * 0.5
    ctx.note(stage + "_sign", "digital", "sign_split")
    lg = ctx.search(get_unit("log", q, stage, cfg), np.abs(x), stage, "log")
    return np.signbit(x), lg, zero


def _mul_exp_spec(cfg: PipelineConfig) -> QuantSpec:
    q = log_spec(cfg, cfg.mul_range)
    return exp_spec(cfg, 2 * q.out_lo, 2 * q.out_hi)


def mul_logexp_many(a, b, cfg: Optional[PipelineConfig] = None, noise=None, ledger=None,
                    ctx: Optional[RunContext] = None) -> np.ndarray:
    cfg = cfg or PipelineConfig()
    ctx = ctx or _ctx(noise, ledger)
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    sa, la, za = _log_magnitudes(a, cfg.mul_range, cfg, ctx, "mul_log")
    sb, lb, zb = _log_magnitudes(b, cfg.mul_range, cfg, ctx, "mul_log")
    s = la + lb
    ctx.adds(s.size, "mul_add")
    mag = ctx.search(get_unit("exp", _mul_exp_spec(cfg), "mul_exp", cfg), s, "mul_exp", "exp")
    out = np.where(sa ^ sb, -mag, mag)
    return np.where(za | zb, 0.0, out)


def mul_logexp(a: float, b: float, cfg: Optional[PipelineConfig] = None, noise=None, ledger=None) -> float:
    """a * b through a log unit per operand, one adder and an exp unit."""
    return float(mul_logexp_many(np.float64(a), np.float64(b), cfg, noise, ledger))


def dot_logexp(a, b, cfg: Optional[PipelineConfig] = None, noise=None, ledger=None,
               ctx: Optional[RunContext] = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise PipelineError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    ctx = ctx or _ctx(noise, ledger)
    terms = mul_logexp_many(a, b, cfg, ctx=ctx)
    ctx.adds(max(a.size - 1, 0), "dot_sum")
    return float(terms.sum())


def matmul_logexp(A, B, cfg: Optional[PipelineConfig] = None, noise=None, ledger=None) -> np.ndarray:
    """Data-dependent product: logs of both operands once, exp per term, adder trees."""
    cfg = cfg or PipelineConfig()
    ctx = _ctx(noise, ledger)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise PipelineError(f"shape mismatch {A.shape} x {B.shape}")
    sa, la, za = _log_magnitudes(A, cfg.mul_range, cfg, ctx, "mul_log")
    sb, lb, zb = _log_magnitudes(B, cfg.mul_range, cfg, ctx, "mul_log")
    s = la[:, :, None] + lb[None, :, :]
    ctx.adds(s.size, "mul_add")
    mag = ctx.search(get_unit("exp", _mul_exp_spec(cfg), "mul_exp", cfg), s, "mul_exp", "exp")
    terms = np.where(sa[:, :, None] ^ sb[None, :, :], -mag, mag)
    terms = np.where(za[:, :, None] | zb[None, :, :], 0.0, terms)
    ctx.adds(A.shape[0] * B.shape[1] * (A.shape[1] - 1), "dot_sum")
    return terms.sum(axis=1)


# -- softmax -------------------------------------------------------------------------

def _softmax_log(y: np.ndarray, cfg: PipelineConfig, ctx: RunContext):
    """Steps 1-4 along the last axis: returns (log-probabilities, their floor)."""
    L = y.shape[-1]
    ctx.note("sm_shift", "digital", "max_shift")
    z = y - y.max(axis=-1, keepdims=True)
    q1 = exp_spec(cfg, -cfg.exp_floor, 0.0)
    e = ctx.search(get_unit("exp", q1, "sm_exp", cfg), z, "sm_exp", "exp")
    s = e.sum(axis=-1, keepdims=True)
    ctx.adds(e.size - e.size // L, "sm_sum")
    l_floor = -(cfg.exp_floor + math.log(L))
    if L > 1:
        q3 = QuantSpec(1.0, float(L), 0.0, math.log(L), cfg.n_bits, cfg.encoding)
        ls = ctx.search(get_unit("log", q3, "sm_log", cfg), s, "sm_log", "log")
    else:
        ls = np.zeros_like(s)
    ctx.adds(z.size, "sm_sub")
    return z - ls, l_floor


def softmax_logexp(y, cfg: Optional[PipelineConfig] = None, noise=None, ledger=None,
                   ctx: Optional[RunContext] = None) -> np.ndarray:
    """exp, sum, log of the sum, subtract, exp, along the last axis (inputs max-shifted)."""
    cfg = cfg or PipelineConfig()
    ctx = ctx or _ctx(noise, ledger)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0 or y.shape[-1] < 1:
        raise PipelineError("softmax needs at least one element")
    l, l_floor = _softmax_log(y, cfg, ctx)
    q5 = exp_spec(cfg, l_floor, 0.0)
    return ctx.search(get_unit("exp", q5, "sm_exp2", cfg), l, "sm_exp2", "exp")


# -- attention -----------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    name: str
    kind: str   # "acam", "crossbar", "adder", "digital"
    op: str


@dataclass
class AttentionGraph:
    d_k: int
    fused: bool
    stages: list = field(default_factory=list)

    def nonlinear_stages(self) -> list:
        return [s for s in self.stages if s.op in ("exp", "log")]

    def has_stage(self, name: str) -> bool:
        return any(s.name == name for s in self.stages)


def fold_scale(Wq, Wk, d_k: int):
    """Fuse 1/sqrt(d_k) into the query and key weights, split evenly."""
    f = d_k ** -0.25
    return np.asarray(Wq, dtype=np.float64) * f, np.asarray(Wk, dtype=np.float64) * f


def _linear_log(X, W, rng, stage, cfg, ctx, noise):
    """Crossbar linear layer followed by a sign split and log activation unit."""
    w_max = float(np.max(np.abs(W))) or 1.0
    img = program_asl(W, noise, w_max, xbar_id=_IDS[stage])
    off = ctx.next_read
    ctx.next_read += X.shape[0]
    ctx.note(stage + "_linear", "crossbar", "vmm")
    Y = vmm(img, X, noise, 1, off, ctx.ledger).analog_out
    return _log_magnitudes(Y, rng, cfg, ctx, stage)


def attention(Xq, Xk, Xv, Wq, Wk, Wv, cfg: Optional[PipelineConfig] = None, noise=None,
              fused: bool = True, ledger=None, return_graph: bool = False):
    """Single-head attention on crossbars and ACAM units; ``Wq``, ``Wk`` are unscaled."""
    cfg = cfg or PipelineConfig()
    Xq, Xk, Xv = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (Xq, Xk, Xv))
    Wq, Wk, Wv = (np.asarray(m, dtype=np.float64) for m in (Wq, Wk, Wv))
    if not (Xq.shape[1] == Wq.shape[0] and Xk.shape[1] == Wk.shape[0] and Xv.shape[1] == Wv.shape[0]):
        raise PipelineError("token width does not match weight rows")
    if Wq.shape[1] != Wk.shape[1] or Xk.shape[0] != Xv.shape[0]:
        raise PipelineError("query/key widths or key/value token counts differ")
    d_k = Wq.shape[1]
    ctx = _ctx(noise, ledger)
    graph = AttentionGraph(d_k, fused)
    Wq_f, Wk_f = fold_scale(Wq, Wk, d_k)

    sq, lq, zq = _linear_log(Xq, Wq_f, cfg.qk_range, "q_log", cfg, ctx, noise)
    sk, lk, zk = _linear_log(Xk, Wk_f, cfg.qk_range, "k_log", cfg, ctx, noise)
    sv, lv, zv = _linear_log(Xv, Wv, cfg.v_range, "v_log", cfg, ctx, noise)

    # DMMul_1: S = Q K^T
    s_in = lq[:, None, :] + lk[None, :, :]
    ctx.adds(s_in.size, "dmmul1_add")
    lqk = log_spec(cfg, cfg.qk_range)
    q_s = exp_spec(cfg, 2 * lqk.out_lo, 2 * lqk.out_hi)
    mag = ctx.search(get_unit("exp", q_s, "s_exp", cfg), s_in, "dmmul1_exp", "exp")
    sign = sq[:, None, :] ^ sk[None, :, :]
    terms = np.where(zq[:, None, :] | zk[None, :, :], 0.0, np.where(sign, -mag, mag))
    S = terms.sum(axis=2)
    ctx.adds(S.size * (d_k - 1), "dmmul1_sum")

    l, l_floor = _softmax_log(S, cfg, ctx)
    q_p = exp_spec(cfg, l_floor, 0.0, Spacing.LOG)
    q_lp = QuantSpec(q_p.out_lo, q_p.out_hi, l_floor, 0.0, cfg.n_bits, cfg.encoding)
    if fused:
        # log-probabilities go straight to DMMul_2, rounded onto the grid the exp/log pair yields
        ctx.note("softmax_requant", "digital", "requantize")
        q_l = QuantSpec(l_floor, 0.0, l_floor, 0.0, cfg.n_bits, cfg.encoding)
        lp = level_values(quantize_levels(np.clip(l, l_floor, 0.0), q_l), q_lp)
    else:
        p = ctx.search(get_unit("exp", q_p, "sm_exp2", cfg), l, "softmax_exp", "exp")
        lp = ctx.search(get_unit("log", q_lp, "p_log", cfg), p, "dmmul2_log", "log")

    # DMMul_2: O = P V
    lvq = log_spec(cfg, cfg.v_range)
    o_in = lp[:, :, None] + lv[None, :, :]
    ctx.adds(o_in.size, "dmmul2_add")
    q_o = exp_spec(cfg, l_floor + lvq.out_lo, lvq.out_hi)
    mag = ctx.search(get_unit("exp", q_o, "o_exp", cfg), o_in, "dmmul2_exp", "exp")
    terms = np.where(zv[None, :, :], 0.0, np.where(sv[None, :, :], -mag, mag))
    out = terms.sum(axis=1)
    ctx.adds(out.size * (Xk.shape[0] - 1), "dmmul2_sum")
    graph.stages = ctx.trace
    return (out, graph) if return_graph else out


def attention_reference(Xq, Xk, Xv, Wq, Wk, Wv) -> np.ndarray:
    Q, K, V = np.asarray(Xq) @ Wq, np.asarray(Xk) @ Wk, np.asarray(Xv) @ Wv
    s = Q @ K.T / math.sqrt(Wq.shape[1])
    s = np.exp(s - s.max(axis=1, keepdims=True))
    return (s / s.sum(axis=1, keepdims=True)) @ V


# -- cores -----------------------------------------------------------------------------

class CoreMode(str, enum.Enum):
    DUAL = "dual"
    CROSSBAR_ONLY = "crossbar_only"
    ACAM_ONLY = "acam_only"


@dataclass(frozen=True, eq=False)
class CoreConfig:
    mode: CoreMode
    crossbar: CrossbarImage
    acam_units: tuple
    col_scale: float = 1.0   # static gain from column output to the unit input range

    def __post_init__(self):
        object.__setattr__(self, "mode", CoreMode(self.mode))
        rows, cols = self.crossbar.shape
        if len(self.acam_units) != cols:
            raise PipelineError(f"{len(self.acam_units)} ACAM units for {cols} crossbar columns")
        if self.mode is CoreMode.CROSSBAR_ONLY and any(u.name != "identity" for u in self.acam_units):
            raise PipelineError("crossbar-only cores need identity ACAM units")
        if self.mode is CoreMode.ACAM_ONLY:
            w = self.crossbar.effective_weights()
            if rows != cols or not np.allclose(w, np.eye(rows), atol=1e-9):
                raise PipelineError("ACAM-only cores need an identity crossbar")


def make_core(mode, W=None, fn: str = "identity", n: Optional[int] = None, cfg=None,
              noise: Optional[NoiseSpec] = None, domain: Optional[tuple] = None) -> CoreConfig:
    """Build a core: a crossbar (identity for ACAM-only) plus one unit per column."""
    from nldpe.dtcompile import compile_builtin
    mode = CoreMode(mode)
    if mode is CoreMode.ACAM_ONLY:
        if n is None:
            raise PipelineError("ACAM-only cores need the column count n")
        img = identity_image(n)
    else:
        if W is None:
            raise PipelineError("crossbar cores need weights")
        img = program_asl(W, noise)
    if mode is CoreMode.CROSSBAR_ONLY:
        fn = "identity"
    c = compile_builtin(fn, 8, "gray", domain)
    units = tuple(program_unit(c, capacities="fit", unit_id=100 + j) for j in range(img.shape[1]))
    return CoreConfig(mode, img, units)


def run_core(core: CoreConfig, x, noise: Optional[NoiseSpec] = None, ledger=None,
             read_offset: int = 0) -> list:
    """VMM then one unit search per column; returns binary CodeWords."""
    out = vmm(core.crossbar, x, noise, 1, read_offset, ledger).analog_out * core.col_scale
    words = []
    for j, u in enumerate(core.acam_units):
        level = int(eval_unit_codes(u, out[j], noise, read_offset, ledger))
        words.append(CodeWord.from_int(level, u.n_bits, Encoding.BINARY))
    return words


def core_values(core: CoreConfig, words) -> np.ndarray:
    return np.array([level_values(w.to_int(), u.qspec) for w, u in zip(words, core.acam_units)])
