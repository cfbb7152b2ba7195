"""Central-difference oracle for the relaxed ACAM gradient."""
import numpy as np

from nldpe import naf
from nldpe.acam import program_unit
from nldpe.dtcompile import compile_builtin


def finite_difference_check(fn="tanh", eps=0.05, n_points=64, per_class=100, seed=0):
    """Worst relative gap between soft_gradient and central differences, per side."""
    c = compile_builtin(fn)
    u = program_unit(c, capacities="fit")
    p = naf.soft_params_from_unit(u, epsilon=eps)
    rng = np.random.default_rng(seed)
    off = naf.FrozenNoise({b.bit_index: (rng.normal(0, 0.3, b.n_rows), rng.normal(0, 0.3, b.n_rows))
                           for b in p.bits})
    q = c.qspec
    x = rng.uniform(q.in_lo, q.in_hi, n_points)
    t = rng.uniform(0, q.max_level, n_points)
    g = naf.soft_gradient(p, x, t, off)

    def loss(pp):
        return float(np.mean((naf.soft_forward(pp, x, off) - t) ** 2))

    worst, counts = [0.0, 0.0], [0, 0]
    while min(counts) < per_class:
        k = int(rng.integers(0, len(p.bits)))
        side = int(rng.integers(0, 2))
        b = p.bits[k]
        rows = np.flatnonzero(~(b.lo_open if side == 0 else b.hi_open))
        if rows.size == 0 or counts[side] >= per_class:
            continue
        r = int(rng.choice(rows))
        h = 1e-6 * b.span

        def shifted(d):
            w = (b.w_lo if side == 0 else b.w_hi).copy()
            w[r] += d
            nb = b.with_(**{("w_lo" if side == 0 else "w_hi"): w})
            return naf.SoftUnitParams(p.qspec, tuple(nb if i == k else o for i, o in enumerate(p.bits)))

        num = (loss(shifted(h)) - loss(shifted(-h))) / (2 * h)
        ana = g[k][side][r]
        scale = max(abs(num), abs(ana))
        if scale < 1e-9:
            continue  # row inactive on this sample set
        worst[side] = max(worst[side], abs(num - ana) / scale)
        counts[side] += 1
    return worst
