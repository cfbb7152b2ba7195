"""Command-line entry point.

Every subcommand writes its artifacts (CSV tables, JSON images and a JSON
manifest) into ``--out`` and prints the manifest path.  Outputs depend only
on the config and the seed; the manifest carries no timestamps or paths.
Failures print ``{"error": ..., "message": ...}`` on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from nldpe import acam, config as cfgmod, costs, dtcompile, faults, naf, pipelines
from nldpe.codes import QuantSpec
from nldpe.crossbar import program_asl, program_dsl, vmm
from nldpe.functions import BUILTINS, TABLE1_ORDER

PIPELINES = ("fn", "mul", "dot", "matmul", "softmax", "attention")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _fmt(v) -> str:
    return repr(float(v))


def _write(out: Path, name: str, text: str) -> str:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    return name


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _json(d) -> str:
    return json.dumps(d, indent=1, sort_keys=True) + "\n"


def _parse_domain(s: Optional[str]):
    if s is None:
        return None
    try:
        lo, hi = (float(t) for t in s.split(":"))
    except ValueError as e:
        raise CliError(f"--domain expects LO:HI, got {s!r}") from e
    return lo, hi


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, tag])


def _manifest(args, cfg, command: str, files: list, results: dict, tag: str = "") -> str:
    d = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(),
         "files": sorted(files), "results": results}
    name = f"{command}_{tag}_manifest.json" if tag else f"{command}_manifest.json"
    return _write(Path(args.out), name, _json(d))


def _compiled(fn: str, cfg, bits: int = 8, encoding: str = "gray", domain=None):
    if fn not in BUILTINS:
        raise CliError(f"unknown function {fn!r}; choose from {sorted(BUILTINS)}")
    if cfg.quant is not None and domain is None:
        return dtcompile.compile_spec(fn, cfg.quant)
    return dtcompile.compile_builtin(fn, bits, encoding, domain)


# -- subcommands --------------------------------------------------------------------------

def cmd_compile_fn(args, cfg):
    c = _compiled(args.fn, cfg, args.bits, args.encoding, _parse_domain(args.domain))
    counts = c.row_counts()
    n = c.qspec.n_bits
    rows = [[f"bit_{n - 1 - k}", counts[k]] for k in range(n)] + [["total", sum(counts)]]
    files = [_write(Path(args.out), f"{args.fn}_rows.csv", _csv(["bit", "rows"], rows)),
             _write(Path(args.out), f"{args.fn}_compiled.json", _json(c.to_dict()))]
    res = {"row_counts_msb_first": counts, "total_rows": sum(counts),
           "compiled_mse": dtcompile.compile_fixed_mse(c)}
    return _manifest(args, cfg, "compile-fn", files, res, args.fn)


def _sim_fn(cfg, noise, ledger, fn):
    c = _compiled(fn, cfg)
    u = acam.program_unit(c, capacities="fit")
    q = c.qspec
    xs = np.linspace(q.in_lo, q.in_hi, cfg.shapes.fn_points)
    y = acam.eval_unit_values(u, xs, noise, ledger=ledger)
    return ["x"], [[x] for x in xs], y, c.func(xs)


def _sim_mul(cfg, noise, ledger):
    r = _rng(cfg.seed, 1)
    a, b = r.random(cfg.shapes.pairs), r.random(cfg.shapes.pairs)
    y = pipelines.mul_logexp_many(a, b, cfg.pipeline, noise, ledger)
    return ["a", "b"], np.stack([a, b], 1).tolist(), y, a * b


def _sim_dot(cfg, noise, ledger):
    r = _rng(cfg.seed, 2)
    n, L = cfg.shapes.instances, cfg.shapes.length
    A, B = r.uniform(-1, 1, (n, L)), r.uniform(-1, 1, (n, L))
    ctx = pipelines.RunContext(noise, ledger)
    y = np.array([pipelines.dot_logexp(A[i], B[i], cfg.pipeline, ctx=ctx) for i in range(n)])
    return ["instance"], [[i] for i in range(n)], y, np.einsum("ij,ij->i", A, B)


def _sim_matmul(cfg, noise, ledger):
    r = _rng(cfg.seed, 3)
    s = cfg.shapes
    A, B = r.uniform(-1, 1, (s.rows, s.cols)), r.uniform(-1, 1, (s.cols, s.rows))
    y = pipelines.matmul_logexp(A, B, cfg.pipeline, noise, ledger)
    idx = [[i, j] for i in range(s.rows) for j in range(s.rows)]
    return ["row", "col"], idx, y.ravel(), (A @ B).ravel()


def _sim_softmax(cfg, noise, ledger):
    r = _rng(cfg.seed, 4)
    s = cfg.shapes
    Y = r.normal(0.0, 1.0, (s.softmax_trials, s.softmax_len))
    out = pipelines.softmax_logexp(Y, cfg.pipeline, noise, ledger)
    e = np.exp(Y - Y.max(axis=1, keepdims=True))
    ref = e / e.sum(axis=1, keepdims=True)
    idx = [[t, j] for t in range(s.softmax_trials) for j in range(s.softmax_len)]
    return ["trial", "index"], idx, out.ravel(), ref.ravel()


def _sim_attention(cfg, noise, ledger):
    r = _rng(cfg.seed, 5)
    s = cfg.shapes
    outs, refs, idx = [], [], []
    for k in range(s.instances):
        X = r.uniform(-1, 1, (s.tokens, s.d_model))
        Wq, Wk, Wv = (r.uniform(-1, 1, (s.d_model, s.d_k)) / np.sqrt(s.d_model) for _ in range(3))
        outs.append(pipelines.attention(X, X, X, Wq, Wk, Wv, cfg.pipeline, noise, ledger=ledger).ravel())
        refs.append(pipelines.attention_reference(X, X, X, Wq, Wk, Wv).ravel())
        idx += [[k, i, j] for i in range(s.tokens) for j in range(s.d_k)]
    return ["instance", "token", "dim"], idx, np.concatenate(outs), np.concatenate(refs)


def _run_pipeline(name: str, cfg, noise, ledger, fn: str = "sigmoid"):
    if name == "fn":
        return _sim_fn(cfg, noise, ledger, fn)
    runners = {"mul": _sim_mul, "dot": _sim_dot, "matmul": _sim_matmul,
               "softmax": _sim_softmax, "attention": _sim_attention}
    return runners[name](cfg, noise, ledger)


def _pearson(a, b) -> Optional[float]:
    if a.size < 2 or np.std(a) == 0 or np.std(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def cmd_simulate(args, cfg):
    ledger = costs.RunLedger()
    noise = None if cfg.noise.is_noiseless else cfg.noise
    keys, idx, y, ref = _run_pipeline(args.pipeline, cfg, noise, ledger, args.fn)
    y, ref = np.asarray(y, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    err = y - ref
    rows = [list(i) + [float(a), float(b), float(e)] for i, a, b, e in zip(idx, y, ref, err)]
    files = [_write(Path(args.out), f"simulate_{args.pipeline}.csv",
                    _csv(keys + ["output", "oracle", "error"], rows))]
    res = {"pipeline": args.pipeline, "n": int(y.size), "mse": float(np.mean(err ** 2)),
           "mean_error": float(np.mean(err)), "error_variance": float(np.var(err)),
           "max_abs_error": float(np.max(np.abs(err))), "pearson_r": _pearson(y, ref),
           "ledger": ledger.to_dict()}
    return _manifest(args, cfg, "simulate", files, res, args.pipeline)


def cmd_naf(args, cfg):
    if args.noise:
        cfg = _with_noise_file(cfg, args.noise)
    ncfg = cfg.naf if args.epochs is None else naf.NafConfig.from_dict({**cfg.naf.to_dict(), "epochs": args.epochs})
    c = _compiled(args.fn, cfg)
    u = acam.program_unit(c, capacities="fit")
    noise = None if cfg.noise.is_noiseless else cfg.noise
    tuned, results = naf.finetune_unit(u, c, noise, ncfg, jobs=args.jobs)
    q = c.qspec
    xs = np.linspace(q.in_lo, q.in_hi, 20001)
    f = c.func(xs)
    mse = {k: float(np.mean((acam.eval_unit_values(unit, xs, nz) - f) ** 2))
           for k, unit, nz in (("noise_free", u, None), ("noisy_untuned", u, noise), ("noisy_tuned", tuned, noise))}
    rows = [[b, e, float(l)] for b, r in enumerate(results) for e, l in enumerate(r.losses)]
    files = [_write(Path(args.out), f"naf_{args.fn}_losses.csv", _csv(["bit", "epoch", "loss"], rows)),
             _write(Path(args.out), f"naf_{args.fn}_image.json", _json(tuned.to_dict()))]
    res = {"function": args.fn, "epochs": ncfg.epochs, "mse": mse,
           "diverged_bits": [b for b, r in enumerate(results) if r.diverged]}
    return _manifest(args, cfg, "naf", files, res, args.fn)


def _with_noise_file(cfg, path):
    other = cfgmod.load(path)
    from dataclasses import replace
    return replace(cfg, noise=other.noise.with_(seed=cfg.seed, scale=cfg.noise.scale * other.noise.scale))


def cmd_faults(args, cfg):
    rate = cfg.faults.rate if args.rate is None else args.rate
    out = Path(args.out)
    if args.target == "acam":
        if args.spare < 0:
            raise CliError("--spare must be >= 0")
        c = _compiled(args.fn, cfg)
        caps = [k + args.spare for k in acam.unit_capacities(c, "fit")]
        u = acam.program_unit(c, capacities=tuple(reversed(caps)))
        cap = max(a.capacity for a in u.arrays)
        fm = faults.random_fault_map((u.n_bits, cap, 2), rate, cfg.seed, cfg.faults.high_fraction)
        fm = faults.FaultMap(frozenset(e for e in fm.entries if e[1] < u.arrays[e[0]].capacity))
        plan = faults.mitigation_plan(u, fm)
        fixed = faults.apply_mitigation(u.with_faults(fm), plan)
        xs = np.linspace(c.qspec.in_lo, c.qspec.in_hi, 20001)
        ref = acam.eval_unit_codes(u, xs)
        res = {"target": "acam", "rate": rate, "spare_rows": args.spare, "n_faults": len(fm),
               "unrecoverable_bits": list(plan.unrecoverable_bits),
               "mismatch_unmitigated": int(np.sum(acam.eval_unit_codes(u.with_faults(fm), xs) != ref)),
               "mismatch_mitigated": int(np.sum(acam.eval_unit_codes(fixed, xs) != ref))}
        files = [_write(out, "faults.csv", fm.to_csv()), _write(out, "mitigation.json", _json(plan.to_dict()))]
    else:
        s = cfg.shapes
        r = _rng(cfg.seed, 6)
        W = r.uniform(-1, 1, (s.rows, s.cols))
        X = r.uniform(-1, 1, (64, s.rows))
        ref = X @ W
        noise = None if cfg.noise.is_noiseless else cfg.noise
        q = QuantSpec(0.0, 1.0, -1.0, 1.0, 8)
        res = {"target": "crossbar", "rate": rate}
        files = []
        for scheme, planes in (("dsl", 16), ("asl", 4)):
            fm = faults.random_fault_map((planes, s.rows, s.cols), rate, cfg.seed, cfg.faults.high_fraction)
            img = program_dsl(W, q, noise, faults=fm) if scheme == "dsl" else program_asl(W, noise, 1.0, faults=fm)
            y = vmm(img, X, noise).analog_out
            res[f"{scheme}_mse"] = float(np.mean((y - ref) ** 2))
            res[f"{scheme}_faults"] = len(fm)
            files.append(_write(out, f"faults_{scheme}.csv", fm.to_csv()))
    return _manifest(args, cfg, "faults", files, res, args.target)


def cmd_report(args, cfg):
    ledger = costs.RunLedger()
    noise = None if cfg.noise.is_noiseless else cfg.noise
    _run_pipeline(args.pipeline, cfg, noise, ledger, args.fn)
    rep = costs.energy_report(ledger, cfg.costs)
    files = [_write(Path(args.out), f"energy_{args.pipeline}.csv", costs.report_csv(rep)),
             _write(Path(args.out), f"energy_{args.pipeline}.json", costs.report_json(rep) + "\n")]
    res = {"pipeline": args.pipeline, "total_pj": rep["total_pj"], "compute_share_pct": rep["compute_share_pct"]}
    return _manifest(args, cfg, "report", files, res, args.pipeline)


def cmd_table1(args, cfg):
    fns = args.functions.split(",") if args.functions else list(TABLE1_ORDER)
    for f in fns:
        if f not in BUILTINS:
            raise CliError(f"unknown function {f!r}")
    text = costs.emit_table1(fns, args.bits, ("binary", "gray"))
    files = [_write(Path(args.out), "table1.csv", text)]
    return _manifest(args, cfg, "table1", files, {"functions": fns, "bits": args.bits})


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--noise-scale", type=float, default=argparse.SUPPRESS,
                        help="multiplier on every noise sigma (0 disables noise)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads")

    p = _Parser(prog="nldpe", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("compile-fn", parents=[common], help="compile a function into per-bit intervals")
    s.add_argument("--fn", required=True)
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--encoding", choices=("binary", "gray"), default="gray")
    s.add_argument("--domain", help="LO:HI input domain")
    s.set_defaults(func=cmd_compile_fn)

    s = sub.add_parser("simulate", parents=[common], help="run a pipeline against its float oracle")
    s.add_argument("--pipeline", choices=PIPELINES, required=True)
    s.add_argument("--fn", default="sigmoid", help="function for --pipeline fn")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("naf", parents=[common], help="noise-aware fine-tuning of one function's unit")
    s.add_argument("--fn", required=True)
    s.add_argument("--noise", help="TOML file whose [noise] section replaces the config's")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_naf)

    s = sub.add_parser("faults", parents=[common], help="stuck-at fault injection and mitigation")
    s.add_argument("--target", choices=("acam", "crossbar"), default="acam")
    s.add_argument("--fn", default="sigmoid")
    s.add_argument("--rate", type=float)
    s.add_argument("--spare", type=int, default=2, help="unused rows per ACAM array (acam target)")
    s.set_defaults(func=cmd_faults)

    s = sub.add_parser("report", parents=[common], help="energy breakdown of a pipeline run")
    s.add_argument("--pipeline", choices=PIPELINES, default="attention")
    s.add_argument("--fn", default="sigmoid")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("table1", parents=[common], help="row counts per bit for the built-in functions")
    s.add_argument("--functions", help="comma-separated function names")
    s.add_argument("--bits", type=int, default=8)
    s.set_defaults(func=cmd_table1)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for k, v in (("config", None), ("seed", None), ("noise_scale", None), ("out", "out"), ("jobs", 1)):
            if not hasattr(args, k):
                setattr(args, k, v)
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        cfg = cfgmod.load(args.config) if args.config else cfgmod.Config()
        cfg = cfg.with_overrides(args.seed, args.noise_scale)
        manifest = args.func(args, cfg)
        print(str(Path(args.out) / manifest))
        return 0
    except Exception as e:  # every failure leaves a machine-readable record
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
