"""Command-line entry point: ``wickmart <command> [<subcommand>] [flags]``.

Exit status is 0 on success, 1 on bad input (including unknown flags) and
2 when a numerical routine fails.  Flags override values from ``--config``;
the seed falls back to ``WICKMART_SEED`` and then to 0.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from wickmart.errors import NumericalError, ValidationError

log = logging.getLogger("wickmart")

SCHEMA_DIR = Path(__file__).with_name("schemas")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# defaults are applied after the config file, so flags left unset can be filled from it
DEFAULTS = {
    "seed": None,
    "threads": None,
    "format": None,
    "out": None,
    "dt": 1e-3,
    "tmax": 40.0,
    "paths": 10_000,
    "grid": 8,
    "alpha": 0.05,
    "alphas": "-0.2:0.05:0.2",
    "eps": "",
    "points": 1001,
    "mmax": 6,
    "gap": 0.1,
    "z": -0.5,
    "L": None,
    "t": None,
    "x": None,
    "zgrid": None,
    "horizon": None,
    "replicas": 1000,
    "profile": "quick",
    "u_max": 25.0,
    "du": 1e-2,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror the long flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="write the payload here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"))


def _poly(p, required=True):
    p.add_argument("--poly", help='degree-ascending coefficients, e.g. "0,0,0,0,1"')
    p.set_defaults(_need_poly=required)


def _sim(p):
    for flag, typ in (("--dt", float), ("--tmax", float), ("--paths", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--cone", help="cone JSON from cone-calibrate (calibrated on the fly if omitted)")


def _scales(p):
    p.add_argument("--u-max", type=float, help="scale cut-off of the kernel decomposition")
    p.add_argument("--du", type=float, help="scale step")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="wickmart", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    wick = sub.add_parser("wick", help="Wick-ordered polynomials")
    ws = wick.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    p = ws.add_parser("expand", help="monomial table of P_R(x; t)")
    _common(p), _poly(p)
    p = ws.add_parser("eval", help="P_R(x; t) and its x-derivative")
    _common(p), _poly(p)
    p.add_argument("--x", type=float)
    p.add_argument("--t", type=float)

    p = sub.add_parser("envelope", help="zero envelope f_R on a time grid")
    _common(p), _poly(p)
    p.add_argument("--t", help="comma-separated times (default: uniform grid on (0, tmax])")
    p.add_argument("--tmax", type=float)
    p.add_argument("--points", type=int)

    p = sub.add_parser("cone-calibrate", help="cone offset A and slopes A'(eps)")
    _common(p), _poly(p)
    p.add_argument("--tmax", type=float)
    p.add_argument("--eps", help="comma-separated eps values in (0, 1)")

    paths = sub.add_parser("paths", help="single-site path experiments")
    ps = paths.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    p = ps.add_parser("simulate", help="per-path functionals")
    _common(p), _poly(p), _sim(p)
    p = ps.add_parser("hitting-stats", help="mean cone hits per unit window")
    _common(p), _poly(p), _sim(p)
    p.add_argument("--mmax", type=int)

    cp = sub.add_parser("coupling", help="coupling experiments")
    cs = cp.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    p = cs.add_parser("tau", help="P[tau > T_cap] for the independent coupling")
    _common(p), _poly(p, required=False), _sim(p)
    p.add_argument("--gap", type=float)
    p.add_argument("--t", type=float, help="time offset")
    p = cs.add_parser("exit", help="drifted line / two-boundary exit probability")
    _common(p), _sim(p)
    p.add_argument("--z", type=float)
    p.add_argument("--L", type=float, help="second boundary (< 0); omit for the single line")
    p.add_argument("--horizon", type=float)
    p = cs.add_parser("lipschitz", help="F(z) and finite-difference slopes")
    _common(p), _poly(p, required=False), _sim(p)
    p.add_argument("--t", type=float)
    p.add_argument("--zgrid", help="comma-separated start points")
    p.add_argument("--horizon", type=float)

    gp = sub.add_parser("gff", help="scale-decomposed field")
    gs = gp.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    p = gs.add_parser("kernel-check", help="kernel constants, beta integrals, Gram PSD")
    _common(p)
    p.add_argument("--tmax", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--report", help="alias of --out")
    _scales(p)
    p.set_defaults(_defaults={"tmax": 20.0, "grid": 16})
    p = gs.add_parser("simulate", help="D_t samples on an M x M grid")
    _common(p), _poly(p)
    p.add_argument("--grid", type=int)
    p.add_argument("--t", type=float)
    p.add_argument("--replicas", type=int)
    _scales(p)
    p.add_argument("--dump", help="also write the field snapshot as <dump>.bin + <dump>.json")

    mp = sub.add_parser("moments", help="moment estimators")
    ms = mp.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    p = ms.add_parser("mgf", help="log-MGF curve of a sample column")
    _common(p)
    p.add_argument("--input", required=True, help="CSV with a header; the last column is used")
    p.add_argument("--column", help="column name (default: last)")
    p.add_argument("--alphas", help="lo:step:hi or comma list")
    p = ms.add_parser("negexp", help="E[exp(-alpha D_t)] on a field grid")
    _common(p), _poly(p, required=False)
    p.add_argument("--alpha", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--t", help="comma-separated times")
    p.add_argument("--replicas", type=int)

    p = sub.add_parser("verify-all", help="run the acceptance checks and print PASS/FAIL")
    _common(p)
    p.add_argument("--profile", choices=("quick", "full"))
    p.add_argument("--only", help="comma-separated check numbers")
    return ap


# ---------------------------------------------------------------- config


def _merge(args: argparse.Namespace) -> argparse.Namespace:
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
    for key, val in cfg.items():
        key = key.replace("-", "_")
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, val)
    for key, val in {**DEFAULTS, **getattr(args, "_defaults", {})}.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, val)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        env = os.environ.get("WICKMART_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise ValidationError(f"WICKMART_SEED is not an integer: {env!r}") from None
    if hasattr(args, "seed") and not 0 <= args.seed < 1 << 64:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    if hasattr(args, "threads") and args.threads is None:
        args.threads = os.cpu_count() or 1
    if getattr(args, "_need_poly", False) and not getattr(args, "poly", None):
        raise ValidationError("--poly is required")
    return args


def _floats(text, name) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"bad list for --{name}: {text!r}") from None


def _alpha_grid(text) -> list[float]:
    if isinstance(text, str) and ":" in text:
        try:
            lo, step, hi = (float(v) for v in text.split(":"))
        except ValueError:
            raise ValidationError(f"bad range {text!r}; expected lo:step:hi") from None
        if step <= 0:
            raise ValidationError("step must be > 0")
        k = int(math.floor((hi - lo) / step + 1e-9))
        return [round(lo + i * step, 12) for i in range(k + 1)]
    return _floats(text, "alphas")


def _wick(args):
    from wickmart.wickpoly import Polynomial, wick_order

    return wick_order(Polynomial.parse(args.poly if args.poly else "0,0,0,0,1"))


def _cone(args, P):
    from wickmart.envelope import ConeConfig, calibrate_cone

    if getattr(args, "cone", None):
        try:
            return ConeConfig.load(args.cone)
        except (OSError, KeyError, ValueError) as exc:
            raise ValidationError(f"cannot read cone file {args.cone}: {exc}") from None
    return calibrate_cone(P, max(50.0, float(args.tmax)))


def _simcfg(args, **over):
    from wickmart.paths import SimConfig

    kw = dict(dt=float(args.dt), t_max=float(args.tmax), n_paths=int(args.paths), seed=int(args.seed),
              threads=int(args.threads))
    kw.update(over)
    return SimConfig(**kw)


# ---------------------------------------------------------------- commands


def cmd_wick(args):
    P = _wick(args)
    if args.sub == "expand":
        rows = [{"xpow": j, "tpow": k, "coef": str(c)} for j, k, c in P.terms()]
        return rows, "table"
    if args.x is None or args.t is None:
        raise ValidationError("--x and --t are required")
    from wickmart.wickpoly import evaluate, evaluate_dx

    val = float(evaluate(P, args.x, args.t))
    return {"x": args.x, "t": args.t, "value": val, "dx": float(evaluate_dx(P, args.x, args.t))}, "wick-eval"


def cmd_envelope(args):
    from wickmart.envelope import envelope_curve

    P = _wick(args)
    ts = np.array(_floats(args.t, "t")) if args.t else np.linspace(0.0, float(args.tmax), int(args.points))
    if np.any(ts < 0):
        raise ValidationError("times must be >= 0")
    f = envelope_curve(P, ts)
    return [{"t": float(t), "f": float(v)} for t, v in zip(ts, f)], "table"


def cmd_cone(args):
    from wickmart.envelope import calibrate_cone

    P = _wick(args)
    cone = calibrate_cone(P, float(args.tmax), _floats(args.eps, "eps") if args.eps else ())
    return cone.to_json(), "cone"


def cmd_paths(args):
    from wickmart.paths import hitting_counts, simulate_batch

    P = _wick(args)
    cone = _cone(args, P)
    cfg = _simcfg(args)
    if args.sub == "simulate":
        b = simulate_batch(cfg, P, cone)
        rows = [{"path": i, "d_t": b.d_t[i], "d_L": b.d_L[i], "d_H": b.d_H[i], "q": b.q[i], "qv_L": b.qv_L[i],
                 "first_H": b.first_H[i], "closed": int(b.closed[i])} for i in range(len(b))]
        return rows, "table"
    rows = hitting_counts(cfg, P, cone, int(args.mmax))
    return [{"m": r.m, "mean": r.mean, "stderr": r.stderr, "paper_bound": r.paper_bound} for r in rows], "table"


def cmd_coupling(args):
    from wickmart import coupling

    if args.sub == "exit":
        z = float(args.z)
        cfg = _simcfg(args, t_max=max(1.0, float(args.horizon or 50.0)))
        horizon = float(args.horizon or 50.0)
        if args.L is None:
            exact = coupling.line_hit_prob(z)
            mc, _ = coupling.drifted_hit_mc(z, cfg, upper=0.0, drift=-1.0, horizon=horizon)
        else:
            exact = coupling.two_boundary_prob(z, float(args.L))
            _, mc = coupling.drifted_hit_mc(z, cfg, upper=0.0, lower=float(args.L), drift=1.0, horizon=horizon)
        return {"z": z, "L": args.L, "closed_form": exact, "mc": mc.mean, "stderr": mc.stderr, "n": mc.n}, "coupling-exit"
    P = _wick(args)
    cone = _cone(args, P)
    t = float(args.t or 0.0)
    if args.sub == "tau":
        cfg = _simcfg(args, t_max=max(1.0, float(args.tmax)))
        z1 = 0.0
        batch = coupling.independent_coupling(z1, z1 + float(args.gap), cfg, P, cone, t_offset=t)
        est = batch.p_tau_gt_cap(cfg.seed)
        return {"gap": float(args.gap), "t_offset": t, "p_tau_gt_cap": est.mean, "stderr": est.stderr,
                "n": est.n}, "coupling-tau"
    if not args.zgrid:
        raise ValidationError("--zgrid is required")
    cfg = _simcfg(args)
    pr = coupling.lipschitz_probe(t, _floats(args.zgrid, "zgrid"), cfg, P, cone, horizon=args.horizon)
    rows = []
    for k, z in enumerate(pr.z):
        rows.append({"z": float(z), "F": pr.F[k].mean, "stderr": pr.F[k].stderr,
                     "slope": float(pr.slopes[k]) if k < pr.slopes.size else "",
                     "slope_se": float(pr.slope_se[k]) if k < pr.slopes.size else ""})
    return rows, "table"


def cmd_gff(args):
    from wickmart import gff

    kd = gff.KernelDecomposition(u_max=float(args.u_max), du=float(args.du))
    if args.sub == "kernel-check":
        if args.report and not args.out:
            args.out = args.report
        dom = gff.GridDomain(M=int(args.grid))
        rep = gff.kernel_report(kd, float(args.tmax))
        u = np.arange(0.0, kd.u_max + kd.du / 2, kd.du)
        beta = {}
        for b in (0.5, 1.0, 1.99):
            r = gff.beta_integrability(kd, b, dom)
            beta[str(b)] = {"value": r.value, "tail": r.tail, "rel_change": r.rel_change}
        return {**rep.to_json(), "gram_min_eig": gff.gram_min_eig(dom, u), "beta": beta,
                "beta2_partial": gff.divergence_trend(2.0, dom)}, "kernel-check"
    P = _wick(args)
    if args.t is None:
        raise ValidationError("--t is required")
    dom = gff.GridDomain(M=int(args.grid))
    snap = gff.sample_field(kd, dom, float(args.t), int(args.replicas), int(args.seed))
    if args.dump:
        snap.dump(args.dump)
    D = gff.field_functional(snap, P, dom)
    return [{"replica": i, "D_t": float(d)} for i, d in enumerate(D)], "table"


def cmd_moments(args):
    from wickmart import estimators, gff

    if args.sub == "mgf":
        try:
            text = Path(args.input).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read {args.input}: {exc}") from None
        reader = csv.DictReader(io.StringIO(text))
        if not reader.fieldnames:
            raise ValidationError("input CSV has no header")
        col = args.column or reader.fieldnames[-1]
        try:
            y = [float(row[col]) for row in reader]
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad sample column {col!r}: {exc}") from None
        curve = estimators.mgf_curve(y, _alpha_grid(args.alphas), int(args.seed))
        return curve.to_json(), "mgf"
    P = _wick(args)
    rows = estimators.neg_exp_moment(float(args.alpha), _floats(args.t or "2,4,6", "t"), gff.KernelDecomposition(),
                                     gff.GridDomain(M=int(args.grid)), P, int(args.replicas), int(args.seed))
    out = []
    for r in rows:
        lo, hi = r.ci()
        out.append({"t": r.t, "mean": r.estimate.mean, "stderr": r.estimate.stderr, "ci_lo": lo, "ci_hi": hi,
                    "ess": r.ess, "flag": r.flag, "jensen_ok": int(r.jensen_ok)})
    return out, "table"


def cmd_verify(args):
    from wickmart import verify

    only = {int(v) for v in args.only.split(",")} if args.only else None
    res = verify.run_all(args.profile, int(args.seed), int(args.threads), only)
    for r in res:
        print(r.line(), file=sys.stderr)
    passed = sum(r.passed for r in res)
    print(f"{passed}/{len(res)} checks passed", file=sys.stderr)
    payload = {"profile": args.profile, "seed": int(args.seed), "passed": passed, "total": len(res),
               "checks": [r.to_json() for r in res]}
    return payload, "verify"


COMMANDS = {"wick": cmd_wick, "envelope": cmd_envelope, "cone-calibrate": cmd_cone, "paths": cmd_paths,
            "coupling": cmd_coupling, "gff": cmd_gff, "moments": cmd_moments, "verify-all": cmd_verify}


# ---------------------------------------------------------------- output


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def render(payload, kind: str, fmt: str | None) -> tuple[str, str]:
    """Serialise ``payload``; returns ``(text, schema name)``."""
    if kind == "wick-eval" and fmt is None:
        return format(payload["value"], ".17g") + "\n", kind
    table = isinstance(payload, list)
    fmt = fmt or ("csv" if table else "json")
    if fmt == "json":
        if table:
            cols = list(payload[0]) if payload else []
            payload = {"columns": cols, "rows": [[r[c] for c in cols] for r in payload]}
            kind = "table" if kind == "table" else kind + "-table"
        return json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n", kind
    rows = payload if table else [payload]
    if not rows:
        return "", kind
    if any(isinstance(v, (dict, list)) for r in rows for v in r.values()):
        raise ValidationError("this payload is nested; use --format json")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                    for v in (_clean(x) for x in r.values())])
    return buf.getvalue(), kind


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _merge(args)
        payload, kind = COMMANDS[args.command](args)
        text, _ = render(payload, kind, args.format)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    except ValidationError as exc:
        print(f"wickmart: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"wickmart: numerical failure: {exc}", file=sys.stderr)
        return 2
    if args.command == "verify-all":
        return 0 if payload["passed"] == payload["total"] else 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
