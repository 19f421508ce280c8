"""Command-line front end.

Subcommands cover the whole pipeline: lint, certify, params, abstract,
compose, bisim, validate, report.  Exit codes: 0 all checks passed,
1 analysis negative (infeasible parameters, refuted certificate, invalid
or empty relation, violated bound), 2 usage or input errors.

All randomness flows from one --seed flag (default 1729) so every run is
reproducible; reports are CSV so they diff cleanly.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys as _sys
from pathlib import Path

import numpy as np

from . import bisimcheck, certify, gridabs, mcvalidate, netcomp, sysdsl
from .errors import StochabsError

DEFAULT_SEED = 1729


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _emit_rows(rows, out_path=None):
    for row in rows:
        print(",".join(_fmt(v) for v in row))
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(rows)


def _load_system(path):
    obj = sysdsl.load(path)
    if not isinstance(obj, sysdsl.SysModel):
        raise StochabsError(f"{path}: expected a system file, found a network")
    return obj


def _load_network(path):
    obj = sysdsl.load(path)
    if not isinstance(obj, sysdsl.NetworkSpec):
        raise StochabsError(f"{path}: expected a network file, found a system")
    return obj


def _certificate(sys_model, args):
    if getattr(args, "kappa", None) is not None and getattr(args, "p_matrix", None) is not None:
        p = [[float(v) for v in row.split()] for row in args.p_matrix.split(";")]
        return certify.QuadraticCertificate.create(
            p, args.kappa, lu=sys_model.input_lipschitz, lw=sys_model.dist_lipschitz
        )
    return certify.QuadraticCertificate.from_model(sys_model)


def cmd_lint(args):
    obj = sysdsl.load(args.file)
    models = obj.nodes if isinstance(obj, sysdsl.NetworkSpec) else [obj]
    names = obj.node_names if isinstance(obj, sysdsl.NetworkSpec) else [obj.name]
    bad = False
    for name, model in zip(names, models):
        rep = sysdsl.check_regularity(model, samples=args.samples, seed=args.seed)
        status = "ok" if rep.passed else "refuted"
        print(f"{name}: constants {status} (worst ratios: f {rep.worst_f_ratio:.4g}, "
              f"sigma {rep.worst_sigma_ratio:.4g}, growth {rep.worst_growth_ratio:.4g})")
        if not rep.passed:
            print(f"  witness: {rep.witness}")
            bad = True
    return 1 if bad else 0


def cmd_certify(args):
    model = _load_system(args.file)
    cert = _certificate(model, args)
    report = certify.verify_certificate(
        model, cert, mode=args.mode, samples=args.samples, seed=args.seed
    )
    rows = [
        ("quantity", "parameter", "value"),
        ("accepted", args.mode, int(report.accepted)),
        ("margin", args.mode, report.margin),
        ("kappa", "", cert.kappa),
        ("lambda_min", "", cert.lambda_min),
        ("lambda_max", "", cert.lambda_max),
        ("sqrt_p_norm", "", cert.sqrt_p_norm),
    ]
    if report.accepted:
        kit = certify.derive_bounds(model, cert)
        for label, fn in (
            ("alpha_low", kit.alpha_low),
            ("alpha_high", kit.alpha_high),
            ("sigma_u", kit.sigma_u),
            ("sigma_d", kit.sigma_d),
            ("v_modulus", kit.v_modulus),
            ("rho_u", kit.rho_u),
            ("rho_d", kit.rho_d),
        ):
            rows.append((label, "r=1", fn(1.0)))
        if args.tau is not None:
            for frac in (0.25, 0.5, 1.0):
                t = args.tau * frac
                rows.append(("noise_gap", t, certify.noise_gap_bound(kit, model, t)))
    out = Path(args.out) / "certify.csv" if args.out else None
    if out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    _emit_rows(rows, out)
    return 0 if report.accepted else 1


def cmd_params(args):
    obj = sysdsl.load(args.file)
    if isinstance(obj, sysdsl.NetworkSpec):
        result = netcomp.synthesize_params(obj, seed=args.seed)
        rows = [("quantity", "parameter", "value")]
        for node in result.nodes:
            rows.append(("feasible", node.name, int(node.feasible)))
            rows.append(("eps", node.name, node.eps))
            rows.append(("eps_floor", node.name, node.eps_floor))
            rows.append(("psi_tau", node.name, node.psi_tau))
            rows.append(("eps_tilde_norm", node.name, node.eps_tilde_norm))
            for i, v in enumerate(node.eta):
                rows.append(("eta", f"{node.name}[{i}]", v))
            for i, v in enumerate(node.omega):
                rows.append(("omega", f"{node.name}[{i}]", v))
            for key, val in node.terms.items():
                rows.append((key, node.name, val))
            if node.reason:
                rows.append(("reason", node.name, node.reason))
        out = Path(args.out) / "params.csv" if args.out else None
        if out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
        _emit_rows(rows, out)
        if not result.feasible:
            for node in result.nodes:
                if not node.reason:
                    continue
                print(f"infeasible: {node.name}: {node.reason}", file=_sys.stderr)
            return 1
        return 0

    model = obj
    if args.tau is None or args.eps is None:
        raise StochabsError("single-system params needs --tau and --eps")
    cert = _certificate(model, args)
    report = certify.verify_certificate(model, cert, mode="sampled", samples=args.samples, seed=args.seed)
    if not report.accepted:
        print(f"certificate refuted (margin {report.margin:.4g})", file=_sys.stderr)
        return 1
    kit = certify.derive_bounds(model, cert)
    floor = certify.precision_lower_bound(
        kit, model, args.tau, eps_tilde_norm=args.eps_tilde_norm
    )
    omega = args.omega
    if omega is None:
        widths = [hi - lo for lo, hi in model.input_box]
        omega = min(widths) if widths else 0.0
    terms = certify.pitch_terms(
        kit, model, args.tau, args.eps, omega, eps_tilde_norm=args.eps_tilde_norm
    )
    rows = [("quantity", "parameter", "value"), ("eps", "", args.eps), ("eps_floor", "", floor),
            ("omega", "", omega)]
    rows += [(key, "", val) for key, val in terms.items()]
    feasible = args.eps > floor and terms["pitch_bound"] > 0
    rows.append(("feasible", "", int(feasible)))
    out = Path(args.out) / "params.csv" if args.out else None
    if out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    _emit_rows(rows, out)
    if not feasible:
        which = (
            "precision target below its achievable floor"
            if args.eps <= floor
            else "pitch bound not positive (decay term exceeded by mismatch terms)"
        )
        print(f"infeasible: {which}", file=_sys.stderr)
        return 1
    return 0


def cmd_abstract(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    obj = sysdsl.load(args.file)
    if isinstance(obj, sysdsl.NetworkSpec):
        result = netcomp.synthesize_params(obj, seed=args.seed)
        if not result.feasible and not args.force:
            for node in result.nodes:
                if node.reason:
                    print(f"infeasible: {node.name}: {node.reason}", file=_sys.stderr)
            return 1
        etas = {i: node.eta for i, node in enumerate(result.nodes)}
        omegas = {i: node.omega for i, node in enumerate(result.nodes)}
        for i, name in enumerate(obj.node_names):
            abs_i = netcomp.build_node_abstraction(
                obj, i, etas, omegas, force=args.force,
                max_cells=args.max_cells, workers=args.workers,
            )
            path = out_dir / f"{name}.abs"
            abs_i.write(path)
            print(f"{path}: {len(abs_i.states)} states, {len(abs_i.transitions)} transitions, "
                  f"hash {abs_i.content_hash()[:12]}")
        return 0

    model = obj
    if args.tau is None or args.eta is None:
        raise StochabsError("single-system abstract needs --tau and --eta")
    omega = args.omega
    if omega is None:
        widths = [hi - lo for lo, hi in model.input_box]
        omega = gridabs.snap_input_pitch(model.input_box, min(widths)) if widths else 0.0
    cert = None
    try:
        cert = _certificate(model, args)
    except StochabsError:
        if not args.force:
            raise StochabsError(
                "no certificate available to validate the pitch; pass --force to build anyway"
            ) from None
    eta = gridabs.snap_state_pitch(model.domain, args.eta)
    abstraction = gridabs.build_abstraction(
        model, args.tau, eta, omega,
        eps=args.eps or 0.0,
        eps_tilde=(args.eps_tilde_norm,) * model.p if args.eps_tilde_norm else (),
        cert=cert if (args.eps and cert) else None,
        force=args.force,
        max_cells=args.max_cells,
        workers=args.workers,
    )
    path = out_dir / f"{model.name}.abs"
    abstraction.write(path)
    print(f"{path}: {len(abstraction.states)} states, {len(abstraction.transitions)} transitions, "
          f"hash {abstraction.content_hash()[:12]}")
    return 0


def cmd_compose(args):
    spec = _load_network(args.network)
    parts = [gridabs.read_abstraction(p) for p in args.abstractions]
    composed = netcomp.compose_abstractions(spec, parts)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "composed.abs"
    composed.write(path)
    print(f"{path}: {len(composed.states)} states, {len(composed.transitions)} transitions")
    print(f"eps,{_fmt(composed.eps)}")
    print("epstilde," + " ".join(_fmt(v) for v in composed.eps_tilde))
    return 0


def cmd_bisim(args):
    s1 = gridabs.read_abstraction(args.left)
    s2 = gridabs.read_abstraction(args.right)
    if args.check:
        rel, lh, rh = bisimcheck.load_relation(args.check)
        if lh != s1.content_hash() or rh != s2.content_hash():
            raise StochabsError("relation file does not match these abstractions (hashes differ)")
        result = bisimcheck.check_relation(s1, s2, rel)
        if result.valid:
            print(f"valid: {len(rel)} pairs")
            return 0
        print(f"invalid: pair {result.pair} violates condition ({result.clause})")
        return 1
    eps_tilde = tuple(float(v) for v in args.eps_tilde.split()) if args.eps_tilde else ()
    rel = bisimcheck.largest_bisimulation(s1, s2, args.eps, eps_tilde)
    print(f"largest bisimulation: {len(rel)} pairs")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        bisimcheck.save_relation(rel, s1, s2, out_dir / "relation.rel")
        print(f"wrote {out_dir / 'relation.rel'}")
    return 0 if rel.pairs else 1


def cmd_validate(args):
    model = _load_system(args.file)
    cert = _certificate(model, args)
    report = certify.verify_certificate(model, cert, mode="sampled", samples=2000, seed=args.seed)
    if not report.accepted:
        print(f"certificate refuted (margin {report.margin:.4g})", file=_sys.stderr)
        return 1
    kit = certify.derive_bounds(model, cert)
    tau = args.tau
    floor = certify.precision_lower_bound(kit, model, tau, eps_tilde_norm=args.eps_tilde_norm)
    eps = args.eps if args.eps is not None else max(
        1.25 * floor, 0.25 * certify.inf_diameter(model.domain)
    )
    if eps <= floor:
        print(f"infeasible: eps {eps} is not above the floor {floor:.6g}", file=_sys.stderr)
        return 1
    widths = [hi - lo for lo, hi in model.input_box]
    omega = min(widths) if widths else 0.0
    for _ in range(60):
        terms = certify.pitch_terms(kit, model, tau, eps, omega, eps_tilde_norm=args.eps_tilde_norm)
        if terms["pitch_bound"] >= 1e-6 or omega == 0.0:
            break
        omega *= 0.5
    if terms["pitch_bound"] < 1e-6:
        print("infeasible: no admissible state pitch", file=_sys.stderr)
        return 1
    eta = gridabs.snap_state_pitch(model.domain, min(terms["pitch_bound"], eps))
    omega_t = gridabs.snap_input_pitch(model.input_box, omega) if model.m else ()
    abstraction = gridabs.build_abstraction(
        model, tau, eta, omega_t, eps=eps,
        eps_tilde=(args.eps_tilde_norm,) * model.p if args.eps_tilde_norm else (),
        max_cells=args.max_cells, workers=args.workers,
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dom = model.domain_array()
    x0 = tuple(gridabs.quantize(0.5 * dom[:, 1], eta))
    ubox = model.input_array()
    wbox = model.dist_array()
    reports = [
        mcvalidate.validate_moment_closeness(
            model, kit, x0, tau, n_paths=args.paths, seed=args.seed, steps=args.steps
        ),
        mcvalidate.validate_increment_bound(
            model, x0, tau, n_paths=args.paths, seed=args.seed, steps=args.steps
        ),
        mcvalidate.validate_delta_iss(
            model, kit, tau,
            a=0.5 * dom[:, 1], a2=0.5 * dom[:, 0],
            u=ubox[:, 1] if model.m else np.zeros(0),
            u2=ubox[:, 0] if model.m else np.zeros(0),
            w=0.3 * wbox[:, 1] if model.p else np.zeros(0),
            w2=0.3 * wbox[:, 0] if model.p else np.zeros(0),
            n_paths=args.paths, seed=args.seed, steps=args.steps,
        ),
        mcvalidate.validate_bisim_step(
            model, cert, kit, abstraction, eps,
            eps_tilde_norm=args.eps_tilde_norm,
            n_pairs=args.pairs,
            paths_per_pair=max(args.paths // args.pairs, 2),
            seed=args.seed, steps=args.steps,
        ),
    ]
    ok = True
    for rep in reports:
        rep.write_csv(out_dir / f"{rep.check}.csv")
        status = "pass" if rep.passed else "FAIL"
        worst = min((r.bound + 3 * r.std_error - r.empirical for r in rep.rows), default=math.nan)
        print(f"{rep.check}: {status} ({len(rep.rows)} rows, diverged {rep.diverged}, "
              f"worst margin {worst:.4g})")
        ok = ok and rep.passed
    return 0 if ok else 1


def cmd_report(args):
    out_dir = Path(args.out)
    files = sorted(p for p in out_dir.glob("*.csv") if p.name != "summary.csv")
    if not files:
        raise StochabsError(f"no CSV reports under {out_dir}")
    summary = [("file", "rows", "failures")]
    ok = True
    for path in files:
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:] if rows and rows[0] and rows[0][0] in ("check", "quantity") else rows
        fails = sum(1 for r in body if r and r[-1] == "FAIL")
        summary.append((path.name, len(body), fails))
        ok = ok and fails == 0
    with open(out_dir / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(summary)
    for row in summary:
        print(",".join(str(v) for v in row))
    return 0 if ok else 1


def _add_common(p, seed=True, out=False):
    if seed:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help="master random seed (default %(default)s)")
    if out:
        p.add_argument("--out", help="output directory for reports/artifacts")


def build_parser():
    width = lambda prog: argparse.HelpFormatter(prog, width=80)
    parser = argparse.ArgumentParser(
        prog="stochabs",
        formatter_class=width,
        description="Finite abstractions of contractive stochastic control systems: "
        "parameter synthesis, composition, bisimulation checking, Monte-Carlo validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lint", formatter_class=width,
                       help="parse a system/network file and sample-check its declared constants")
    p.add_argument("file", help="system or network description file")
    p.add_argument("--samples", type=int, default=2000, help="sample count (default %(default)s)")
    _add_common(p)
    p.set_defaults(fn=cmd_lint)

    p = sub.add_parser("certify", formatter_class=width,
                       help="verify a quadratic certificate and derive its gain functions")
    p.add_argument("file", help="system description file")
    p.add_argument("--mode", choices=("linear-exact", "sampled"), default="linear-exact",
                   help="verification mode (default %(default)s)")
    p.add_argument("--samples", type=int, default=4000, help="sample count (default %(default)s)")
    p.add_argument("--kappa", type=float, help="override: decay rate of the certificate")
    p.add_argument("--P", dest="p_matrix",
                   help="override: certificate matrix, rows ';'-separated, e.g. '2 0; 0 1'")
    p.add_argument("--tau", type=float, help="also report the noise-gap bound at fractions of tau")
    _add_common(p, out=True)
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser("params", formatter_class=width,
                       help="compute quantization parameters (term ledger / network synthesis)")
    p.add_argument("file", help="system or network description file")
    p.add_argument("--tau", type=float, help="sampling period (single-system mode)")
    p.add_argument("--eps", type=float, help="precision target (single-system mode)")
    p.add_argument("--omega", type=float, help="input pitch (default: input-box width)")
    p.add_argument("--eps-tilde-norm", type=float, default=0.0,
                   help="disturbance mismatch norm (default %(default)s)")
    p.add_argument("--samples", type=int, default=2000,
                   help="certificate sampling count (default %(default)s)")
    p.add_argument("--kappa", type=float, help="override: decay rate of the certificate")
    p.add_argument("--P", dest="p_matrix", help="override: certificate matrix")
    _add_common(p, out=True)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("abstract", formatter_class=width,
                       help="build and serialize finite abstractions")
    p.add_argument("file", help="system or network description file")
    p.add_argument("--tau", type=float, help="sampling period (single-system mode)")
    p.add_argument("--eta", type=float, help="state pitch target (single-system mode)")
    p.add_argument("--omega", type=float, help="input pitch target")
    p.add_argument("--eps", type=float, help="precision the pitch is validated against")
    p.add_argument("--eps-tilde-norm", type=float, default=0.0,
                   help="disturbance mismatch norm recorded in the file (default %(default)s)")
    p.add_argument("--force", action="store_true",
                   help="build even when parameters fail validation (warning emitted)")
    p.add_argument("--max-cells", type=int, default=250_000,
                   help="cap on state*input*disturbance cells (default %(default)s)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes; output is identical for any count (default %(default)s)")
    p.add_argument("--kappa", type=float, help="override: decay rate of the certificate")
    p.add_argument("--P", dest="p_matrix", help="override: certificate matrix")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_abstract)

    p = sub.add_parser("compose", formatter_class=width,
                       help="compose node abstractions over a network")
    p.add_argument("network", help="network description file")
    p.add_argument("abstractions", nargs="+", help="abstraction files to compose")
    _add_common(p, seed=False)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_compose)

    p = sub.add_parser("bisim", formatter_class=width,
                       help="check a relation or compute the largest disturbance bisimulation")
    p.add_argument("left", help="first abstraction file")
    p.add_argument("right", help="second abstraction file")
    p.add_argument("--check", help="relation file to verify (instead of computing)")
    p.add_argument("--eps", type=float, default=0.0, help="precision (default %(default)s)")
    p.add_argument("--eps-tilde", help="disturbance precisions, space separated")
    _add_common(p, seed=False, out=True)
    p.set_defaults(fn=cmd_bisim)

    p = sub.add_parser("validate", formatter_class=width,
                       help="run the four Monte-Carlo bound suites on a system")
    p.add_argument("file", help="system description file")
    p.add_argument("--tau", type=float, required=True, help="sampling period")
    p.add_argument("--eps", type=float, help="precision (default: above the computed floor)")
    p.add_argument("--eps-tilde-norm", type=float, default=0.0,
                   help="disturbance mismatch norm (default %(default)s)")
    p.add_argument("--paths", type=int, default=10_000,
                   help="Monte-Carlo path count (default %(default)s)")
    p.add_argument("--pairs", type=int, default=100,
                   help="sampled relation pairs for the step check (default %(default)s)")
    p.add_argument("--steps", type=int, default=2048,
                   help="Euler-Maruyama steps per sampling period (default %(default)s)")
    p.add_argument("--max-cells", type=int, default=250_000,
                   help="abstraction cell cap (default %(default)s)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes; output is identical for any count (default %(default)s)")
    p.add_argument("--kappa", type=float, help="override: decay rate of the certificate")
    p.add_argument("--P", dest="p_matrix", help="override: certificate matrix")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory for CSV reports")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("report", formatter_class=width,
                       help="merge CSV reports in a directory into summary.csv")
    _add_common(p, seed=False)
    p.add_argument("--out", required=True, help="directory holding the CSV reports")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StochabsError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
