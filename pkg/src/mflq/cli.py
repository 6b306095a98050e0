"""Command-line entry point ``mflq``.

Results go to standard output as JSON.  With ``--out-dir`` the same
results, any CSV tables and a ``manifest.json`` are written there.
Diagnostics are JSON lines on standard error.  Exit codes: 0 success,
2 invalid model, 3 solver failure, 4 a built-in check failed.
"""

import argparse
import datetime
import hashlib
import io
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import analytic_value, solve_adjoint
from .chain import write_paths_csv
from .errors import SolverError
from .model import (CH1, CH2, ExpDecaySignal, FeedbackLaw, ModelValidationError, decompose,
                    example_model, model_to_dict, read_model)
from .riccati import (DEFAULT_DELTAS, classify_solvability, delta_sweep, solve_limit_are,
                      solve_regularized_are, solve_shifted)
from .sim import (SimConfig, convexity_probe, estimate_cost, finite_horizon_oracle, simulate_paths,
                  summary, write_trajectories_csv)
from .stability import is_stabilizer

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(Exception):
    pass


def _diag(level, message, **extra):
    sys.stderr.write(json.dumps({"level": level, "message": message, **extra}, sort_keys=True) + "\n")


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


class _Run:
    """Collects outputs of one command and writes them with a manifest."""

    def __init__(self, args, raw=b""):
        self.args = args
        self.raw = raw
        self.files = {}
        self.tolerances = {"tol": args.tol}
        self.seeds = {"seed": args.seed}

    def add(self, name, text):
        self.files[name] = text

    def finish(self, result):
        sys.stdout.write(_dumps(result))
        if self.args.out_dir is None:
            return
        out = Path(self.args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.files.setdefault("result.json", _dumps(result))
        for name, text in self.files.items():
            (out / name).write_text(text, encoding="utf-8", newline="\n")
        manifest = {
            "command": ["mflq"] + list(self.args.argv),
            "model_sha256": hashlib.sha256(self.raw).hexdigest(),
            "tolerances": self.tolerances,
            "seeds": self.seeds,
            "version": __version__,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "outputs": sorted(self.files),
        }
        (out / "manifest.json").write_text(_dumps(manifest), encoding="utf-8", newline="\n")


def _load(args):
    model, hat, raw = read_model(args.model)
    return model, decompose(model), hat, raw


def _init_law(dm, hat):
    law = hat if hat is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    cert = is_stabilizer(dm, law)
    if not cert.is_stable:
        which = "supplied stabilizer" if hat is not None else "zero feedback"
        raise SolverError(f"{which} is {cert.status} (abscissa {cert.abscissa:.6g}); "
                          "supply a stabilizer {Theta1, Theta2} in the model file")
    return law


def _solve(dm, law, delta, tol):
    if delta > 0:
        return solve_regularized_are(dm, delta, law, tol)
    return solve_limit_are(dm, law, tol)


def _sweep_csv(sweep):
    buf = io.StringIO()
    sweep.write_csv(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    run.finish({"valid": True, "n": model.n, "m": model.m, "m0": model.m0,
                "homogeneous": model.homogeneous, "has_stabilizer": hat is not None})


def cmd_decompose(args):
    model, dm, hat, raw = _load(args)
    out = {"n": dm.n, "m": dm.m, "m0": dm.m0}
    for name in ("A", "B", "C", "D", "Q", "S", "R"):
        arr = getattr(dm, name)
        out[f"{name}1"], out[f"{name}2"] = arr[CH1].tolist(), arr[CH2].tolist()
    for name in ("b", "sigma", "q", "r"):
        for i, sig in enumerate(getattr(dm, name), start=1):
            out[f"{name}{i}"] = {"kappa": sig.kappa.tolist(), "values": sig.values.tolist()}
    _Run(args, raw).finish(out)


def cmd_check_stabilizer(args):
    model, dm, hat, raw = _load(args)
    law = hat if hat is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    cert = is_stabilizer(dm, law)
    _Run(args, raw).finish(cert.as_dict())


def cmd_solve_riccati(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    run.tolerances["delta"] = args.delta
    if args.shift:
        if hat is None:
            raise SolverError("--shift needs a stabilizer in the model file")
        sol = solve_shifted(dm, _init_law(dm, hat), args.delta, args.tol)
    else:
        sol = _solve(dm, _init_law(dm, hat), args.delta, args.tol)
    run.finish(sol.as_dict())


def _probe(args, dm):
    x = np.ones(dm.n) if args.x2 is None else np.asarray(args.x2, dtype=float)
    return args.regime, x


def cmd_sweep_delta(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    deltas = args.deltas or DEFAULT_DELTAS
    run.tolerances["deltas"] = list(deltas)
    sweep = delta_sweep(dm, deltas, _init_law(dm, hat), args.tol, _probe(args, dm))
    run.add("sweep.csv", _sweep_csv(sweep))
    for d, err in sweep.failures:
        _diag("warning", err, delta=d)
    run.finish({"table": sweep.table(), "blowup": sweep.blowup, "p_bounded": sweep.p_bounded,
                "monotone_violation": sweep.monotone_violation, "cauchy": sweep.cauchy,
                "failures": [{"delta": d, "error": e} for d, e in sweep.failures]})


def cmd_check_solvability(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    law = hat if hat is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    rep = classify_solvability(dm, law, args.deltas or DEFAULT_DELTAS, args.tol, _probe(args, dm))
    if rep.sweep is not None:
        run.add("sweep.csv", _sweep_csv(rep.sweep))
    run.finish(rep.as_dict())


def cmd_solve_adjoint(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    run.tolerances["delta"] = args.delta
    sol = _solve(dm, _init_law(dm, hat), args.delta, args.tol)
    adj = solve_adjoint(dm, sol)
    out = adj.as_dict()
    if adj.offsets is not None:
        x2 = np.ones(dm.n) if args.x2 is None else np.asarray(args.x2, dtype=float)
        out["value"] = analytic_value(dm, sol, adj, args.regime, x2)
    else:
        _diag("warning", "range condition fails: no feedforward offset")
    run.finish(out)


def _sim_config(args, dm):
    x2 = None if args.x2 is None else tuple(args.x2)
    return SimConfig(dt=args.dt, T=args.T, n_paths=args.n_paths, seed=args.seed, iota=args.regime,
                     x2=x2, eps_tail=args.eps_tail, record_every=args.record_every,
                     threads=args.threads)


def _sim_law(args, dm, hat):
    if args.law == "zero":
        return FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    if args.law == "stabilizer":
        if hat is None:
            raise SolverError("the model file has no stabilizer")
        return hat
    sol = _solve(dm, _init_law(dm, hat), args.delta, args.tol)
    return solve_adjoint(dm, sol).law(sol)


def cmd_simulate(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    cfg = _sim_config(args, dm)
    run.tolerances.update(dt=cfg.dt, eps_tail=cfg.eps_tail, delta=args.delta)
    run.seeds["n_paths"] = cfg.n_paths
    law = _sim_law(args, dm, hat)
    ens = simulate_paths(dm, law, cfg)
    est = estimate_cost(ens, args.delta)
    if cfg.record_every:
        buf = io.StringIO()
        write_trajectories_csv(ens, buf)
        run.add("trajectories.csv", buf.getvalue())
    if args.chain_csv:
        buf = io.StringIO()
        write_paths_csv(ens.chains, buf)
        run.add("chain.csv", buf.getvalue())
    run.finish(summary(ens, est, cfg))


def cmd_probe_convexity(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    cfg = _sim_config(args, dm)
    run.tolerances.update(dt=cfg.dt, eps=args.eps, delta=args.delta)
    base = hat if hat is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    rng = np.random.default_rng(args.seed)
    dirs = []
    for _ in range(args.n_directions):
        kap = rng.uniform(0.5, 2.0)
        v2 = ExpDecaySignal.single(kap, rng.normal(size=(dm.m0, dm.m)))
        dirs.append((ExpDecaySignal.zero(dm.m0, dm.m), v2))
    res = convexity_probe(dm, base, dirs, args.eps, cfg, args.delta)
    rows = [{"coefficient": r.coefficient, "stderr": r.stderr, "v_norm2": r.v_norm2,
             "curvature": r.curvature, "eps": r.eps} for r in res]
    run.finish({"directions": rows, "delta": args.delta})


def cmd_oracle_fh(args):
    model, dm, hat, raw = _load(args)
    run = _Run(args, raw)
    run.tolerances.update(delta=args.delta, T=args.T)
    P = finite_horizon_oracle(dm, args.delta, args.T, args.dt, tol=max(args.tol, 1e-12))
    out = {"delta": args.delta, "T": args.T, "P1": P[CH1].tolist(), "P2": P[CH2].tolist()}
    try:
        sol = _solve(dm, _init_law(dm, hat), args.delta, 1e-12)
        out["algebraic_gap"] = float(np.max(np.abs(P - sol.P)))
    except SolverError as exc:
        _diag("warning", f"no algebraic solution to compare: {exc}")
    run.finish(out)


def reproduce_example(tol=1e-12, check_tol=1e-8):
    """Run the built-in example end to end; returns ``(result, failed_checks)``."""
    dm = decompose(example_model())
    rep = classify_solvability(dm, tol=tol)
    rows, failed = [], []
    for row in rep.sweep.rows:
        d = row.delta
        P_cf = math.sqrt(d * d + d) - d
        T_cf = -P_cf / d
        sol = row.solution
        P2 = float(sol.P[CH2, 0, 0, 0]) if sol is not None else float("nan")
        T2 = float(sol.Theta[CH2, 0, 0, 0]) if sol is not None else float("nan")
        ok = abs(P2 - P_cf) <= check_tol and abs(T2 - T_cf) <= check_tol * max(1.0, abs(T_cf))
        if not ok:
            failed.append(f"delta={d:g}: closed form mismatch")
        rows.append({"delta": d, "P2": P2, "P2_closed_form": P_cf, "Theta2": T2,
                     "Theta2_closed_form": T_cf, "normTheta": row.norm_Theta, "match": ok})
    if rep.verdict != "finite_not_solvable":
        failed.append(f"verdict {rep.verdict}")
    if not rep.blowup:
        failed.append("no gain blow-up flagged")
    rr = rep.range_residual
    if rr is None or abs(float(np.max(rr)) - 0.5) > check_tol:
        failed.append("range residual at the limit candidate is not 1/2")
    result = {"table": rows, "verdict": rep.verdict, "blowup": rep.blowup,
              "range_residual": None if rr is None else np.asarray(rr).tolist(),
              "cause": rep.cause, "checks_passed": not failed, "failed": failed}
    return result, rep


def cmd_reproduce_example(args):
    run = _Run(args, json.dumps(model_to_dict(example_model()), sort_keys=True).encode())
    result, rep = reproduce_example(args.tol)
    run.add("example_model.json", _dumps(model_to_dict(example_model())))
    run.add("sweep.csv", _sweep_csv(rep.sweep))
    run.finish(result)
    if not result["checks_passed"]:
        raise CheckFailed("; ".join(result["failed"]))


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol", type=float, default=1e-12, help="solver tolerance (default 1e-12)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out-dir", default=None, help="write outputs and manifest.json here")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("model", help="model JSON file")

    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--regime", type=int, default=0, help="probe/start regime (0-based)")
    probe.add_argument("--x2", type=float, nargs="+", default=None, help="probe/start state (default ones)")

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--deltas", type=float, nargs="+", default=None,
                       help="decreasing regularization schedule (default 4^-k, k=0..10)")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--dt", type=float, default=1e-3)
    sim.add_argument("--T", type=float, default=None, help="horizon (default: sized from the decay rate)")
    sim.add_argument("--n-paths", type=int, default=1000)
    sim.add_argument("--eps-tail", type=float, default=1e-8)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--delta", type=float, default=0.0)

    p = argparse.ArgumentParser(prog="mflq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common, model], help="validate a model file")
    sub.add_parser("decompose", parents=[common, model], help="print the two channel models")
    sub.add_parser("check-stabilizer", parents=[common, model],
                   help="test the model's stabilizer (or zero feedback)")
    s = sub.add_parser("solve-riccati", parents=[common, model], help="solve the Riccati system")
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--shift", action="store_true", help="regularize in the shifted control")
    sub.add_parser("sweep-delta", parents=[common, model, probe, sweep], help="regularization sweep")
    sub.add_parser("check-solvability", parents=[common, model, probe, sweep], help="classify solvability")
    s = sub.add_parser("solve-adjoint", parents=[common, model, probe], help="solve the adjoint equations")
    s.add_argument("--delta", type=float, default=0.0)
    s = sub.add_parser("simulate", parents=[common, model, probe, sim], help="Monte Carlo cost estimate")
    s.add_argument("--law", choices=("optimal", "zero", "stabilizer"), default="optimal")
    s.add_argument("--record-every", type=int, default=0, help="write trajectories every k steps")
    s.add_argument("--chain-csv", action="store_true", help="write the regime paths")
    s = sub.add_parser("probe-convexity", parents=[common, model, probe, sim], help="second-difference probe")
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--n-directions", type=int, default=10)
    s.set_defaults(record_every=0)
    s = sub.add_parser("oracle-fh", parents=[common, model], help="finite-horizon Riccati oracle")
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--T", type=float, default=40.0)
    s.add_argument("--dt", type=float, default=0.01, help="initial step")
    sub.add_parser("reproduce-example", parents=[common], help="run the built-in example end to end")
    return p


_COMMANDS = {
    "validate": cmd_validate, "decompose": cmd_decompose, "check-stabilizer": cmd_check_stabilizer,
    "solve-riccati": cmd_solve_riccati, "sweep-delta": cmd_sweep_delta,
    "check-solvability": cmd_check_solvability, "solve-adjoint": cmd_solve_adjoint,
    "simulate": cmd_simulate, "probe-convexity": cmd_probe_convexity, "oracle-fh": cmd_oracle_fh,
    "reproduce-example": cmd_reproduce_example,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            _COMMANDS[args.command](args)
        for w in caught:
            _diag("warning", str(w.message))
    except ModelValidationError as exc:
        for err in exc.errors:
            _diag("error", err, kind="validation")
        return EXIT_INVALID
    except (SolverError, np.linalg.LinAlgError) as exc:
        _diag("error", str(exc), kind=type(exc).__name__)
        return EXIT_SOLVER
    except (ValueError, OSError) as exc:
        _diag("error", str(exc), kind="input")
        return EXIT_INVALID
    except CheckFailed as exc:
        _diag("error", str(exc), kind="check")
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
