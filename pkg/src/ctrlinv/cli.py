"""Command-line interface.

Exit codes: 0 on success, 2 for usage or validation errors, 3 for numerical
failures.  Errors are also written to stderr as one line of JSON.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import evalsim as ev
from . import fgram
from . import hiersim as hs
from . import sysmodel as sm
from .cplqr import default_weights, riccati_to_dict
from .errors import CtrlInvError, ModelFileError, NumericalError, ParameterError, StageError, ValidationError
from .inversion import controller_to_dict, design_pipeline, invert, reference_data

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind, message, stage=None):
    rec = {"error": kind, "message": str(message)}
    if stage is not None:
        rec["stage"] = stage
    sys.stderr.write(json.dumps(rec) + "\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _int_list(s):
    """``"1,2,5"`` or ``"1..n"`` style ranges (``n`` is resolved later)."""
    out = []
    for part in s.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.append((int(lo), hi.strip()))
        else:
            out.append(int(part))
    return out


def _resolve_list(items, n):
    vals = []
    for it in items:
        if isinstance(it, tuple):
            lo, hi = it
            hi = n if hi == "n" else int(hi)
            vals.extend(range(lo, hi + 1))
        else:
            vals.append(it)
    return vals


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _outdir(p):
    d = Path(p)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# model


def _load_params_file(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    for key in ("generators", "Y_real", "Y_imag"):
        if key not in d:
            raise ModelFileError(f"{path}: missing field '{key}'")
    gens = []
    for i, g in enumerate(d["generators"]):
        try:
            gens.append(sm.GeneratorParams(**{k: float(g[k]) for k in sm.GeneratorParams.__dataclass_fields__}))
        except KeyError as exc:
            raise ModelFileError(f"{path}: generators[{i}] missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ModelFileError(f"{path}: generators[{i}] has a non-numeric field ({exc})") from exc
    Y = np.array(d["Y_real"], dtype=float) + 1j * np.array(d["Y_imag"], dtype=float)
    return gens, sm.NetworkAdmittance(Y, len(gens)), d.get("disturbance")


def cmd_model(args):
    if args.action == "synth":
        model = sm.synth_random_model(args.n, n_d=args.n_d, seed=args.seed)
    else:
        params, adm, dist = _load_params_file(args.params)
        Ya, Yb = sm.kron_reduce(adm, [p.xdp for p in params])
        blocks = sm.linearize(params, Ya, Yb)
        model = sm.assemble(params, blocks, Bd=dist, meta={"provenance": str(args.params)})
    eigs = model.check()
    sm.save_model(model, args.out)
    n_zero, max_re, _ = sm.consensus_spectrum(model.A, eigs)
    print(json.dumps({"model": str(args.out), "n": model.n, "n_d": model.n_d, "zero_eigenvalues": n_zero, "max_real_nonzero": max_re}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# design / eval


def _load(args):
    return sm.load_model(args.model, check=True)


def cmd_design(args):
    model = _load(args)
    r = model.n if args.r is None else args.r
    if not 1 <= r <= model.n:
        raise ParameterError(f"--r must lie in 1..{model.n}, got {r}")
    W = default_weights(model)
    backend = "dense" if args.exact_gramian else args.backend
    ref = reference_data(model, W.Q, W.R, args.epsilon, args.kappa, backend, 0) if backend == "dense" else None
    ctrl, rep = design_pipeline(
        model, W.Q, W.R, band=args.omega, kappa=args.kappa, r=r, eps=args.epsilon, seed=args.seed,
        restarts=args.restarts, max_iter=args.max_iter, init="random" if args.random_init else "kmeans++",
        backend=backend, reference=ref,
    )
    if ref is not None and rep.consensus_stable:
        ev.evaluate_design(model, ctrl, rep, ref, W.Q, exact=args.exact_gramian, gamma_grid=args.grid_points)
    rep.links = hs.link_budget(model.n, r)
    out = _outdir(args.out_dir)
    _write_json(out / "controller.json", controller_to_dict(ctrl, rep))
    _write_json(out / "report.json", rep.to_dict())
    _write_json(out / "plan.json", cl.plan_to_dict(ctrl.plan, objective=rep.objective_trace[-1], seed=args.seed, iterations=len(rep.objective_trace)))
    if ref is not None:
        gram = fgram.lowrank_gramian(ref.spectrum, model.Bd, args.omega, args.kappa, skip=ref.pair.v0)
        fgram.save_gramian(gram, out / "gramian.json", out / "spectrum.csv", args.omega)
        _write_json(out / "reference.json", riccati_to_dict(ref.solution, model.A, model.B))
    print(json.dumps({"out_dir": str(out), "r": r, "error": rep.error, "xi_kappa": rep.xi_kappa, "consensus_stable": rep.consensus_stable}))
    return EXIT_OK


def _load_controller(path, model):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        clusters = [[j - 1 for j in c] for c in d["plan"]["clusters"]]
        plan = cl.build_projection(clusters, np.array(d["plan"]["w"]))
        Xt = np.array(d["X_tilde"], dtype=float)
        K_hat = np.array(d["K_hat"], dtype=float)
        eps = float(d["epsilon"])
    except KeyError as exc:
        raise ModelFileError(f"{path}: missing field {exc}") from exc
    if plan.n != model.n or K_hat.shape != (model.n, 4 * model.n):
        raise ModelFileError(f"{path}: controller does not match the model dimensions")
    ctrl = invert(Xt, plan, model.B, default_weights(model).R, eps)
    if not np.allclose(ctrl.K_hat, K_hat, rtol=1e-8, atol=1e-10 * max(1.0, np.abs(K_hat).max())):
        raise ModelFileError(f"{path}: K_hat is inconsistent with X_tilde and the plan")
    return ctrl


def cmd_eval(args):
    model = _load(args)
    W = default_weights(model)
    ctrl = _load_controller(args.controller, model)
    ref = reference_data(model, W.Q, W.R, ctrl.epsilon)
    C = ev._default_C(model)
    out = _outdir(args.out_dir)
    res = {"n": model.n, "r": ctrl.plan.r, "omega": args.omega}
    Ahat = ref.A_eps - ref.G @ ctrl.X_hat
    verdict = ev.closed_loop_summary(model.A - model.B @ ctrl.K_hat)
    res["consensus_stable"] = verdict["consensus_stable"]
    if verdict["consensus_stable"]:
        res["error"] = ev.matching_error(model, ref.solution.K, ctrl.K_hat, model.Bd, C, args.omega, ctrl.epsilon, ref.pair)
        res["gamma"], res["gamma_converged"] = ev.gamma_estimate(Ahat, ref.G, C, args.omega, args.grid_points)
    A_cl = model.A - model.B @ ctrl.K_hat
    t, Y, info = ev.simulate_impulse(ev.ClosedLoopSystem(A_cl, model.Bd[:, :1], C), args.horizon, args.dt)
    ev.write_csv(out / "impulse.csv", ["t"] + [f"y{i + 1}" for i in range(Y.shape[1])], np.column_stack([t, Y]).tolist())
    res["impulse"] = info
    _write_json(out / "eval.json", res)
    print(json.dumps(res))
    return EXIT_OK


def cmd_sweep(args):
    model = _load(args)
    r_list = _resolve_list(args.r, model.n)
    for r in r_list:
        if not 1 <= r <= model.n:
            raise ParameterError(f"r value {r} out of range 1..{model.n}")
    rows = ev.sweep_r(model, r_list, band=args.omega, kappa=args.kappa, eps=args.epsilon, seed=args.seed,
                      restarts=args.restarts, max_iter=args.max_iter, workers=args.workers)
    rows = [(r, xi, err, int(cons), t) for r, xi, err, cons, t in rows]
    ev.write_csv(args.out, ["r", "xi_kappa", "error", "consensus", "time_ms"], rows)
    print(json.dumps({"out": str(args.out), "rows": len(rows)}))
    return EXIT_OK


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",")]
    rows, slopes = ev.bench_scaling(sizes, r=args.r, kappa=args.kappa, seed=args.seed, repeats=args.repeats,
                                    band=args.omega, backend=args.backend)
    stages = list(rows[0][3])
    table = [(n, tr, th, th / tr, *[st[k] for k in stages]) for n, tr, th, st in rows]
    ev.write_csv(args.out, ["n", "t_ref_ms", "t_hat_total_ms", "ratio"] + [f"t_{k}_ms" for k in stages], table)
    print(json.dumps({"out": str(args.out), "slopes": slopes}))
    return EXIT_OK


def cmd_hier(args):
    model = _load(args)
    ctrl = _load_controller(args.controller, model)
    rng = np.random.default_rng(args.seed)
    rep = hs.hierarchy_report(ctrl, rng.standard_normal((args.states, 4 * model.n)), args.out)
    print(json.dumps(rep))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _design_flags(p):
    p.add_argument("--kappa", type=_positive_int, default=4)
    p.add_argument("--omega", type=_positive_float, default=2.0, help="band edge in rad/s")
    p.add_argument("--epsilon", type=_positive_float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=_positive_int, default=10)
    p.add_argument("--max-iter", type=_positive_int, default=100)


def build_parser():
    p = _Parser(prog="ctrlinv", description="Clustering-based control inversion for wide-area damping control.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pm = sub.add_parser("model", help="synthesize or build a linear model")
    msub = pm.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ps = msub.add_parser("synth")
    ps.add_argument("--n", type=int, required=True)
    ps.add_argument("--n-d", type=_positive_int, default=None)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", default="model.json")
    pb = msub.add_parser("build")
    pb.add_argument("--params", required=True, help="JSON with generators, Y_real, Y_imag")
    pb.add_argument("--out", default="model.json")

    pd = sub.add_parser("design", help="design the clustered controller")
    pd.add_argument("--model", required=True)
    pd.add_argument("--r", type=int, default=None)
    _design_flags(pd)
    pd.add_argument("--exact-gramian", action="store_true", help="evaluate with the exact band-limited Gramian")
    pd.add_argument("--random-init", action="store_true", help="seed Lloyd with random rows instead of k-means++")
    pd.add_argument("--backend", choices=["dense", "arnoldi"], default="dense")
    pd.add_argument("--grid-points", type=_positive_int, default=64)
    pd.add_argument("--out-dir", default="design")

    pe = sub.add_parser("eval", help="evaluate a controller")
    pe.add_argument("--model", required=True)
    pe.add_argument("--controller", required=True)
    pe.add_argument("--omega", type=_positive_float, default=2.0)
    pe.add_argument("--grid-points", type=_positive_int, default=64)
    pe.add_argument("--horizon", type=_positive_float, default=20.0)
    pe.add_argument("--dt", type=_positive_float, default=1e-3)
    pe.add_argument("--out-dir", default="eval")

    pw = sub.add_parser("sweep", help="matching error over a range of r")
    pw.add_argument("--model", required=True)
    pw.add_argument("--r", type=_int_list, default=[(1, "n")], help='e.g. "1..n" or "1,2,5"')
    _design_flags(pw)
    pw.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    pw.add_argument("--out", default="sweep.csv")

    pn = sub.add_parser("bench", help="timing of reference vs clustered design")
    pn.add_argument("--sizes", default="50,100,200")
    pn.add_argument("--r", type=_positive_int, default=4)
    pn.add_argument("--kappa", type=_positive_int, default=4)
    pn.add_argument("--omega", type=_positive_float, default=2.0)
    pn.add_argument("--seed", type=int, default=0)
    pn.add_argument("--repeats", type=_positive_int, default=3)
    pn.add_argument("--backend", choices=["dense", "arnoldi"], default="arnoldi")
    pn.add_argument("--out", default="bench.csv")

    ph = sub.add_parser("hier", help="simulate the hierarchical implementation")
    ph.add_argument("--model", required=True)
    ph.add_argument("--controller", required=True)
    ph.add_argument("--states", type=_positive_int, default=100)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", default="hier.json")
    return p


COMMANDS = {"model": cmd_model, "design": cmd_design, "eval": cmd_eval, "sweep": cmd_sweep, "bench": cmd_bench, "hier": cmd_hier}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        code = EXIT_USAGE if isinstance(exc.cause, ValidationError) else EXIT_NUMERIC
        _emit_error(type(exc.cause).__name__, exc.cause, stage=exc.stage)
        return code
    except ValidationError as exc:
        _emit_error(type(exc).__name__, exc)
        return EXIT_USAGE
    except NumericalError as exc:
        _emit_error(type(exc).__name__, exc)
        return EXIT_NUMERIC
    except CtrlInvError as exc:  # pragma: no cover - no other subclasses today
        _emit_error(type(exc).__name__, exc)
        return EXIT_NUMERIC
    except OSError as exc:
        _emit_error("IOError", exc)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
