"""Command-line experiment runner.

Every subcommand reads a TOML config, writes CSV/JSON outputs into ``--out``
and finishes with ``manifest.json`` listing each file's sha256 and the
pass/fail of each check. Exit status: 0 all checks passed, 1 a check failed,
2 usage or config error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, acceptance
from .analysis import (boundary_modulus, counterexample_suite, fit_rate, holder_exponent,
                       interior_scaling, mollified_sequence, oscillating_sequence,
                       stability_experiment)
from .config import CONFIG_FORMAT, ConfigError, ExperimentConfig, load_config
from .control_problem import ControlSet, Domain, ProblemSpec
from .errors import ArgumentError, DataError
from .expr import compile_expression
from .grid import Grid
from .hjb_elliptic import policy_iteration, solve_discounted
from .hjb_parabolic import (check_semigroup, joint_modulus, regularization_probe,
                            semigroup_apply)
from .mc_value import (Intermediate, check_dpp, value_discounted_mc, value_elliptic_mc,
                       value_parabolic_mc)
from .presets import expression_field, get_field, terminal_function
from .sde_engine import FeedbackPolicy

log = logging.getLogger("ldcontrol")

TIMING_KEYS = {"wall_time", "runtime"}


class UsageError(Exception):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _split_timing(obj, path="", out=None):
    """Copy of ``obj`` without timing keys; the timings are collected into ``out``."""
    if out is None:
        out = {}
    if isinstance(obj, dict):
        clean = {}
        for k, v in obj.items():
            if k in TIMING_KEYS:
                out[f"{path}{k}"] = v
            else:
                clean[k] = _split_timing(v, f"{path}{k}.", out)[0]
        return clean, out
    if isinstance(obj, list):
        return [_split_timing(v, f"{path}{i}.", out)[0] for i, v in enumerate(obj)], out
    return obj, out


class Run:
    """Output directory bookkeeping for one subcommand."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.checks: dict[str, bool] = {}
        self.timing: dict = {}

    def json(self, name: str, data) -> Path:
        clean, timing = _split_timing(_jsonable(data))
        self.timing.update({f"{name}:{k}": v for k, v in timing.items()})
        path = self.out / name
        path.write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")
        return path

    def table(self, name: str, rows: list[dict]) -> Path:
        path = self.out / name
        rows = [_split_timing(_jsonable(r))[0] for r in rows]
        cols = list(dict.fromkeys(k for r in rows for k in r))
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([json.dumps(r.get(c)) if isinstance(r.get(c), (list, dict))
                            else r.get(c) for c in cols])
        return path

    def check(self, name: str, ok) -> None:
        self.checks[name] = bool(ok)
        log.info("check %s: %s", name, "pass" if ok else "FAIL")


def _files(out: Path) -> dict:
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p != out / "manifest.json"}


def manifest_without_timing(path) -> dict:
    m = json.loads(Path(path).read_text())
    m.pop("wall_time", None)
    m.pop("timing", None)
    return m


# --------------------------------------------------------------------------
# Building problems from the config
# --------------------------------------------------------------------------


def build_field(cfg: ExperimentConfig):
    pb = cfg.problem
    if pb.expression is not None:
        e = pb.expression
        controls = ControlSet.from_params(e.controls, labels=e.labels)
        return expression_field(pb.dim, e.drift, e.diffusion, e.running_cost, e.terminal_cost,
                                e.delta, controls, e.dominator, e.g_bound)
    params = dict(pb.params)
    params.setdefault("dim", pb.dim)
    return get_field(pb.preset, **params)


def build_domain(cfg: ExperimentConfig, dim: int) -> Domain:
    db = cfg.domain
    if db.shape == "ball":
        return Domain.ball(db.center or [0.0] * dim, db.radius)
    if db.shape == "box":
        if db.lo is None or db.hi is None:
            raise ArgumentError("box domains need lo and hi")
        return Domain.box(db.lo, db.hi)
    return Domain.whole_space(dim)


def build_box(cfg: ExperimentConfig, dim: int, default: float = 2.0) -> Grid:
    g = cfg.grid
    lo = g.lo if g.lo is not None else [-default] * dim
    hi = g.hi if g.hi is not None else [default] * dim
    return Grid.box(lo, hi, g.h)


def _terminal(cfg_terminal, field):
    if cfg_terminal is None:
        return field.f
    try:
        return terminal_function(cfg_terminal, field.dim)
    except ArgumentError:
        return compile_expression(cfg_terminal, field.dim)


def _constant_policies(field) -> list[FeedbackPolicy]:
    return [FeedbackPolicy.constant(k, lab) for k, lab in enumerate(field.controls.labels)]


def _elliptic(cfg, field):
    domain = build_domain(cfg, field.dim)
    if not domain.bounded:
        raise ArgumentError("this subcommand needs a bounded domain")
    spec = ProblemSpec.elliptic(field, domain)
    rep = policy_iteration(spec, Grid.for_domain(domain, cfg.grid.h), cfg.solver.tol,
                           cfg.solver.max_outer)
    return spec, rep


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_solve_elliptic(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    spec, rep = _elliptic(cfg, field)
    rep.solution.to_csv(run.out / "value.csv")
    rep.policy.to_csv(run.out / "policy.csv")
    summary = rep.summary()
    summary["wall_time"] = rep.wall_time
    run.check("converged", rep.converged)
    if cfg.problem.preset == "laplacian" and spec.domain.shape == "ball":
        g = rep.solution.grid
        X = g.coords(g.interior) - np.asarray(spec.domain.center)
        R = spec.domain.radius
        exact = (R ** 2 - (X ** 2).sum(axis=1)) / field.dim
        err = float(np.abs(rep.solution.values[g.interior] - exact).max())
        summary["closed_form_error"] = err
        run.check("closed_form", err <= 5e-3)
    run.json("report.json", summary)


def cmd_solve_discounted(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    spec = ProblemSpec.discounted(field, cfg.discounted.rho)
    rep = solve_discounted(spec, build_box(cfg, field.dim), cfg.solver.tol,
                           cfg.solver.max_outer)
    rep.solution.to_csv(run.out / "value.csv")
    summary = rep.summary()
    summary["wall_time"] = rep.wall_time
    run.json("report.json", summary)
    run.check("converged", rep.converged)
    run.check("truncation_monotone", rep.extra["truncation_monotone"])


def cmd_solve_parabolic(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    pc = cfg.parabolic
    res = semigroup_apply(field, _terminal(pc.terminal, field), pc.t, build_box(cfg, field.dim),
                          pc.dt, mode=cfg.solver.mode, converged=cfg.solver.converged)
    res.save(run.out / "run")
    run.check("policies_per_step", res.policies is not None
              and res.policies.shape[0] == res.n_steps)
    run.json("report.json", {"t": res.t, "dt": res.dt, "n_steps": res.n_steps, **res.stats,
                             "trusted_nodes": int(res.trusted.sum())})
    if pc.joint_lags:
        L = pc.lipschitz
        jm = joint_modulus(field, res.terminal, pc.t, res.output.grid, pc.dt, pc.joint_lags,
                           f_modulus=None if L is None else (lambda rho: L * rho))
        run.table("joint_modulus.csv", jm["rows"])
        run.json("joint_fit.json", jm["fit"])


def cmd_value_mc(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    mc = cfg.mc
    pols = _constant_policies(field)
    domain = build_domain(cfg, field.dim)
    rows = []
    for i, x0 in enumerate(mc.x0):
        if field.discount is not None or cfg.discounted.rho is not None:
            spec = ProblemSpec.discounted(field, cfg.discounted.rho)
            est = value_discounted_mc(spec, pols, x0, mc.dt, mc.n_paths, seed,
                                      horizon_cut=cfg.discounted.horizon_cut,
                                      tail_tol=cfg.discounted.tail_tol, threads=threads,
                                      antithetic=mc.antithetic)
        elif domain.bounded:
            est = value_elliptic_mc(ProblemSpec.elliptic(field, domain), pols, x0, mc.dt,
                                    mc.n_paths, seed, threads=threads, antithetic=mc.antithetic)
        else:
            spec = ProblemSpec.finite_horizon(field, cfg.parabolic.t)
            est = value_parabolic_mc(spec, pols, cfg.parabolic.t, x0, mc.dt, mc.n_paths, seed,
                                     threads=threads, antithetic=mc.antithetic)
        est.table_csv(run.out / f"table_{i}.csv")
        rows.append({"x0": list(x0), **est.summary()})
        run.check(f"complete_{i}", est.valid)
    run.json("values.json", rows)


def cmd_check_dpp(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    dp, mc = cfg.dpp, cfg.mc
    pols = _constant_policies(field)
    domain = build_domain(cfg, field.dim)
    reports = []
    for i, x0 in enumerate(mc.x0):
        if domain.bounded:
            spec, rep = _elliptic(cfg, field)
            inter = {"zero": Intermediate.zero(), "time": Intermediate.time(dp.s),
                     "exit": Intermediate.exit(Domain.ball(list(x0), dp.radius))}[dp.intermediate]
            pde = rep.solution
        else:
            spec = ProblemSpec.finite_horizon(field, dp.horizon)
            inter = Intermediate.time(dp.s)
            pde = semigroup_apply(field, field.f, dp.horizon - dp.s, build_box(cfg, field.dim),
                                  cfg.parabolic.dt, store_policies=False).output
        res = check_dpp(spec, x0, inter, pols, dp.tol, pde, dt=mc.dt, n_paths=mc.n_paths,
                        seed=seed, threads=threads)
        reports.append({"x0": list(x0), **res})
        run.check(f"dpp_{i}", res["pass"])
    run.json("dpp.json", reports)


def cmd_check_semigroup(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    sg = cfg.semigroup
    res = check_semigroup(field, _terminal(sg.terminal, field), sg.t, sg.s,
                          build_box(cfg, field.dim), sg.dt, c_tol=sg.c_tol)
    run.json("semigroup.json", res)
    run.check("semigroup", res["pass"])


def cmd_estimate_holder(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    hb = cfg.holder
    if hb.source == "semigroup":
        rows = regularization_probe(field, terminal_function(hb.terminal, field.dim), hb.times,
                                    build_box(cfg, field.dim), hb.dt, hb.scales)
        run.table("holder.csv", rows)
        run.json("fits.json", rows)
        return
    spec, rep = _elliptic(cfg, field)
    r = holder_exponent(rep.solution, None, hb.scales)
    r.to_csv(run.out / "holder.csv")
    R = spec.domain.radius if spec.domain.shape == "ball" else 1.0
    scaling = interior_scaling(rep.solution, spec.domain.center or [0.0] * field.dim,
                               [R / 4, R / 2, 3 * R / 4], hb.scales)
    run.json("fits.json", {"fit": r.fit(), "interior_scaling": scaling})


def cmd_boundary_modulus(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    spec, rep = _elliptic(cfg, field)
    bb = cfg.boundary
    L = bb.lipschitz
    res = boundary_modulus(rep.solution, field.f, spec.domain, bb.anchors, bb.radii,
                           None if L is None else (lambda rho: L * rho))
    run.table("boundary.csv", res["table"])
    run.json("fit.json", res["fit"])
    env = res["envelope"]
    run.check("non_decreasing", all(b >= a for a, b in zip(env, env[1:])))


def cmd_stability(cfg, run: Run, seed, threads):
    field = build_field(cfg)
    sb = cfg.stability
    domain = build_domain(cfg, field.dim)
    if sb.kind == "mollify":
        fields = mollified_sequence(field, sb.ms)
    elif sb.kind == "oscillate":
        fields = oscillating_sequence(field, sb.ms, sb.amplitude)
    else:
        fields = [field] * len(sb.ms)
    rep = stability_experiment(ProblemSpec.elliptic(field, domain), fields,
                               Grid.for_domain(domain, cfg.grid.h), tol=cfg.solver.tol,
                               labels=[f"m={m}" for m in sb.ms], ms=list(sb.ms))
    run.table("stability.csv", rep.rows())
    summary = rep.summary()
    if sb.kind == "oscillate":
        summary["rate"] = fit_rate(sb.ms[:-1], rep.diff_final[:-1])
    run.json("stability.json", summary)
    run.check("cauchy", rep.cauchy)


def cmd_counterexample(cfg, run: Run, seed, threads):
    cb = cfg.counterexample
    rep = counterexample_suite(cb.d, cb.eps, cb.truncations, cb.dt, cb.n_paths, seed,
                               horizon=cb.horizon, threads=threads)
    run.table("simulations.csv", rep["simulations"])
    run.json("counterexample.json", rep)
    run.check("escape_monotone", rep["escape_monotone"])
    run.check("confinement_monotone", rep["confinement_monotone"])


def cmd_verify_all(cfg, run: Run, seed, threads):
    ab = cfg.acceptance

    def progress(res):
        print(f"criterion {res['id']:>2} {res['name']}: {'PASS' if res['pass'] else 'FAIL'}",
              flush=True)
    results = acceptance.run_all(ab.profile, ab.only, progress, seed=seed)
    run.json("acceptance.json", results)
    run.table("acceptance.csv", [{"id": r["id"], "name": r["name"], "pass": r["pass"],
                                  "threshold": r["threshold"]} for r in results])
    for r in results:
        run.check(f"criterion_{r['id']}", r["pass"])


COMMANDS = {
    "solve-elliptic": cmd_solve_elliptic,
    "solve-discounted": cmd_solve_discounted,
    "solve-parabolic": cmd_solve_parabolic,
    "value-mc": cmd_value_mc,
    "check-dpp": cmd_check_dpp,
    "check-semigroup": cmd_check_semigroup,
    "estimate-holder": cmd_estimate_holder,
    "boundary-modulus": cmd_boundary_modulus,
    "stability": cmd_stability,
    "counterexample": cmd_counterexample,
    "verify-all": cmd_verify_all,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldcontrol", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML experiment config (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the config's mc.seed")
    p.add_argument("--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        if args.config:
            cfg, chash = load_config(args.config)
        else:
            cfg = ExperimentConfig()
            chash = hashlib.sha256(b"").hexdigest()
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        seed = cfg.mc.seed if args.seed is None else args.seed
        out = Path(args.out)
        r = Run(out)
        COMMANDS[args.command](cfg, r, seed, args.threads)
    except (ConfigError, ArgumentError, DataError, UsageError, FileNotFoundError) as exc:
        print(f"ldcontrol: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"ldcontrol: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    manifest = {"tool": "ldcontrol", "version": __version__, "config_format": CONFIG_FORMAT,
                "config_hash": chash, "command": args.command, "seed": seed,
                "threads": args.threads, "files": _files(out), "checks": r.checks,
                "pass": all(r.checks.values()), "timing": r.timing,
                "wall_time": time.perf_counter() - t0}
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True)
                                       + "\n")
    for name, ok in r.checks.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return 0 if manifest["pass"] else 1


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
