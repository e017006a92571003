"""Command-line front end: solves, diagnostics, and versioned run artifacts.

Every subcommand resolves one configuration, writes its outputs into a
directory keyed by the config hash, and finishes with a manifest recording
the resolved config, the seed, per-file checksums and phase timings.  Exit
codes are a stable contract for CI:

    0   success (solve: Converged; checks: every criterion passed)
    1   a criterion failed
    2   Picard stopped at the iteration cap
    3   Picard diverged
    64  configuration or usage error (the message names the offending key)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .coefficients import coefficient_set_for
from .config import (ConfigError, PRESETS, RunConfig, config_hash,
                     parse_config_text, resolve_config)
from .fields import SpaceTimeField, grid_nodes, write_fdns1
from .feynman_kac import gradient_bound_check
from .fixedpoint import CONVERGED, DIVERGED, MAX_ITERATIONS, picard_solve
from .navier_stokes import (divergence_evolution_residual,
                            divergence_residual, representation_u,
                            taylor_green_field, validate_scenario)
from .oracles import cole_hopf_oracle, mild_oracle
from .rng import RngContract
from .sde import TimeMesh, flow_compose_check

EXIT_OK = 0
EXIT_CRITERION = 1
EXIT_MAX_ITERATIONS = 2
EXIT_DIVERGED = 3
EXIT_CONFIG = 64

_VERDICT_EXIT = {CONVERGED: EXIT_OK, MAX_ITERATIONS: EXIT_MAX_ITERATIONS,
                 DIVERGED: EXIT_DIVERGED}


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors obey the exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _fmt(value) -> str:
    """One CSV cell: decimal, 17 significant digits for floats."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class _RunDir:
    """Output directory for one (command, config) pair, plus its manifest."""

    def __init__(self, cfg: RunConfig, command: str, out_base: str,
                 force: bool):
        self.cfg = cfg
        self.command = command
        self.hash = config_hash(cfg)
        self.path = os.path.join(out_base,
                                 f"{cfg.preset}-{self.hash[:8]}", command)
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}

        manifest_path = os.path.join(self.path, "manifest.json")
        if os.path.exists(manifest_path) and not force:
            with open(manifest_path) as fh:
                old = json.load(fh)
            if old.get("config_sha256") != self.hash:
                raise ConfigError(
                    f"output directory {self.path} holds a run with a "
                    f"different config (hash {old.get('config_sha256')!r}); "
                    f"use --force to overwrite")
        os.makedirs(self.path, exist_ok=True)

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def add(self, name: str) -> None:
        self.outputs[name] = _sha256_file(self.file(name))

    def csv(self, name: str, header, rows) -> None:
        _write_csv(self.file(name), header, rows)
        self.add(name)

    def field(self, name: str, field: SpaceTimeField) -> None:
        write_fdns1(field, self.file(name))
        self.add(name)

    def finish(self, seed: int) -> None:
        manifest = {
            "artifact": "fdns",
            "version": __version__,
            "command": self.command,
            "config": dict(line.split(" = ", 1)
                           for line in self.cfg.to_lines()),
            "config_sha256": self.hash,
            "seed": int(seed),
            "outputs": self.outputs,
            "timings_s": {k: round(v, 3) for k, v in self.timings.items()},
        }
        tmp = self.file("manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.file("manifest.json"))


class _Phase:
    """Context manager recording one phase's wall-clock time."""

    def __init__(self, rundir: _RunDir, name: str):
        self.rundir = rundir
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.rundir.timings[self.name] = time.perf_counter() - self.t0
        return False


def _load_config(args, preset: str | None = None) -> RunConfig:
    raw = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        raw = parse_config_text(text)
    if preset is not None:
        raw["preset"] = preset
    return resolve_config(raw, seed=args.seed)


def _out_base(args) -> str:
    return args.out or os.environ.get("FDNS_OUT") or "runs"


def _report_rows_exit(rundir, rows, seed) -> int:
    """Write report rows, print them, finish the manifest, return the code."""
    rundir.csv("validation_report.csv",
               ("criterion", "value", "tolerance", "pass"),
               [(c, v, t, p) for c, v, t, p in rows])
    rundir.finish(seed)
    ok = True
    for criterion, value, tolerance, passed in rows:
        ok = ok and passed
        print(f"  {criterion}: {value:.6g} vs {tolerance:.6g} "
              f"[{'pass' if passed else 'FAIL'}]")
    return EXIT_OK if ok else EXIT_CRITERION


# ---------------------------------------------------------------------------
# subcommands


def _trace_header(state) -> list:
    lams = sorted(state.weighted_gaps)
    return (["k", "gap"]
            + [f"weighted_gap_lambda{lam:g}" for lam in lams]
            + ["max_node_se"])


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    rundir = _RunDir(cfg, "solve", _out_base(args), args.force)
    cs = coefficient_set_for(cfg)

    with _Phase(rundir, "picard"):
        result = picard_solve(cs, cfg, threads=args.threads)
    state = result.state
    print(f"picard: {state.verdict} after {state.k} iteration(s), "
          f"final gap {state.gaps[-1]:.3e}" if state.gaps else
          f"picard: {state.verdict} after {state.k} iteration(s)")

    bundle = None
    if state.verdict != DIVERGED:
        with _Phase(rundir, "representation"):
            bundle = representation_u(
                cs, cfg, result, threads=args.threads,
                force=args.force or state.verdict != CONVERGED)
        print(f"representation: consistency {bundle.consistency:.3e} "
              f"(allowance {bundle.consistency_allowance:.3e})")

    with _Phase(rundir, "write"):
        rundir.field("drift.fdns1", result.drift_field)
        if bundle is not None:
            rundir.field("velocity.fdns1", bundle.u)
        rundir.csv("picard_trace.csv", _trace_header(state),
                   state.trace_rows())
    rundir.finish(cfg.seed)
    return _VERDICT_EXIT[state.verdict]


def cmd_validate(args) -> int:
    cfg = _load_config(args, preset=args.scenario)
    rundir = _RunDir(cfg, "validate", _out_base(args), args.force)

    with _Phase(rundir, "scenario"):
        try:
            report = validate_scenario(cfg, threads=args.threads,
                                       force=args.force)
        except RuntimeError as exc:
            print(f"validation aborted: {exc}", file=sys.stderr)
            return EXIT_CRITERION

    with _Phase(rundir, "write"):
        if report.solution is not None:
            rundir.field("solution.fdns1", report.solution.u)
        if report.reference is not None:
            rundir.field("reference.fdns1", report.reference)
        profiles = report.profiles
        rundir.csv("error_profile.csv", list(profiles),
                   zip(*(np.asarray(col).tolist()
                         for col in profiles.values())))
    print(f"scenario {report.scenario}:")
    return _report_rows_exit(rundir, report.csv_rows(), cfg.seed)


def cmd_oracle(args) -> int:
    cfg = _load_config(args)
    cs = coefficient_set_for(cfg)
    rows = []

    if cfg.dimension == 1:
        rundir = _RunDir(cfg, "oracle", _out_base(args), args.force)
        u0 = lambda x: cs.eval_u0(x)
        with _Phase(rundir, "oracles"):
            ch, _ = cole_hopf_oracle(u0, cfg.kappa, cfg.T, cfg.grid_n,
                                     cfg.grid_M)
            mild, info = mild_oracle(u0, cfg.kappa, cfg.T, cfg.grid_n,
                                     cfg.grid_M, d=1)
            # the cross-validation gap is pinned at the documented grid
            ch_f, _ = cole_hopf_oracle(u0, cfg.kappa, cfg.T, 128, 100)
            mild_f, _ = mild_oracle(u0, cfg.kappa, cfg.T, 128, 100, d=1)
        gap = float(np.max(np.abs(ch_f.values - mild_f.values)))
        rows.append(("cole-hopf-vs-mild-sup-gap", gap, 1e-3, gap <= 1e-3))
        converged = bool(info["converged"])
        rows.append(("mild-iteration-converged", 0.0 if converged else 1.0,
                     0.0, converged))
        with _Phase(rundir, "write"):
            rundir.field("cole_hopf.fdns1", ch)
            rundir.field("mild.fdns1", mild)
    elif cfg.preset in ("taylor-green", "taylor-green-nopressure"):
        rundir = _RunDir(cfg, "oracle", _out_base(args), args.force)
        A = 0.5 * cfg.amplitude
        with _Phase(rundir, "oracles"):
            exact = taylor_green_field(A, cfg.kappa, cfg.T, cfg.grid_n,
                                       cfg.grid_M)
        nodes = grid_nodes(cs.domain, cfg.grid_n)
        gap0 = float(np.max(np.abs(exact.values[0] - cs.eval_u0(nodes))))
        rows.append(("initial-row-matches-data", gap0, 0.0, gap0 <= 0.0))
        with _Phase(rundir, "write"):
            rundir.field("exact.fdns1", exact)
    else:
        print(f"no deterministic oracle for preset '{cfg.preset}'; "
              f"use the validate subcommand", file=sys.stderr)
        return EXIT_CONFIG

    print("oracle checks:")
    return _report_rows_exit(rundir, rows, cfg.seed)


def _smoothed_step(sharpness: float = 25.0):
    """Sign-like profile in the first coordinate, and its exact gradient."""

    def f(x):
        return np.tanh(sharpness * np.sin(2.0 * np.pi * x[..., 0]))

    def grad(x):
        s = np.sin(2.0 * np.pi * x[..., 0])
        g = np.zeros_like(x)
        g[..., 0] = (sharpness * 2.0 * np.pi * np.cos(2.0 * np.pi * x[..., 0])
                     / np.cosh(sharpness * s) ** 2)
        return g

    return f, grad


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    rundir = _RunDir(cfg, "gradcheck", _out_base(args), args.force)
    cs = coefficient_set_for(cfg)
    f, grad_f = _smoothed_step()
    gaps = np.geomspace(1e-3, 1e-1, 7)

    with _Phase(rundir, "sweep"):
        report = gradient_bound_check(cs, None, f, gaps, cfg.particles,
                                      RngContract(cfg.seed), grad_f=grad_f)
    rundir.csv("gradcheck.csv",
               ("gap", "sup_grad", "se", "slope_fit", "c1", "c2"),
               report.rows())
    rundir.finish(cfg.seed)

    slope = report.slope
    print(f"gradient decay slope: "
          f"{'n/a' if slope is None else format(slope, '.4f')} "
          f"(c1 = {report.c1:.4g}, c2 = {report.c2:.4g})")
    if slope is None or not -0.6 <= slope <= -0.4:
        print("slope outside [-0.6, -0.4]", file=sys.stderr)
        return EXIT_CRITERION
    return EXIT_OK


def cmd_divcheck(args) -> int:
    cfg = _load_config(args)
    if cfg.dimension != 2:
        print("divcheck needs a two-dimensional scenario (in one dimension "
              "zero divergence forces constants)", file=sys.stderr)
        return EXIT_CONFIG
    rundir = _RunDir(cfg, "divcheck", _out_base(args), args.force)
    cs = coefficient_set_for(cfg)

    with _Phase(rundir, "picard"):
        result = picard_solve(cs, cfg, threads=args.threads)
    if result.state.verdict == DIVERGED:
        print("picard diverged; nothing to check", file=sys.stderr)
        return EXIT_DIVERGED
    with _Phase(rundir, "representation"):
        bundle = representation_u(
            cs, cfg, result, threads=args.threads,
            force=args.force or result.state.verdict != CONVERGED)

    reference = None
    if cfg.preset in ("taylor-green", "taylor-green-nopressure"):
        reference = taylor_green_field(0.5 * cfg.amplitude, cfg.kappa,
                                       cfg.T, cfg.grid_n, cfg.grid_M)
    with_pw = cs.pressure is not None or cs.V is not None
    with _Phase(rundir, "residuals"):
        div = divergence_residual(cs, bundle, reference=reference,
                                  with_pw=with_pw)
        evo_t, evo = divergence_evolution_residual(bundle.u, cs)

    rows = [("divergence-max", div.divergence_max, div.divergence_budget,
             div.divergence_max <= div.divergence_budget)]
    if with_pw:
        rows.append(("pressure-criterion-max", div.pw_max, div.pw_budget,
                     div.pw_max <= div.pw_budget))
    with _Phase(rundir, "write"):
        header = ["t", "divergence_max"] + (["pw_max"] if with_pw else [])
        cols = [div.times, div.divergence_profile]
        if with_pw:
            cols.append(div.pw_profile)
        rundir.csv("divergence_profile.csv", header,
                   zip(*(np.asarray(c).tolist() for c in cols)))
        rundir.csv("evolution_residual.csv", ("t", "residual_max"),
                   zip(evo_t.tolist(), evo.tolist()))
    print("divergence checks:")
    return _report_rows_exit(rundir, rows, cfg.seed)


def cmd_flowcheck(args) -> int:
    cfg = _load_config(args)
    rundir = _RunDir(cfg, "flowcheck", _out_base(args), args.force)
    cs = coefficient_set_for(cfg)
    rng = RngContract(cfg.seed)
    gen = rng.generator(("flowcheck", "draw"))

    # frozen closed-form drift for half the checks; the property must hold
    # for any drift consuming the same step streams
    frozen = lambda s, x: cs.eval_u0(x)
    rows = []
    ok = True
    with _Phase(rundir, "checks"):
        for i in range(20):
            while True:
                i_t, i_s, i_r = sorted(
                    gen.integers(0, cfg.n_global + 1, size=3))
                if i_t < i_s < i_r:
                    break
            x = gen.uniform(size=cs.dim)
            drift = None if i % 2 == 0 else frozen
            mesh = TimeMesh(cfg.T, cfg.n_global, int(i_t), int(i_r))
            rep = flow_compose_check(cs, drift, mesh, i_s * cfg.dt, x, rng,
                                     N=128, tags=("flowcheck", i))
            ok = ok and rep.exact
            rows.append((i, i_t * cfg.dt, i_s * cfg.dt, i_r * cfg.dt,
                         "zero" if drift is None else "frozen",
                         rep.max_abs_discrepancy, rep.exact))

    rundir.csv("flowcheck.csv",
               ("check", "t", "s", "r", "drift", "discrepancy", "exact"),
               rows)
    rundir.finish(cfg.seed)
    worst = max(r[5] for r in rows)
    print(f"flow property: {sum(1 for r in rows if r[6])}/20 bitwise, "
          f"max discrepancy {worst:.3e}")
    return EXIT_OK if ok else EXIT_CRITERION


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="fdns",
                     description="Monte Carlo fixed-point solver and "
                                 "validation suite")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key = value configuration file")
    common.add_argument("--seed", type=int, metavar="U64",
                        help="master seed override")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads (results independent of N)")
    common.add_argument("--out", metavar="DIR",
                        help="output base directory (default: $FDNS_OUT "
                             "or ./runs)")
    common.add_argument("--force", action="store_true",
                        help="overwrite conflicting outputs; proceed past "
                             "non-converged states")

    sub.add_parser("solve", parents=[common],
                   help="run the fixed-point solver and write the fields")
    p_val = sub.add_parser("validate", parents=[common],
                           help="run a validation scenario")
    p_val.add_argument("--scenario", choices=sorted(PRESETS),
                       help="scenario preset (default: the config's preset)")
    sub.add_parser("oracle", parents=[common],
                   help="run the deterministic oracles")
    sub.add_parser("gradcheck", parents=[common],
                   help="gradient-decay scaling of the zero-drift semigroup")
    sub.add_parser("divcheck", parents=[common],
                   help="divergence and pressure-criterion residuals")
    sub.add_parser("flowcheck", parents=[common],
                   help="bitwise two-parameter flow composition")
    return parser


_COMMANDS = {
    "solve": cmd_solve,
    "validate": cmd_validate,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
    "divcheck": cmd_divcheck,
    "flowcheck": cmd_flowcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
