"""Batch command-line front end.

Subcommands: solve, check-kernel, oracle-compare, simulate.  Exit codes are
stable for scripting: 0 success, 1 config/input error, 2 infeasible problem,
3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from kbridge import artifacts, config as config_mod, oracle, posterior as posterior_mod
from kbridge.errors import ConvergenceError, InfeasibleError
from kbridge.grid import integrate_space, integrate_spacetime
from kbridge.particle import SimConfig, empirical_profiles, simulate
from kbridge.pde import Propagator, conservation_defect, solve_forward
from kbridge.posterior import PosteriorSolution
from kbridge.sinkhorn import solve

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_NO_CONVERGENCE = 3

FIELD_FILES = (
    "P.csv",
    "u.csv",
    "drift_correction.csv",
    "alpha.csv",
    "Qhat.csv",
    "phi.csv",
    "phihat.csv",
    "Lambda.csv",
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="built-in problem preset name")
    p.add_argument("--config", help="problem description file (INI)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--nx", type=int, help="override spatial node count")
    p.add_argument("--nt", type=int, help="override time node count")
    p.add_argument("--tol", type=float, help="override Hilbert stop tolerance")
    p.add_argument("--max-iter", type=int, dest="max_iter", help="override sweep budget")
    p.add_argument("--seed", type=int, help="override simulation seed")
    p.add_argument("--particles", type=int, help="override particle count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("solve", cmd_solve),
        ("check-kernel", cmd_check_kernel),
        ("oracle-compare", cmd_oracle_compare),
        ("simulate", cmd_simulate),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)
    return parser


def _setup(args) -> config_mod.RunSetup:
    overrides = {
        "nx": args.nx,
        "nt": args.nt,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "seed": args.seed,
        "particles": args.particles,
    }
    return config_mod.resolve(config_path=args.config, preset=args.preset, overrides=overrides)


def _input_hash(setup: config_mod.RunSetup) -> str:
    echo_bytes = json.dumps(setup.echo, sort_keys=True, default=str).encode()
    return artifacts.content_hash(list(setup.input_parts) + [("echo", echo_bytes)])


def cmd_solve(args) -> int:
    setup = _setup(args)
    problem, grid = setup.problem, setup.problem.grid
    t0 = time.perf_counter()
    with artifacts.output_lock(args.out) as out_dir:
        trace_path = out_dir / "trace.csv"
        with open(trace_path, "w") as trace_stream:
            pot, trace = solve(problem, setup.solver, trace_stream=trace_stream)
        t_solve = time.perf_counter() - t0
        sol = posterior_mod.posterior_solution(pot, problem.prior, grid)
        fields = {
            "P.csv": sol.P,
            "u.csv": sol.u,
            "drift_correction.csv": sol.drift_correction,
            "alpha.csv": sol.alpha,
            "Qhat.csv": sol.Qhat,
            "phi.csv": pot.phi,
            "phihat.csv": pot.phihat,
            "Lambda.csv": pot.Lambda,
        }
        for name, field in fields.items():
            artifacts.write_spacetime_csv(out_dir / name, field, grid)
        outputs = [out_dir / n for n in fields] + [trace_path]
        manifest_path = out_dir / "manifest.json"
        artifacts.write_manifest(
            manifest_path,
            config_echo=setup.echo,
            input_hash=_input_hash(setup),
            outputs=outputs,
            timings={"solve": t_solve, "total": time.perf_counter() - t0},
            termination=trace.termination,
        )
    print(trace.termination)
    print(f"residual check {'passed' if trace.residual_ok else 'FAILED'}; wrote {len(outputs) + 1} files to {out_dir}")
    return EXIT_OK


def cmd_check_kernel(args) -> int:
    setup = _setup(args)
    problem, grid = setup.problem, setup.problem.grid
    defect = conservation_defect(problem.prior, grid)
    evol = solve_forward(problem.prior, grid, problem.rho0).phihat
    masses = evol @ grid.wx
    print(f"conservation defect: {defect:.3e} (bound {setup.conservation_bound:g})")
    print("t,survivor_mass")
    step = max(1, (grid.nt - 1) // 10)
    for k in range(0, grid.nt, step):
        print(f"{grid.t[k]:.6g},{masses[k]:.12g}")
    return EXIT_OK if defect < setup.conservation_bound else EXIT_CONFIG


def cmd_oracle_compare(args) -> int:
    seed = args.seed if args.seed is not None else 20240901
    inst = oracle.make_comparison_instance(m=5, steps=6, seed=seed)
    rho_xy, rho_xzt = oracle.prior_couplings(inst.chain)
    fs = oracle.fs_discrete(inst.chain, inst.rho0_mass, inst.Q_mass)
    ipf = oracle.ipf_solve(rho_xy, rho_xzt, inst.rho0_mass, inst.Q_mass)
    gap = max(
        float(np.max(np.abs(fs.pi_xy - ipf.pi_xy))),
        float(np.max(np.abs(fs.pi_xzt - ipf.pi_xzt))),
    )
    print(f"seed {seed}: fixed-point vs IPF coupling gap (L-inf): {gap:.3e}")
    print(f"objectives: fixed-point {fs.objective:.12g}, IPF {ipf.objective:.12g}")
    return EXIT_OK if gap < 1e-8 else EXIT_CONFIG


def _solution_from_artifacts(out_dir: Path, grid, prior) -> PosteriorSolution:
    needed = ["P.csv", "u.csv", "drift_correction.csv", "alpha.csv", "Qhat.csv"]
    missing = [n for n in needed if not (out_dir / n).exists()]
    if missing:
        raise ValueError(
            f"posterior artifacts missing from {out_dir}: {', '.join(missing)}; run solve first"
        )
    read = {}
    for name in needed:
        t, x, field = artifacts.read_spacetime_csv(out_dir / name)
        if field.shape != (grid.nt, grid.nx):
            raise ValueError(f"{name} shape {field.shape} does not match the configured grid")
        read[name] = field
    P = read["P.csv"]
    return PosteriorSolution(
        P=P,
        u=read["u.csv"],
        drift_correction=read["drift_correction.csv"],
        alpha=read["alpha.csv"],
        Qhat=read["Qhat.csv"],
        survivor_mass_t=P @ grid.wx,
        mask=P >= posterior_mod.P_FLOOR_REL * np.max(P),
        grid=grid,
    )


def cmd_simulate(args) -> int:
    setup = _setup(args)
    problem, grid = setup.problem, setup.problem.grid
    dynamics = setup.sim["dynamics"]
    cfg = SimConfig(
        n_particles=setup.sim["particles"],
        seed=setup.sim["seed"],
        dynamics=dynamics,
        substeps=setup.sim["substeps"],
    )
    out_dir = Path(args.out)
    solution = None
    if dynamics == "posterior":
        solution = _solution_from_artifacts(out_dir, grid, problem.prior)
    t0 = time.perf_counter()
    log = simulate(problem.prior, grid, cfg, problem.rho0, solution)
    elapsed = time.perf_counter() - t0
    killed_hist, survivor_hist = empirical_profiles(log, grid)
    with artifacts.output_lock(out_dir):
        artifacts.write_spacetime_csv(out_dir / "killed_hist.csv", killed_hist, grid)
        artifacts.write_space_csv(out_dir / "survivors.csv", survivor_hist, grid, name="density")
        stats = {
            "dynamics": dynamics,
            "n_particles": cfg.n_particles,
            "seed": cfg.seed,
            "substeps": cfg.substeps,
            "killed_fraction": log.killed_fraction,
            "survivor_fraction": 1.0 - log.killed_fraction,
            "first_kill_time": None if log.n_killed == 0 else float(np.nanmin(log.t_kill)),
            "killed_hist_mass": integrate_spacetime(killed_hist, grid),
            "survivor_hist_mass": integrate_space(survivor_hist, grid),
            "elapsed_s": elapsed,
        }
        with open(out_dir / "stats.json", "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConvergenceError as e:
        print(f"no convergence: {e}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
