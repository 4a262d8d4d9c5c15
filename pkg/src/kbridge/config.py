"""Problem-description files: INI sections resolved into a runnable setup.

Sections: [grid] x_min/x_max/nx/nt; [prior] either preset=NAME, constant
b/sigma/V, or grid-conforming tables b_csv/sigma_csv/v_csv (columns t,x,value);
[marginals] either preset=NAME or rho0_csv (columns x,value) plus q_csv
(columns t,x,value); [solver] tol_hilbert/max_iter/conservation_bound;
[simulate] particles/seed/substeps/dynamics.  rho0 is normalized to unit
trapezoid mass on input.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kbridge import presets
from kbridge.grid import SpaceTimeGrid, integrate_space
from kbridge.prior import PriorSpec
from kbridge.sinkhorn import ProblemSpec, SolverConfig


@dataclass
class RunSetup:
    """Everything a CLI command needs: problem, solver knobs, sim knobs, echo."""

    problem: ProblemSpec
    solver: SolverConfig
    conservation_bound: float
    sim: dict
    echo: dict
    input_parts: list = field(default_factory=list)


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ValueError(f"cannot read config {path}: {e}") from e
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ValueError(f"config parse error: {e}") from e
    return parser


def _getfloat(section, key, default=None):
    if key not in section:
        if default is None:
            raise ValueError(f"missing required field {key!r} in section [{section.name}]")
        return default
    try:
        return float(section[key])
    except ValueError:
        raise ValueError(f"field {key!r} in [{section.name}] is not a number: {section[key]!r}") from None


def _getint(section, key, default=None):
    v = _getfloat(section, key, default)
    if v != int(v):
        raise ValueError(f"field {key!r} in [{section.name}] must be an integer")
    return int(v)


def _read_table(path, grid: SpaceTimeGrid):
    """Grid-conforming (t, x, value) table -> (nt, nx) field."""
    raw = np.genfromtxt(path, delimiter=",", names=True)
    names = raw.dtype.names
    if names is None or len(names) != 3:
        raise ValueError(f"{path}: expected header t,x,value")
    t, x, v = (np.atleast_1d(raw[n]) for n in names)
    fld = np.full((grid.nt, grid.nx), np.nan)
    k = np.rint(t / grid.dt).astype(int)
    i = np.rint((x - grid.x_min) / grid.dx).astype(int)
    ok = (
        (k >= 0) & (k < grid.nt) & (i >= 0) & (i < grid.nx)
        & (np.abs(t - k * grid.dt) < 1e-9) & (np.abs(x - (grid.x_min + i * grid.dx)) < 1e-9)
    )
    if not ok.all():
        j = int(np.argmin(ok))
        raise ValueError(f"{path}: row {j + 2} at (t={t[j]:g}, x={x[j]:g}) is not a grid node")
    fld[k, i] = v
    if np.isnan(fld).any():
        raise ValueError(f"{path}: table does not cover every grid node")
    return fld


def _read_space_table(path, grid: SpaceTimeGrid):
    """(x, value) table covering every spatial node -> (nx,) field."""
    raw = np.genfromtxt(path, delimiter=",", names=True)
    names = raw.dtype.names
    if names is None or len(names) != 2:
        raise ValueError(f"{path}: expected header x,value")
    x, v = (np.atleast_1d(raw[n]) for n in names)
    out = np.full(grid.nx, np.nan)
    i = np.rint((x - grid.x_min) / grid.dx).astype(int)
    ok = (i >= 0) & (i < grid.nx) & (np.abs(x - (grid.x_min + i * grid.dx)) < 1e-9)
    if not ok.all():
        j = int(np.argmin(ok))
        raise ValueError(f"{path}: row {j + 2} at x={x[j]:g} is not a grid node")
    out[i] = v
    if np.isnan(out).any():
        raise ValueError(f"{path}: table does not cover every spatial node")
    return out


def _tabulated_coefficient(fld: np.ndarray, grid: SpaceTimeGrid):
    """Callable (t, xs) -> values, exact at grid nodes, bilinear in between."""

    def f(t, xs):
        s = min(max(t / grid.dt, 0.0), grid.nt - 1.0)
        k = min(int(s), grid.nt - 2)
        frac = s - k
        row = (1.0 - frac) * fld[k] + frac * fld[k + 1]
        return np.interp(np.asarray(xs, dtype=float), grid.x, row)

    return f


def resolve(
    config_path=None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> RunSetup:
    """Build a RunSetup from a config file, a preset name, or a preset plus overrides."""
    overrides = overrides or {}
    if config_path is None and preset is None:
        raise ValueError("either a config file or a preset name is required")
    if config_path is not None and preset is not None:
        raise ValueError("give either --config or --preset, not both")

    input_parts = []
    if config_path is not None:
        parser = read_config(config_path)
        input_parts.append(("config", Path(config_path).read_bytes()))
    else:
        parser = configparser.ConfigParser()
        parser.read_dict({"prior": {"preset": preset}, "marginals": {"preset": preset}})
        input_parts.append(("preset", preset.encode()))

    gsec = parser["grid"] if parser.has_section("grid") else {"name": "grid"}
    if parser.has_section("grid"):
        x_min = _getfloat(gsec, "x_min", 0.0)
        x_max = _getfloat(gsec, "x_max", 1.0)
        nx = _getint(gsec, "nx", presets.DEFAULT_NX)
        nt = _getint(gsec, "nt", presets.DEFAULT_NT)
    else:
        x_min, x_max, nx, nt = 0.0, 1.0, presets.DEFAULT_NX, presets.DEFAULT_NT
    nx = int(overrides.get("nx") or nx)
    nt = int(overrides.get("nt") or nt)
    grid = SpaceTimeGrid(x_min, x_max, nx, nt)

    if not parser.has_section("prior"):
        raise ValueError("missing [prior] section")
    psec = parser["prior"]
    prior_echo = dict(psec)
    if "preset" in psec:
        if psec["preset"] not in presets.PRESETS:
            raise ValueError(f"unknown prior preset {psec['preset']!r}")
        prior = presets.example_prior()
    else:
        coeffs = {}
        for key in ("b", "sigma", "v"):
            csv_key = f"{key}_csv"
            if csv_key in psec:
                fld = _read_table(psec[csv_key], grid)
                input_parts.append((csv_key, Path(psec[csv_key]).read_bytes()))
                coeffs[key] = _tabulated_coefficient(fld, grid)
            else:
                defaults = {"b": 0.0, "sigma": None, "v": 0.0}
                val = _getfloat(psec, key, defaults[key])
                coeffs[key] = val
        prior = PriorSpec(b=coeffs["b"], sigma=coeffs["sigma"], V=coeffs["v"])

    if not parser.has_section("marginals"):
        raise ValueError("missing [marginals] section")
    msec = parser["marginals"]
    marg_echo = dict(msec)
    if "preset" in msec:
        if msec["preset"] not in presets.PRESETS:
            raise ValueError(f"unknown marginals preset {msec['preset']!r}")
        rho0 = presets.example_rho0(grid.x)
        from kbridge.grid import sample

        Q = sample(presets.example_killed_density, grid)
    else:
        if "rho0_csv" not in msec or "q_csv" not in msec:
            raise ValueError("[marginals] needs either preset= or rho0_csv= and q_csv=")
        rho0 = _read_space_table(msec["rho0_csv"], grid)
        Q = _read_table(msec["q_csv"], grid)
        input_parts.append(("rho0_csv", Path(msec["rho0_csv"]).read_bytes()))
        input_parts.append(("q_csv", Path(msec["q_csv"]).read_bytes()))

    if np.min(rho0) < 0.0:
        raise ValueError("rho0 must be nonnegative")
    mass = integrate_space(rho0, grid)
    if mass <= 0.0:
        raise ValueError("rho0 must carry positive mass")
    rho0 = rho0 / mass

    ssec = parser["solver"] if parser.has_section("solver") else {"name": "solver"}
    tol = float(overrides.get("tol") or _getfloat(ssec, "tol_hilbert", 1e-10))
    max_iter = int(overrides.get("max_iter") or _getint(ssec, "max_iter", 10_000))
    conservation_bound = _getfloat(ssec, "conservation_bound", 1e-6)
    solver = SolverConfig(tol_hilbert=tol, max_iter=max_iter)

    simsec = parser["simulate"] if parser.has_section("simulate") else {"name": "simulate"}
    sim = {
        "particles": int(overrides.get("particles") or _getint(simsec, "particles", 100_000)),
        "seed": int(overrides.get("seed") or _getint(simsec, "seed", 20240901)),
        "substeps": _getint(simsec, "substeps", 2),
        "dynamics": simsec.get("dynamics", "posterior") if hasattr(simsec, "get") else "posterior",
    }

    problem = ProblemSpec(rho0=rho0, Q=Q, prior=prior, grid=grid)
    echo = {
        "grid": {"x_min": x_min, "x_max": x_max, "nx": nx, "nt": nt},
        "prior": prior_echo,
        "marginals": {**marg_echo, "rho0_normalization": mass},
        "solver": {"tol_hilbert": tol, "max_iter": max_iter, "conservation_bound": conservation_bound},
        "simulate": sim,
    }
    return RunSetup(
        problem=problem,
        solver=solver,
        conservation_bound=conservation_bound,
        sim=sim,
        echo=echo,
        input_parts=input_parts,
    )
