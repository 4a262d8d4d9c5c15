"""CSV artifacts, run manifest, and output-directory locking.

File formats (bit-exact headers, all floats printed with %.17g so that a
write/read round trip reproduces values exactly):

* space-time field:  header ``t,x=<x0>,...,x=<xN>``; one row per time node,
  first column the node time, remaining columns the field values;
* spatial field:     header ``x,<name>``; one row per spatial node;
* trace:             header ``iteration,hilbert_distance,residual_rho0,residual_Q``.

The manifest is JSON: resolved-config echo, a git-style sha1 of the inputs,
the output file list, wall-clock timings, and the solver termination summary.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from kbridge.grid import SpaceTimeGrid, as_space_field, as_spacetime_field
from kbridge.sinkhorn import TRACE_HEADER, ConvergenceTrace

LOCK_NAME = ".kbridge.lock"


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_spacetime_csv(path, field, grid: SpaceTimeGrid) -> None:
    field = as_spacetime_field(field, grid)
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"x={_fmt(xi)}" for xi in grid.x) + "\n")
        for k in range(grid.nt):
            fh.write(_fmt(grid.t[k]) + "," + ",".join(_fmt(v) for v in field[k]) + "\n")


def read_spacetime_csv(path):
    """Returns (t, x, field) as arrays."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        x = np.array([float(c.split("=", 1)[1]) for c in header[1:]])
        rows = [line.strip().split(",") for line in fh if line.strip()]
    t = np.array([float(r[0]) for r in rows])
    field = np.array([[float(v) for v in r[1:]] for r in rows])
    return t, x, field


def write_space_csv(path, values, grid: SpaceTimeGrid, name: str = "value") -> None:
    values = as_space_field(values, grid)
    with open(path, "w") as fh:
        fh.write(f"x,{name}\n")
        for xi, v in zip(grid.x, values):
            fh.write(f"{_fmt(xi)},{_fmt(v)}\n")


def read_space_csv(path):
    """Returns (x, values) as arrays."""
    with open(path) as fh:
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    x = np.array([float(r[0]) for r in rows])
    values = np.array([float(r[1]) for r in rows])
    return x, values


def write_trace_csv(path, trace: ConvergenceTrace) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for i, h, r0, rq in trace.rows():
            fh.write(f"{i},{_fmt(h)},{_fmt(r0)},{_fmt(rq)}\n")


def git_blob_sha1(data: bytes) -> str:
    """sha1 of the git blob encoding of `data`."""
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def content_hash(parts) -> str:
    """Combined git-style hash of an ordered list of (label, bytes) inputs."""
    h = hashlib.sha1()
    for label, data in parts:
        h.update(label.encode())
        h.update(git_blob_sha1(data).encode())
    return h.hexdigest()


def write_manifest(path, *, config_echo, input_hash, outputs, timings, termination) -> dict:
    manifest = {
        "config": config_echo,
        "input_hash": input_hash,
        "outputs": sorted(str(o) for o in outputs),
        "timings_s": timings,
        "termination": termination,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@contextmanager
def output_lock(out_dir):
    """Exclusive lock on an output directory; concurrent writers fail fast."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock_path = out_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock_path} if that run is gone)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        try:
            os.unlink(lock_path)
        except FileNotFoundError:
            pass
