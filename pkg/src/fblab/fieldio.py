"""Binary field dumps and the on-disk form of media and solutions.

Dump layout, all little-endian::

    b"FBL1" | int64 n | int64 dims[n] | float64 h | float64 extents[n] | float64 payload

The payload is C order with the per-cell components (1, n or n*n) contiguous,
so the field rank follows from the payload length.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import Field, Grid, GridError, MatrixField, ScalarField, VectorField
from .media import MediaError, MediaSpec, validate_media
from .solver import Solution

MAGIC = b"FBL1"
_RANKS = {0: ScalarField, 1: VectorField, 2: MatrixField}


class DumpError(ValueError):
    pass


def field_bytes(f: Field) -> bytes:
    g = f.grid
    head = MAGIC + struct.pack(f"<q{g.n}q", g.n, *g.dims) + struct.pack(f"<{1 + g.n}d", g.h, *g.extents)
    return head + np.ascontiguousarray(f.values, dtype="<f8").tobytes()


def field_from_bytes(buf: bytes) -> Field:
    if buf[:4] != MAGIC:
        raise DumpError("not a field dump (bad magic)")
    off = 4
    try:
        (n,) = struct.unpack_from("<q", buf, off)
        if n not in (2, 3):
            raise DumpError(f"unsupported dimension n = {n}")
        off += 8
        dims = struct.unpack_from(f"<{n}q", buf, off)
        off += 8 * n
        h, *extents = struct.unpack_from(f"<{1 + n}d", buf, off)
        off += 8 * (1 + n)
    except struct.error as e:
        raise DumpError(f"truncated header: {e}") from None
    grid = Grid(tuple(int(d) for d in dims), float(h))
    if not np.allclose(grid.extents, extents, rtol=1e-12, atol=0):
        raise DumpError(f"extents {extents} inconsistent with dims * h")
    payload = np.frombuffer(buf, dtype="<f8", offset=off)
    per_cell, rem = divmod(payload.size, grid.size)
    if rem or per_cell not in (1, n, n * n):
        raise DumpError(f"payload of {payload.size} values does not fit {grid.size} cells")
    rank = {1: 0, n: 1, n * n: 2}[per_cell]
    shape = grid.dims + (n,) * rank
    return _RANKS[rank](grid, payload.reshape(shape).astype(float))


def write_field(path, f: Field) -> None:
    Path(path).write_bytes(field_bytes(f))


def read_field(path) -> Field:
    return field_from_bytes(Path(path).read_bytes())


def save_media(directory, m: MediaSpec) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_field(d / "A.fbl", m.A)
    write_field(d / "f.fbl", m.f)
    meta = {"lambda": m.lam, "f_bar": m.f_bar, "provenance": m.provenance}
    (d / "media.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def load_media(directory) -> MediaSpec:
    d = Path(directory)
    A, f = read_field(d / "A.fbl"), read_field(d / "f.fbl")
    if not isinstance(A, MatrixField) or not isinstance(f, VectorField):
        raise DumpError("media needs a matrix A and a vector f")
    if A.grid != f.grid:
        raise GridError("A and f dumps are on different grids")
    meta = json.loads((d / "media.json").read_text())
    m = MediaSpec(A, f, float(meta["lambda"]), float(meta["f_bar"]), meta.get("provenance", {}))
    if not validate_media(m).passed:
        raise MediaError(f"stored media in {d} fails validation")
    return m


def save_solution(directory, sol: Solution, config: dict | None = None) -> None:
    """u and chi dumps plus a run manifest with residuals, iterations and wall time."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_field(d / "u.fbl", sol.u)
    write_field(d / "chi.fbl", sol.chi)
    meta = {
        "config": config or {},
        "residual_div": sol.residual_div,
        "residual_comp": sol.residual_comp,
        "outer_iters": sol.outer_iters,
        "eps_penal": sol.eps_penal,
        "tol": sol.tol,
        "wall_time": sol.wall_time,
    }
    (d / "solution.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_solution(directory) -> Solution:
    d = Path(directory)
    u, chi = read_field(d / "u.fbl"), read_field(d / "chi.fbl")
    if not isinstance(u, ScalarField) or not isinstance(chi, ScalarField):
        raise DumpError("solution dumps must be scalar fields")
    meta = json.loads((d / "solution.json").read_text())
    return Solution(u, chi, meta["residual_div"], meta["residual_comp"], meta["outer_iters"],
                    meta["eps_penal"], meta["tol"], [], meta.get("wall_time", 0.0))
