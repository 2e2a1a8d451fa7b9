"""Reading and writing fields in the ``PDF1`` binary format.

Layout::

    PDF1 <kind> <nx> <ny> <ncomp>\\n      ASCII header, kind in {scalar, vector, symmat}
    x0 y0 Lx Ly                          4 little-endian float64
    values                               nx*ny*ncomp little-endian float64,
                                         node-major (j*nx + i), component-minor
"""

from __future__ import annotations

import os

import numpy as np

from .fields import Grid2D, ScalarField, SymMatrixField, VectorField

MAGIC = b"PDF1"
KINDS = {"scalar": ScalarField, "vector": VectorField, "symmat": SymMatrixField}
_MAX_HEADER = 128


class FieldFormatError(ValueError):
    """Base class for malformed field files."""


class BadMagicError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


class ComponentMismatchError(FieldFormatError):
    pass


def encode_field(f) -> bytes:
    g = f.grid
    header = f"PDF1 {f.kind} {g.nx} {g.ny} {f.ncomp}\n".encode("ascii")
    geom = np.array([g.x0, g.y0, g.Lx, g.Ly], dtype="<f8").tobytes()
    payload = np.ascontiguousarray(f.flat(), dtype="<f8").tobytes()
    return header + geom + payload


def decode_field(data: bytes):
    nl = data.find(b"\n", 0, _MAX_HEADER)
    if not data.startswith(MAGIC + b" ") or nl < 0:
        raise BadMagicError("not a PDF1 field file")
    parts = data[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 5:
        raise BadMagicError(f"malformed PDF1 header: {data[:nl]!r}")
    _, kind, nx, ny, ncomp = parts
    if kind not in KINDS:
        raise BadMagicError(f"unknown field kind {kind!r}")
    try:
        nx, ny, ncomp = int(nx), int(ny), int(ncomp)
    except ValueError as exc:
        raise BadMagicError(f"malformed PDF1 header: {data[:nl]!r}") from exc
    cls = KINDS[kind]
    if ncomp != cls.ncomp:
        raise ComponentMismatchError(f"{kind} fields have {cls.ncomp} components, header says {ncomp}")
    body = data[nl + 1:]
    need = 8 * (4 + nx * ny * ncomp)
    if len(body) < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, found {len(body)}")
    if len(body) > need:
        raise FieldFormatError(f"{len(body) - need} trailing bytes after payload")
    x0, y0, Lx, Ly = np.frombuffer(body[:32], dtype="<f8")
    grid = Grid2D(nx, ny, float(x0), float(y0), float(Lx), float(Ly))
    vals = np.frombuffer(body[32:], dtype="<f8").astype(float)
    shape = grid.shape + ((ncomp,) if ncomp > 1 else ())
    return cls(grid, vals.reshape(shape))


def write_field(f, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_field(f))


def read_field(path):
    with open(path, "rb") as fh:
        return decode_field(fh.read())


def write_mask(mask: np.ndarray, grid: Grid2D, path) -> None:
    write_field(ScalarField(grid, np.asarray(mask, dtype=float)), path)


# plain-text ``key = value`` metadata files

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def write_keyvalue(path, items: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {format_value(v)}\n")


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise FieldFormatError(f"{os.fspath(path)}: expected 'key = value', got {line!r}")
            out[k.strip()] = v.strip()
    return out
