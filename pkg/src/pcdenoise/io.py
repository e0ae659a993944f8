"""Point-cloud text formats and key = value sidecar files."""

import os

import numpy as np

from .errors import ParseError
from .geometry import as_points

__all__ = ["read_xyz", "write_xyz", "read_ply", "read_points", "read_keyvalue", "write_keyvalue"]


def _parse_float(tok, path, lineno):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", path, lineno) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", path, lineno)
    return v


def read_xyz(path):
    """Read an ASCII XYZ file; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            toks = s.split()
            if len(toks) != 3:
                raise ParseError(f"expected 3 values, got {len(toks)}", path, lineno)
            rows.append([_parse_float(t, path, lineno) for t in toks])
    if not rows:
        raise ParseError("no points found", path)
    return np.array(rows, dtype=np.float64)


def write_xyz(path, points, header=None):
    """Write points with 9 significant digits, one per line."""
    pts = as_points(points)
    with open(path, "w") as fh:
        if header:
            for line in str(header).splitlines():
                fh.write(f"# {line}\n")
        for x, y, z in pts:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path):
    """Vertex positions from an ASCII PLY file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    n_vertex = None
    props = []
    in_vertex = False
    body = None
    for lineno, line in enumerate(lines[1:], 2):
        toks = line.split()
        if not toks:
            continue
        key = toks[0]
        if key == "format":
            if len(toks) < 2 or toks[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", path, lineno)
        elif key == "element":
            if len(toks) != 3:
                raise ParseError("malformed element line", path, lineno)
            in_vertex = toks[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(toks[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {toks[2]!r}", path, lineno) from None
        elif key == "property" and in_vertex:
            props.append(toks[-1])
        elif key == "end_header":
            body = lineno
            break
    if body is None:
        raise ParseError("missing end_header", path)
    if n_vertex is None:
        raise ParseError("no vertex element", path)
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x/y/z properties", path) from None
    out = np.empty((n_vertex, 3))
    for i in range(n_vertex):
        lineno = body + 1 + i
        if lineno > len(lines):
            raise ParseError(f"expected {n_vertex} vertices, file ends after {i}", path, lineno)
        toks = lines[lineno - 1].split()
        if len(toks) < len(props):
            raise ParseError(f"expected {len(props)} values, got {len(toks)}", path, lineno)
        out[i] = [_parse_float(toks[c], path, lineno) for c in cols]
    return out


def read_points(path):
    """Dispatch on extension: ``.ply`` or XYZ text."""
    if os.path.splitext(str(path))[1].lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def read_keyvalue(path):
    """Parse ``key = value`` lines into a dict of strings."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ParseError("expected 'key = value'", path, lineno)
            k, v = s.split("=", 1)
            k = k.strip()
            if not k:
                raise ParseError("empty key", path, lineno)
            out[k] = v.strip()
    return out


def write_keyvalue(path, mapping):
    with open(path, "w") as fh:
        for k, v in mapping.items():
            fh.write(f"{k} = {v}\n")
