"""Plain-text matrix and vector files.

Formats
-------
``csv``
    Dense, one row per line, comma separated, no header.
``coo``
    Sparse coordinate text, one ``i j value`` triple per line, 0-based.
    An optional ``# shape ROWS COLS`` comment fixes the shape; without it
    the shape is the largest index plus one.
vector
    One value per line.

Blank lines and lines starting with ``#`` are skipped everywhere. Values
are written with 17 significant digits so files round-trip exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import FormatError

FORMATS = ("csv", "coo")


def _fmt(x):
    return format(float(x), ".17g")


def _lines(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read file: {exc.strerror}", path=path) from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            yield lineno, line


def _parse_float(token, path, lineno, col):
    try:
        value = float(token)
    except ValueError:
        raise FormatError(f"not a number: {token!r}", path, lineno, col) from None
    if not np.isfinite(value):
        raise FormatError(f"non-finite value {token!r}", path, lineno, col)
    return value


def guess_format(path):
    """Format from a ``.csv``/``.coo`` suffix, else from the content.

    Content rule: ``coo`` if a ``# shape`` comment or a first data line
    without commas, ``csv`` otherwise.
    """
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in FORMATS:
        return suffix
    for _, line in _lines(path):
        if line.startswith("#"):
            if line[1:].split()[:1] == ["shape"]:
                return "coo"
            continue
        return "csv" if "," in line else "coo"
    raise FormatError("file holds no data", path=path)


def read_dense_csv(path):
    rows = []
    width = None
    for lineno, line in _lines(path):
        if line.startswith("#"):
            continue
        tokens = line.split(",")
        row = [_parse_float(t.strip(), path, lineno, c) for c, t in enumerate(tokens, start=1)]
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(f"expected {width} columns, found {len(row)}", path, lineno)
        rows.append(row)
    if not rows:
        raise FormatError("file holds no data", path=path)
    return np.array(rows, dtype=float)


def read_coo(path):
    """Read coordinate text into a CSR matrix."""
    shape = None
    ii, jj, vv = [], [], []
    for lineno, line in _lines(path):
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[:1] == ["shape"]:
                if len(parts) != 3:
                    raise FormatError("shape comment needs ROWS COLS", path, lineno)
                try:
                    shape = (int(parts[1]), int(parts[2]))
                except ValueError:
                    raise FormatError("shape must be two integers", path, lineno) from None
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise FormatError(f"expected 'i j value', found {len(tokens)} fields", path, lineno)
        for col, tok in enumerate(tokens[:2], start=1):
            if not tok.lstrip("+").isdigit():
                raise FormatError(f"index must be a non-negative integer: {tok!r}", path, lineno, col)
        ii.append(int(tokens[0]))
        jj.append(int(tokens[1]))
        vv.append(_parse_float(tokens[2], path, lineno, 3))
    if not ii and shape is None:
        raise FormatError("file holds no data", path=path)
    if shape is None:
        shape = (max(ii) + 1, max(jj) + 1)
    elif ii and (max(ii) >= shape[0] or max(jj) >= shape[1]):
        raise FormatError(f"index outside declared shape {shape}", path=path)
    return sp.coo_matrix((vv, (ii, jj)), shape=shape).tocsr()


def read_matrix(path, fmt=None):
    """Read a matrix; sparse input comes back as CSR, dense as ndarray."""
    fmt = fmt or guess_format(path)
    if fmt == "csv":
        return read_dense_csv(path)
    if fmt == "coo":
        return read_coo(path)
    raise ValueError(f"unknown matrix format {fmt!r}")


def write_matrix(path, M, fmt="csv"):
    path = Path(path)
    if fmt == "csv":
        A = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        body = "\n".join(",".join(_fmt(x) for x in row) for row in A)
        path.write_text(body + "\n")
    elif fmt == "coo":
        C = sp.coo_matrix(M)
        order = np.lexsort((C.col, C.row))
        lines = [f"# shape {C.shape[0]} {C.shape[1]}"]
        lines += [f"{C.row[k]} {C.col[k]} {_fmt(C.data[k])}" for k in order if C.data[k] != 0]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


def read_vector(path):
    values = []
    for lineno, line in _lines(path):
        if line.startswith("#"):
            continue
        if len(line.split()) != 1 or "," in line:
            raise FormatError("expected one value per line", path, lineno)
        values.append(_parse_float(line, path, lineno, 1))
    if not values:
        raise FormatError("file holds no data", path=path)
    return np.array(values, dtype=float)


def write_vector(path, v):
    Path(path).write_text("\n".join(_fmt(x) for x in np.ravel(v)) + "\n")


def write_edge_list(path, edges):
    """``i j weight`` per line, for ``(i, j, w)`` triples with ``i < j``."""
    Path(path).write_text("".join(f"{i} {j} {_fmt(w)}\n" for i, j, w in edges))
