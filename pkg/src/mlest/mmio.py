"""Matrix Market reading and writing for sparse matrices and dense vectors.

Only the ``real`` (and, on input, ``integer``) fields of the ``coordinate``
and ``array`` formats are handled.  Values are written with 17 significant
digits so a write/read round trip is lossless in double precision.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

_BANNER = "%%MatrixMarket"
_FLOAT = "{:.16e}"


class MatrixMarketError(ValueError):
    """Malformed Matrix Market input; the message names the file and line."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def is_symmetric(A, tol: float = 0.0) -> bool:
    """True if ``max|A - A^T| <= tol * max|A|``."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        return False
    diff = abs(A - A.T)
    if diff.nnz == 0:
        return True
    scale = abs(A).max()
    return bool(diff.max() <= tol * scale)


def write_matrix(path, A, symmetric: bool | None = None, comment: str | None = None) -> Path:
    """Write a sparse matrix in coordinate format.

    With ``symmetric=None`` the storage is symmetric exactly when ``A == A^T``
    entrywise; only the lower triangle is then written.
    """
    path = Path(path)
    A = sp.coo_matrix(A)
    if symmetric is None:
        symmetric = is_symmetric(A)
    elif symmetric and not is_symmetric(A):
        raise ValueError("symmetric storage requested for a nonsymmetric matrix")
    if symmetric:
        keep = A.row >= A.col
        rows, cols, vals = A.row[keep], A.col[keep], A.data[keep]
    else:
        rows, cols, vals = A.row, A.col, A.data
    order = np.lexsort((rows, cols))
    rows, cols, vals = rows[order], cols[order], vals[order]
    kind = "symmetric" if symmetric else "general"
    lines = [f"{_BANNER} matrix coordinate real {kind}"]
    if comment:
        lines.extend("%" + c for c in comment.splitlines())
    lines.append(f"{A.shape[0]} {A.shape[1]} {len(vals)}")
    lines.extend(f"{i + 1} {j + 1} {_FLOAT.format(v)}" for i, j, v in zip(rows, cols, vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_vector(path, x: np.ndarray, comment: str | None = None) -> Path:
    """Write a dense vector as an ``n x 1`` array."""
    path = Path(path)
    x = np.asarray(x, dtype=float).ravel()
    lines = [f"{_BANNER} matrix array real general"]
    if comment:
        lines.extend("%" + c for c in comment.splitlines())
    lines.append(f"{x.size} 1")
    lines.extend(_FLOAT.format(v) for v in x)
    path.write_text("\n".join(lines) + "\n")
    return path


def _header(path, lines):
    """Parse banner and size line; return (format, symmetry, size fields, index of first data line)."""
    if not lines:
        raise MatrixMarketError(path, 1, "empty file")
    banner = lines[0].split()
    if len(banner) != 5 or banner[0] != _BANNER or banner[1].lower() != "matrix":
        raise MatrixMarketError(path, 1, f"bad banner {lines[0].strip()!r}")
    fmt, field, symmetry = (b.lower() for b in banner[2:])
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(path, 1, f"unsupported format {fmt!r}")
    if field not in ("real", "integer"):
        raise MatrixMarketError(path, 1, f"unsupported field {field!r}")
    if symmetry not in ("general", "symmetric"):
        raise MatrixMarketError(path, 1, f"unsupported symmetry {symmetry!r}")
    k = 1
    while k < len(lines) and (not lines[k].strip() or lines[k].lstrip().startswith("%")):
        k += 1
    if k == len(lines):
        raise MatrixMarketError(path, k + 1, "missing size line")
    try:
        size = [int(t) for t in lines[k].split()]
    except ValueError:
        raise MatrixMarketError(path, k + 1, f"bad size line {lines[k].strip()!r}") from None
    expected = 3 if fmt == "coordinate" else 2
    if len(size) != expected or any(s < 0 for s in size):
        raise MatrixMarketError(path, k + 1, f"bad size line {lines[k].strip()!r}")
    return fmt, symmetry, size, k + 1


def _data_lines(path, lines, start, count):
    """Yield ``(line_number, tokens)`` for the next ``count`` data lines."""
    found = 0
    k = start
    while found < count:
        if k >= len(lines):
            raise MatrixMarketError(path, k + 1, f"truncated file: expected {count} entries, found {found}")
        text = lines[k].strip()
        k += 1
        if not text or text.startswith("%"):
            continue
        found += 1
        yield k, text.split()
    for j in range(k, len(lines)):
        if lines[j].strip() and not lines[j].lstrip().startswith("%"):
            raise MatrixMarketError(path, j + 1, "unexpected data after the last entry")


def read(path):
    """Read a Matrix Market file into a CSR matrix (coordinate) or dense 2D array (array)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MatrixMarketError(path, None, str(exc)) from exc
    fmt, symmetry, size, start = _header(path, lines)
    if fmt == "coordinate":
        m, n, nnz = size
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for e, (lineno, tok) in enumerate(_data_lines(path, lines, start, nnz)):
            if len(tok) != 3:
                raise MatrixMarketError(path, lineno, f"expected 'row col value', got {' '.join(tok)!r}")
            try:
                i, j, v = int(tok[0]), int(tok[1]), float(tok[2])
            except ValueError:
                raise MatrixMarketError(path, lineno, f"unparseable entry {' '.join(tok)!r}") from None
            if not (1 <= i <= m and 1 <= j <= n):
                raise MatrixMarketError(path, lineno, f"index ({i}, {j}) outside a {m}x{n} matrix")
            if symmetry == "symmetric" and j > i:
                raise MatrixMarketError(path, lineno, "symmetric storage must hold the lower triangle only")
            rows[e], cols[e], vals[e] = i - 1, j - 1, v
        if symmetry == "symmetric":
            off = rows != cols
            rows, cols, vals = (np.concatenate([rows, cols[off]]), np.concatenate([cols, rows[off]]),
                                np.concatenate([vals, vals[off]]))
        A = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
        A.sort_indices()
        return A
    m, n = size
    if symmetry == "symmetric":
        raise MatrixMarketError(path, 1, "symmetric array storage is not supported")
    out = np.empty(m * n)
    for e, (lineno, tok) in enumerate(_data_lines(path, lines, start, m * n)):
        if len(tok) != 1:
            raise MatrixMarketError(path, lineno, f"expected one value, got {' '.join(tok)!r}")
        try:
            out[e] = float(tok[0])
        except ValueError:
            raise MatrixMarketError(path, lineno, f"unparseable value {tok[0]!r}") from None
    return out.reshape((m, n), order="F")


def read_matrix(path) -> sp.csr_matrix:
    A = read(path)
    if not sp.issparse(A):
        raise MatrixMarketError(path, 1, "expected coordinate format")
    return A


def read_vector(path) -> np.ndarray:
    x = read(path)
    if sp.issparse(x):
        raise MatrixMarketError(path, 1, "expected array format")
    if x.ndim != 2 or min(x.shape) != 1:
        raise MatrixMarketError(path, 1, f"expected a vector, got shape {x.shape}")
    return x.ravel()
