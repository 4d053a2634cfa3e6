"""Small exact linear algebra helpers over Fractions.

Used where floating point would poison a certification: inverting the
coefficient-change tables, rank checks on structure constants, and the
matrix-representation oracles in the test suite.
"""

from __future__ import annotations

from fractions import Fraction

from .errors import SingularSystem


def _as_fraction_matrix(rows):
    return [[Fraction(x) for x in row] for row in rows]


def exact_solve(matrix, rhs):
    """Solve A x = b exactly by Gaussian elimination with partial pivoting.

    ``rhs`` may be a vector or a matrix (list of columns handled as rows of
    the augmented system).  Raises SingularSystem when A is singular.
    """
    a = _as_fraction_matrix(matrix)
    n = len(a)
    vector = not isinstance(rhs[0], (list, tuple))
    b = [[Fraction(x)] for x in rhs] if vector else _as_fraction_matrix(rhs)
    m = len(b[0])
    for col in range(n):
        pivot = next((r for r in range(col, n) if a[r][col] != 0), None)
        if pivot is None:
            raise SingularSystem(f"singular at column {col}")
        a[col], a[pivot] = a[pivot], a[col]
        b[col], b[pivot] = b[pivot], b[col]
        inv = 1 / a[col][col]
        a[col] = [x * inv for x in a[col]]
        b[col] = [x * inv for x in b[col]]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
                b[r] = [x - f * y for x, y in zip(b[r], b[col])]
    return [row[0] for row in b] if vector else b


def exact_inverse(matrix):
    n = len(matrix)
    eye = [[Fraction(1 if i == j else 0) for j in range(n)] for i in range(n)]
    return exact_solve(matrix, eye)


def exact_rank(matrix):
    """Rank of a rational matrix by fraction-free row reduction."""
    a = _as_fraction_matrix(matrix)
    if not a:
        return 0
    rows, cols = len(a), len(a[0])
    rank = 0
    for col in range(cols):
        pivot = next((r for r in range(rank, rows) if a[r][col] != 0), None)
        if pivot is None:
            continue
        a[rank], a[pivot] = a[pivot], a[rank]
        inv = 1 / a[rank][col]
        a[rank] = [x * inv for x in a[rank]]
        for r in range(rows):
            if r != rank and a[r][col] != 0:
                f = a[r][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[rank])]
        rank += 1
        if rank == rows:
            break
    return rank


def mat_mul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[Fraction(0)] * m for _ in range(n)]
    for i in range(n):
        ai = a[i]
        for kk in range(k):
            f = ai[kk]
            if f == 0:
                continue
            brow = b[kk]
            orow = out[i]
            for j in range(m):
                orow[j] += f * brow[j]
    return out
