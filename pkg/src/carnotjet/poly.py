"""Sparse multivariate polynomials graded by anisotropic homogeneous degree.

A polynomial lives over a :class:`VarSpace`: a fixed number of variables,
each carrying a positive integer weight.  Under the anisotropic scaling
``x_i -> lam**w_i * x_i`` a monomial ``x**J`` picks up ``lam**hom(J)`` where
``hom(J) = sum(w_i * J_i)``.  All grading in this package (term ordering,
homogeneous parts, degree bookkeeping) refers to this weighted degree.

Coefficients are either exact :class:`fractions.Fraction` values or floats.
The mode is a per-polynomial tag; arithmetic between polynomials of different
modes raises :class:`~carnotjet.errors.SpecMismatch` instead of silently
promoting, because the symbolic certification paths rely on exactness while
the data pipeline runs in floats.  Evaluation is tag-agnostic: an exact
polynomial evaluated at float coordinates returns a float.

Multi-indices are plain tuples of non-negative ints.  Terms are stored in a
dict keyed by multi-index; zero coefficients are never stored, so ``terms``
is canonical and two equal polynomials compare equal.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import SpecMismatch


# ---------------------------------------------------------------------------
# multi-index helpers


def mi_abs(J):
    """Plain length |J| of a multi-index."""
    return sum(J)


def mi_hom(J, weights):
    """Weighted (homogeneous) degree of a multi-index."""
    return sum(w * j for w, j in zip(weights, J))


def mi_factorial(J):
    """J! = prod(j_i!)."""
    out = 1
    for j in J:
        out *= math.factorial(j)
    return out


def mi_add(J, K):
    return tuple(a + b for a, b in zip(J, K))


def unit_index(nvars, i):
    """Multi-index e_i."""
    return tuple(1 if k == i else 0 for k in range(nvars))


def multi_indices(weights, max_hom):
    """All multi-indices J with hom(J) <= max_hom, in canonical order.

    Canonical order is (hom degree, |J|, lexicographic), which makes printed
    polynomials and coefficient tables diffable.
    """
    n = len(weights)
    found = []

    def rec(pos, budget, prefix):
        if pos == n:
            found.append(tuple(prefix))
            return
        w = weights[pos]
        for j in range(budget // w + 1):
            prefix.append(j)
            rec(pos + 1, budget - w * j, prefix)
            prefix.pop()

    rec(0, max_hom, [])
    found.sort(key=lambda J: (mi_hom(J, weights), mi_abs(J), J))
    return found


class VarSpace:
    """An ambient variable space: variable count plus per-variable weights."""

    __slots__ = ("nvars", "weights")

    def __init__(self, weights):
        self.weights = tuple(int(w) for w in weights)
        if any(w < 1 for w in self.weights):
            raise ValueError("variable weights must be positive integers")
        self.nvars = len(self.weights)

    def __eq__(self, other):
        return isinstance(other, VarSpace) and self.weights == other.weights

    def __hash__(self):
        return hash(self.weights)

    def __repr__(self):
        return f"VarSpace{self.weights}"

    def doubled(self):
        """Space of (x, y) pairs, used for group-law polynomials."""
        return VarSpace(self.weights + self.weights)


def _check_same(a, b):
    if a.space != b.space:
        raise SpecMismatch(f"polynomials over different spaces: {a.space} vs {b.space}")
    if a.exact != b.exact:
        raise SpecMismatch("cannot mix exact and float polynomials")


class Poly:
    """A sparse polynomial over a :class:`VarSpace`.

    ``terms`` maps multi-index tuples to nonzero Fraction (exact mode) or
    float coefficients.  Instances are immutable by convention: no method
    mutates ``terms`` after construction.
    """

    __slots__ = ("space", "terms", "exact")

    def __init__(self, space, terms, exact=True):
        self.space = space
        self.exact = bool(exact)
        clean = {}
        for J, c in terms.items():
            if len(J) != space.nvars:
                raise SpecMismatch("multi-index length does not match the space")
            c = Fraction(c) if exact else float(c)
            if c != 0:
                clean[tuple(int(j) for j in J)] = c
        self.terms = clean

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, space, exact=True):
        return cls(space, {}, exact)

    @classmethod
    def constant(cls, space, c, exact=True):
        return cls(space, {(0,) * space.nvars: c}, exact)

    @classmethod
    def coordinate(cls, space, i, exact=True):
        return cls(space, {unit_index(space.nvars, i): 1}, exact)

    @classmethod
    def monomial(cls, space, J, c=1, exact=True):
        return cls(space, {tuple(J): c}, exact)

    # -- structure ----------------------------------------------------------

    def is_zero(self):
        return not self.terms

    def hom_degree(self):
        """Max weighted degree over stored terms; -1 for the zero polynomial."""
        if not self.terms:
            return -1
        w = self.space.weights
        return max(mi_hom(J, w) for J in self.terms)

    def plain_degree(self):
        if not self.terms:
            return -1
        return max(mi_abs(J) for J in self.terms)

    def is_homogeneous(self):
        if not self.terms:
            return True
        w = self.space.weights
        degs = {mi_hom(J, w) for J in self.terms}
        return len(degs) == 1

    def homogeneous_parts(self):
        """Split into [(degree, Poly)] sorted by degree; parts sum back to self."""
        w = self.space.weights
        buckets = {}
        for J, c in self.terms.items():
            buckets.setdefault(mi_hom(J, w), {})[J] = c
        return [
            (d, Poly(self.space, t, self.exact)) for d, t in sorted(buckets.items())
        ]

    def sorted_terms(self):
        """Terms in canonical (hom degree, |J|, lex) order."""
        w = self.space.weights
        return sorted(
            self.terms.items(), key=lambda it: (mi_hom(it[0], w), mi_abs(it[0]), it[0])
        )

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.constant(self.space, other, self.exact)
        _check_same(self, other)
        terms = dict(self.terms)
        for J, c in other.terms.items():
            s = terms.get(J, 0) + c
            if s == 0:
                terms.pop(J, None)
            else:
                terms[J] = s
        return Poly(self.space, terms, self.exact)

    def __neg__(self):
        return Poly(self.space, {J: -c for J, c in self.terms.items()}, self.exact)

    def __sub__(self, other):
        if not isinstance(other, Poly):
            other = Poly.constant(self.space, other, self.exact)
        return self + (-other)

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return self.scale(other)
        _check_same(self, other)
        terms = {}
        for J, a in self.terms.items():
            for K, b in other.terms.items():
                JK = mi_add(J, K)
                s = terms.get(JK, 0) + a * b
                if s == 0:
                    terms.pop(JK, None)
                else:
                    terms[JK] = s
        return Poly(self.space, terms, self.exact)

    __rmul__ = __mul__

    def scale(self, c):
        c = Fraction(c) if self.exact else float(c)
        if c == 0:
            return Poly.zero(self.space, self.exact)
        return Poly(self.space, {J: c * v for J, v in self.terms.items()}, self.exact)

    def __pow__(self, n):
        if n < 0:
            raise ValueError("negative power")
        out = Poly.constant(self.space, 1, self.exact)
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base if n > 1 else base
            n >>= 1
        return out

    def __eq__(self, other):
        return (
            isinstance(other, Poly)
            and self.space == other.space
            and self.exact == other.exact
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.space, self.exact, frozenset(self.terms.items())))

    # -- calculus ------------------------------------------------------------

    def partial(self, i):
        """Partial derivative with respect to variable i."""
        terms = {}
        for J, c in self.terms.items():
            if J[i] == 0:
                continue
            K = list(J)
            K[i] -= 1
            terms[tuple(K)] = c * J[i]
        return Poly(self.space, terms, self.exact)

    def dilate(self, lam):
        """Substitute x_i -> lam**w_i x_i; scales each term by lam**hom(J)."""
        lam = Fraction(lam) if self.exact else float(lam)
        w = self.space.weights
        return Poly(
            self.space,
            {J: c * lam ** mi_hom(J, w) for J, c in self.terms.items()},
            self.exact,
        )

    def substitute(self, replacements):
        """Compose: substitute variable i by ``replacements[i]`` (a Poly).

        All replacement polynomials must share one space and one tag; the
        result lives over that space.
        """
        if len(replacements) != self.space.nvars:
            raise SpecMismatch("need one replacement per variable")
        target = replacements[0].space
        exact = replacements[0].exact
        for r in replacements:
            if r.space != target or r.exact != exact:
                raise SpecMismatch("replacements over inconsistent spaces")
        if self.exact != exact:
            raise SpecMismatch("cannot mix exact and float in substitution")
        out = Poly.zero(target, exact)
        pow_cache = {}

        def power(i, n):
            key = (i, n)
            if key not in pow_cache:
                pow_cache[key] = replacements[i] ** n
            return pow_cache[key]

        for J, c in self.terms.items():
            term = Poly.constant(target, c, exact)
            for i, j in enumerate(J):
                if j:
                    term = term * power(i, j)
            out = out + term
        return out

    # -- evaluation ----------------------------------------------------------

    def eval(self, point):
        """Evaluate at a point (sequence of scalars).

        Exact coefficients with Fraction/int coordinates give a Fraction;
        any float coordinate (or a float-tagged polynomial) gives a float.
        """
        if len(point) != self.space.nvars:
            raise SpecMismatch("point length does not match the space")
        exact_pt = self.exact and all(
            isinstance(x, (int, Fraction)) for x in point
        )
        total = Fraction(0) if exact_pt else 0.0
        for J, c in self.terms.items():
            v = c if exact_pt else float(c)
            for x, j in zip(point, J):
                if j:
                    v *= (x if exact_pt else float(x)) ** j
            total += v
        return total

    def eval_many(self, points):
        """Vectorized float evaluation; ``points`` is an (n, nvars) array."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.shape[1] != self.space.nvars:
            raise SpecMismatch("point array width does not match the space")
        if not self.terms:
            return np.zeros(pts.shape[0])
        exps = np.array(list(self.terms.keys()), dtype=np.int64)
        coeffs = np.array([float(c) for c in self.terms.values()])
        # pts ** 0 == 1 handles absent variables
        mons = np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)
        return mons @ coeffs

    def as_float(self):
        if not self.exact:
            return self
        return Poly(self.space, {J: float(c) for J, c in self.terms.items()}, False)

    # -- text form -----------------------------------------------------------

    def to_text(self):
        """Canonical serialization: one line `j_1 ... j_N  num/den` per term.

        Exact mode only; the format commits to exact rationals.
        """
        if not self.exact:
            raise SpecMismatch("canonical text form is defined for exact polynomials")
        lines = []
        for J, c in self.sorted_terms():
            lines.append(
                " ".join(str(j) for j in J) + "  " + f"{c.numerator}/{c.denominator}"
            )
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, space, text):
        terms = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != space.nvars + 1:
                raise SpecMismatch(f"bad polynomial line: {raw!r}")
            J = tuple(int(p) for p in parts[: space.nvars])
            num, den = parts[-1].split("/")
            terms[J] = terms.get(J, Fraction(0)) + Fraction(int(num), int(den))
        return cls(space, terms, exact=True)

    def __repr__(self):
        if not self.terms:
            return "Poly(0)"
        bits = []
        for J, c in self.sorted_terms():
            mono = "*".join(
                f"x{i}" if j == 1 else f"x{i}^{j}" for i, j in enumerate(J) if j
            )
            bits.append(f"{c}" + (f"*{mono}" if mono else ""))
        return "Poly(" + " + ".join(bits) + ")"
