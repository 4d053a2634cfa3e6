"""Left-invariant vector fields and their compositions on polynomials.

The basis field with index i acts as ``sum_j a_ij(x) d/dx_j`` where
``a_ij(x)`` is the partial derivative of the j-th product coordinate
``(x y)_j`` in y_i at y = 0 -- read off symbolically from the group law.
Composed operators use the literal ordering ``X^J = X_1^{j_1} ... X_N^{j_N}``
(rightmost factor applied first); no normal-ordering is attempted.

``OperatorExpansion`` rewrites a composed field operator in terms of plain
coordinate derivatives with polynomial coefficients, which is how the
inverse-estimate machinery transfers Euclidean facts to the group setting.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .errors import BracketMismatch, SpecMismatch, StencilOutOfDomain
from .poly import Poly, VarSpace, mi_abs, mi_hom, multi_indices, unit_index


class LeftInvariantField:
    """First-order operator ``sum_j coeffs[j] * d/dx_j`` over the group space."""

    __slots__ = ("group", "index", "coeffs")

    def __init__(self, group, index, coeffs):
        self.group = group
        self.index = index
        self.coeffs = coeffs  # dict j -> Poly (x variables)

    def apply(self, P):
        out = Poly.zero(P.space, P.exact)
        for j, aij in self.coeffs.items():
            dP = P.partial(j)
            if dP.is_zero():
                continue
            out = out + (aij if P.exact else aij.as_float()) * dP
        return out

    def __repr__(self):
        bits = [f"({a!r}) d{j}" for j, a in sorted(self.coeffs.items())]
        return f"X_{self.index + 1} = " + " + ".join(bits)


def build_fields(group):
    """Derive the left-invariant basis fields from the group law.

    Validates that the fields reproduce the input structure constants as
    operators on coordinate polynomials; a mismatch indicates a group-law
    bug and raises BracketMismatch.
    """
    cached = group._cache.get("fields")
    if cached is not None:
        return cached
    law = group.law
    n = group.dim
    space = VarSpace(group.weights)
    coords = [Poly.coordinate(space, k) for k in range(n)]
    zero = Poly.zero(space)
    fields = []
    for i in range(n):
        coeffs = {}
        for j in range(n):
            # d/dy_i of (x*y)_j = delta_ij + d/dy_i Q_j(x, y) at y = 0
            aij = Poly.constant(space, 1) if i == j else zero
            Qj = law.corrections[j]
            dQ = Qj.partial(n + i)
            if not dQ.is_zero():
                # substitute y = 0, keep x
                at0 = dQ.substitute(coords + [zero] * n)
                aij = aij + at0
            if not aij.is_zero():
                coeffs[j] = aij
        fields.append(LeftInvariantField(group, i, coeffs))
    _check_brackets(group, fields, coords)
    group._cache["fields"] = fields
    return fields


def _check_brackets(group, fields, coords):
    sc = group.sc
    n = group.dim
    for i in range(n):
        for j in range(i + 1, n):
            for target in range(n):
                lhs = fields[i].apply(fields[j].apply(coords[target])) - fields[
                    j
                ].apply(fields[i].apply(coords[target]))
                rhs = Poly.zero(coords[target].space)
                for l in range(n):
                    c = sc.coefficient(l, i, j)
                    if c != 0:
                        rhs = rhs + fields[l].apply(coords[target]).scale(c)
                if lhs != rhs:
                    raise BracketMismatch(
                        f"[X_{i+1}, X_{j+1}] disagrees with the structure "
                        f"constants on x_{target+1}"
                    )


def apply_XJ(group, J, P):
    """Apply ``X^J = X_1^{j_1} ... X_N^{j_N}`` to a polynomial.

    For homogeneous P the result is zero or homogeneous of degree
    ``deg(P) - hom(J)``; in particular it vanishes whenever hom(J) exceeds
    the degree.
    """
    if P.space != VarSpace(group.weights):
        raise SpecMismatch("polynomial does not live over the group space")
    fields = build_fields(group)
    out = P
    for i in range(group.dim - 1, -1, -1):
        for _ in range(J[i]):
            if out.is_zero():
                return out
            out = fields[i].apply(out)
    return out


class OperatorExpansion:
    """``X^alpha`` written as ``D^alpha + sum Q_{beta,alpha}(x) D^beta``.

    ``table`` maps each multi-index beta to its polynomial coefficient; the
    alpha term always carries the constant 1.  Entries appear only with
    ``|beta| <= |alpha|`` and ``hom(beta) >= hom(alpha)``, each coefficient
    homogeneous of degree ``hom(beta) - hom(alpha)`` (or zero).
    """

    __slots__ = ("group", "alpha", "table")

    def __init__(self, group, alpha, table):
        self.group = group
        self.alpha = tuple(alpha)
        self.table = table

    def apply(self, P):
        out = Poly.zero(P.space, P.exact)
        for beta, coeff in self.table.items():
            dP = P
            for i, b in enumerate(beta):
                for _ in range(b):
                    dP = dP.partial(i)
                    if dP.is_zero():
                        break
            if dP.is_zero():
                continue
            out = out + (coeff if P.exact else coeff.as_float()) * dP
        return out

    def check_structure(self):
        """Verify the shape constraints; returns True or raises AssertionError."""
        w = self.group.weights
        a_abs, a_hom = mi_abs(self.alpha), mi_hom(self.alpha, w)
        lead = self.table.get(self.alpha)
        assert lead is not None and lead == Poly.constant(lead.space, 1), (
            "leading coefficient must be the constant 1"
        )
        for beta, coeff in self.table.items():
            assert mi_abs(beta) <= a_abs, f"|beta| > |alpha| at {beta}"
            assert mi_hom(beta, w) >= a_hom, f"hom(beta) < hom(alpha) at {beta}"
            want = mi_hom(beta, w) - a_hom
            for deg, _ in coeff.homogeneous_parts():
                assert deg == want, (
                    f"coefficient of {beta} has degree {deg}, expected {want}"
                )
        return True


def expand_operator(group, alpha):
    """Expand ``X^alpha`` over coordinate derivatives, exactly.

    Built by symbolic composition: an operator is a map beta -> Poly, and
    applying a field ``sum_j a_ij d_j`` sends ``Q(x) D^beta`` to
    ``sum_j a_ij (d_j Q) D^beta + a_ij Q D^(beta + e_j)``.
    """
    alpha = tuple(alpha)
    key = ("expansion", alpha)
    cached = group._cache.get(key)
    if cached is not None:
        return cached
    n = group.dim
    space = VarSpace(group.weights)
    fields = build_fields(group)
    table = {(0,) * n: Poly.constant(space, 1)}
    for i in range(n - 1, -1, -1):
        for _ in range(alpha[i]):
            new = {}

            def add(beta, poly):
                if poly.is_zero():
                    return
                cur = new.get(beta)
                new[beta] = poly if cur is None else cur + poly

            for beta, Q in table.items():
                for j, aij in fields[i].coeffs.items():
                    dQ = Q.partial(j)
                    if not dQ.is_zero():
                        add(beta, aij * dQ)
                    bj = list(beta)
                    bj[j] += 1
                    add(tuple(bj), aij * Q)
            table = new
    table = {b: q for b, q in table.items() if not q.is_zero()}
    exp = OperatorExpansion(group, alpha, table)
    group._cache[key] = exp
    return exp


def operator_index_set(group, max_hom):
    """Multi-indices alpha with hom(alpha) <= max_hom, canonical order."""
    return multi_indices(group.weights, max_hom)


# ---------------------------------------------------------------------------
# numeric group-direction derivatives on sampled data


def _interpolate(f, pts):
    """Multilinear interpolation of a SampledFunction at float points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lo = np.array([b[0] for b in f.box])
    hi = np.array([b[1] for b in f.box])
    hstep = (hi - lo) / np.array(f.shape)
    # cell-center coordinates: centers at lo + (i + 1/2) h
    u = (pts - lo) / hstep - 0.5
    if np.any(u < -1e-9) or np.any(u > np.array(f.shape) - 1 + 1e-9):
        raise StencilOutOfDomain("interpolation point outside the center grid")
    u = np.clip(u, 0.0, np.array(f.shape, dtype=float) - 1.0)
    base = np.minimum(u.astype(int), np.array(f.shape) - 2)
    frac = u - base
    n, dim = pts.shape
    vals = np.zeros(n)
    for corner in range(1 << dim):
        idx = base.copy()
        weight = np.ones(n)
        for d in range(dim):
            if corner >> d & 1:
                idx[:, d] += 1
                weight *= frac[:, d]
            else:
                weight *= 1.0 - frac[:, d]
        gathered = f.values[tuple(idx.T)]
        if not np.all(f.mask[tuple(idx.T)]):
            raise StencilOutOfDomain("stencil touches an off-mask cell")
        vals += weight * gathered
    return vals


def apply_XJ_numeric(group, J, f, x, h=None):
    """Finite-difference value of ``X^J f`` at x on sampled data.

    Differences step along group directions ``x * (t e_i)``; central stencils
    are used where both sides stay in the sampled domain, one-sided
    otherwise.  Converges at first order in h for smooth data.  Returns
    ``(value, stencil)`` where stencil records the scheme used per level.
    """
    if h is None:
        widths = [(b[1] - b[0]) / s for b, s in zip(f.box, f.shape)]
        h = 2.0 * max(widths)
    law = group.law
    stencil = []

    def shift(pt, i, t):
        step = np.zeros(group.dim)
        step[i] = t
        return law.multiply_many(np.asarray(pt, dtype=float)[None, :], step[None, :])[0]

    def evaluate(g, pt):
        return g(pt)

    def derive(g, i, level):
        def dg(pt):
            try:
                vp = g(shift(pt, i, h))
                vm = g(shift(pt, i, -h))
                stencil.append((level, i, "central"))
                return (vp - vm) / (2.0 * h)
            except StencilOutOfDomain:
                pass
            try:
                vp = g(shift(pt, i, h))
                v0 = g(pt)
                stencil.append((level, i, "forward"))
                return (vp - v0) / h
            except StencilOutOfDomain:
                v0 = g(pt)
                vm = g(shift(pt, i, -h))
                stencil.append((level, i, "backward"))
                return (v0 - vm) / h

        return dg

    g = lambda pt: float(_interpolate(f, pt)[0])  # noqa: E731
    level = 0
    for i in range(group.dim - 1, -1, -1):
        for _ in range(J[i]):
            g = derive(g, i, level)
            level += 1
    value = evaluate(g, np.asarray([float(c) for c in x]))
    return value, tuple(stencil)
