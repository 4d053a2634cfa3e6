"""Group Taylor polynomials, jets, remainders, and Whitney-type moduli.

A jet of order k on a point set is a full family of values ``f_J``, one per
multi-index with hom(J) <= k.  The Taylor polynomial centered at x0 is

    P_k(x) = sum_J alpha_J (x0^{-1} x)^J / J!

where the coefficients come from the jet through a constant table:
``alpha_J = sum_K beta[J][K] f_K`` with the sum over hom(K) = hom(J),
|K| <= |J|.  The table is recovered by solving, exactly, the linear system
stating that applying ``X^K`` to the centered monomial basis and evaluating
at the center is the identity pairing; left invariance makes the system
independent of the center, so it is computed once per (group, k).

Remainders ``R_J(x0, x) = f_J(x) - (X^J P_k(., x0))(x)`` and their scaled
suprema (Lipschitz constants, Whitney moduli) quantify how close a jet is
to the trace of a globally smooth function.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .diffops import apply_XJ
from .errors import CoincidentPoints, IncompleteJet, SingularSystem
from .exactlinalg import exact_inverse
from .metrics import Metric
from .poly import Poly, VarSpace, mi_abs, mi_factorial, mi_hom, multi_indices


def jet_indices(group, k):
    """Multi-indices with hom(J) <= k in canonical order."""
    return multi_indices(group.weights, k)


class BetaTable:
    """Coefficient-change table between jet values and Taylor coefficients.

    ``beta[J][K]`` is rational; ``derivative_matrix[K][J]`` is its inverse,
    mapping Taylor coefficients to jet values (both in the canonical index
    order).  ``beta[I][I] = 1`` and within one (hom, ||) block the table is
    the identity, which makes the defining system unit-triangular.
    """

    __slots__ = ("group", "order", "indices", "beta", "derivative_matrix")

    def __init__(self, group, order, indices, beta, derivative_matrix):
        self.group = group
        self.order = order
        self.indices = indices
        self.beta = beta
        self.derivative_matrix = derivative_matrix

    def index_of(self, J):
        return self.indices.index(tuple(J))

    def coefficients_from_values(self, values):
        """alpha vector (exact or float) from jet values in canonical order."""
        out = []
        for Ji, J in enumerate(self.indices):
            row = self.beta[Ji]
            acc = Fraction(0)
            for Ki, c in row:
                acc = acc + c * values[Ki]
            out.append(acc)
        return out

    def coefficients_from_values_float(self, values):
        mat = self.beta_matrix_float()
        return mat @ np.asarray(values, dtype=float)

    def values_from_coefficients_float(self, coeffs):
        mat = self.derivative_matrix_float()
        return mat @ np.asarray(coeffs, dtype=float)

    def beta_matrix_float(self):
        n = len(self.indices)
        mat = np.zeros((n, n))
        for Ji, row in enumerate(self.beta):
            for Ki, c in row:
                mat[Ji, Ki] = float(c)
        return mat

    def derivative_matrix_float(self):
        return np.array(
            [[float(c) for c in row] for row in self.derivative_matrix]
        )


def beta_table(group, k):
    """Build (and cache) the coefficient table of order k for a group.

    The defining matrix M[K][J] = (X^K ((x^J)/J!))(0) is computed with exact
    field applications, verified unit-triangular (per the grading argument),
    and inverted exactly.  A singular block signals an operator bug.
    """
    key = ("beta", k)
    cached = group._cache.get(key)
    if cached is not None:
        return cached
    idx = jet_indices(group, k)
    n = len(idx)
    space = VarSpace(group.weights)
    w = group.weights
    origin = tuple(Fraction(0) for _ in range(group.dim))
    M = [[Fraction(0)] * n for _ in range(n)]
    for Jn, J in enumerate(idx):
        basis = Poly.monomial(space, J, Fraction(1, mi_factorial(J)))
        for Kn, K in enumerate(idx):
            if mi_hom(K, w) != mi_hom(J, w) or mi_abs(J) > mi_abs(K):
                continue  # provably zero; skip the symbolic work
            val = apply_XJ(group, K, basis).eval(origin)
            M[Kn][Jn] = val
    # structural checks: unit diagonal, triangular in |.| within a hom level
    for i, K in enumerate(idx):
        if M[i][i] != 1:
            raise SingularSystem(f"diagonal entry for {K} is {M[i][i]}, not 1")
        for j, J in enumerate(idx):
            if M[i][j] == 0:
                continue
            if mi_hom(J, w) != mi_hom(K, w) or mi_abs(J) > mi_abs(K):
                raise SingularSystem(
                    f"unexpected entry M[{K}][{J}] = {M[i][j]}"
                )
            if mi_abs(J) == mi_abs(K) and J != K:
                raise SingularSystem(
                    f"off-diagonal entry within an equal-length block at "
                    f"({K}, {J})"
                )
    Minv = exact_inverse(M)
    beta = []
    for Ji in range(n):
        row = [(Ki, Minv[Ji][Ki]) for Ki in range(n) if Minv[Ji][Ki] != 0]
        beta.append(tuple(row))
    table = BetaTable(group, k, idx, beta, M)
    group._cache[key] = table
    return table


# ---------------------------------------------------------------------------
# jets and Taylor polynomials


class Jet:
    """Values ``f_J`` for hom(J) <= order, on a finite list of base points."""

    def __init__(self, group, order, points, values):
        """``values``: dict J -> sequence of per-point values."""
        self.group = group
        self.order = order
        self.points = [tuple(p) for p in points]
        self.indices = jet_indices(group, order)
        self.values = {}
        for J in self.indices:
            if tuple(J) not in values:
                raise IncompleteJet(f"missing values for multi-index {J}")
            col = list(values[tuple(J)])
            if len(col) != len(self.points):
                raise IncompleteJet(f"value count mismatch for {J}")
            self.values[tuple(J)] = col

    @classmethod
    def of_polynomial(cls, group, P, order, points):
        """Exact jet of a polynomial: f_J = X^J P evaluated at each point."""
        vals = {}
        for J in jet_indices(group, order):
            XJP = apply_XJ(group, J, P)
            vals[J] = [XJP.eval(p) for p in points]
        return cls(group, order, points, vals)

    def value_vector(self, point_index):
        return [self.values[J][point_index] for J in self.indices]

    def max_abs_value(self):
        return max(
            (abs(float(v)) for col in self.values.values() for v in col),
            default=0.0,
        )

    def restrict(self, keep):
        keep = list(keep)
        pts = [self.points[i] for i in keep]
        vals = {J: [col[i] for i in keep] for J, col in self.values.items()}
        return Jet(self.group, self.order, pts, vals)

    def __len__(self):
        return len(self.points)


class TaylorPoly:
    """A centered polynomial together with its center, order, coefficients."""

    __slots__ = ("group", "center", "order", "coeffs", "poly")

    def __init__(self, group, center, order, coeffs, poly):
        self.group = group
        self.center = center
        self.order = order
        self.coeffs = coeffs  # dict J -> coefficient alpha_J
        self.poly = poly  # plain Poly in the ambient variables

    def eval(self, x):
        return self.poly.eval(x)

    def eval_many(self, pts):
        return self.poly.eval_many(pts)


def centered_basis(group, center, k, exact=True):
    """Polynomials ``(x0^{-1} x)^J / J!`` for hom(J) <= k, keyed by J."""
    inv = group.inverse(center)
    z = group.law.translate_polys(inv, 1, exact=exact)
    basis = {}
    pow_cache = {}

    def power(i, n):
        key = (i, n)
        if key not in pow_cache:
            pow_cache[key] = z[i] ** n
        return pow_cache[key]

    one = Poly.constant(z[0].space, 1, exact)
    for J in jet_indices(group, k):
        mono = one
        for i, j in enumerate(J):
            if j:
                mono = mono * power(i, j)
        fact = mi_factorial(J)
        basis[J] = mono.scale(
            Fraction(1, fact) if exact else 1.0 / fact
        )
    return basis


def taylor_poly(jet, point_index=0, k=None):
    """Taylor polynomial of a jet at one of its base points.

    With exact jet values and a rational center the construction is exact
    and satisfies the defining property: applying X^J and evaluating at the
    center returns f_J exactly, for every hom(J) <= k.
    """
    group = jet.group
    k = jet.order if k is None else k
    if k > jet.order:
        raise IncompleteJet(f"jet has order {jet.order}, requested {k}")
    table = beta_table(group, k)
    center = jet.points[point_index]
    vals = [jet.values[J][point_index] for J in table.indices]
    exact = all(isinstance(v, (int, Fraction)) for v in vals) and all(
        isinstance(c, (int, Fraction)) for c in center
    )
    basis = centered_basis(group, center, k, exact=exact)
    if exact:
        alphas = table.coefficients_from_values(vals)
    else:
        alphas = list(table.coefficients_from_values_float([float(v) for v in vals]))
    poly = Poly.zero(basis[table.indices[0]].space, exact)
    coeffs = {}
    for J, a in zip(table.indices, alphas):
        coeffs[J] = a
        if a != 0:
            poly = poly + basis[J].scale(a)
    return TaylorPoly(group, center, k, coeffs, poly)


def taylor_from_coefficients(group, center, k, coeffs, exact=False):
    """Taylor polynomial directly from alpha coefficients (dict or vector)."""
    table = beta_table(group, k)
    if not isinstance(coeffs, dict):
        coeffs = {J: c for J, c in zip(table.indices, coeffs)}
    basis = centered_basis(group, center, k, exact=exact)
    poly = Poly.zero(basis[table.indices[0]].space, exact)
    for J in table.indices:
        a = coeffs.get(J, 0)
        if a != 0:
            poly = poly + basis[J].scale(a)
    return TaylorPoly(group, center, k, dict(coeffs), poly)


# ---------------------------------------------------------------------------
# remainders and the scaled moduli built from them


class Remainder:
    """Remainder values R_J(x0, x) over ordered point pairs of a jet."""

    def __init__(self, jet, k=None):
        self.jet = jet
        self.k = jet.order if k is None else k
        group = jet.group
        self.indices = jet_indices(group, self.k)
        npts = len(jet.points)
        pts = np.array([[float(c) for c in p] for p in jet.points])
        self.values = {J: np.zeros((npts, npts)) for J in self.indices}
        for i0 in range(npts):
            tp = taylor_poly(jet, i0, self.k)
            fpoly = tp.poly if not tp.poly.exact else tp.poly.as_float()
            for J in self.indices:
                XJP = apply_XJ(group, J, fpoly)
                pred = XJP.eval_many(pts)
                actual = np.array([float(v) for v in self.jet.values[J]])
                self.values[J][i0, :] = actual - pred

    def value(self, J, i0, i1):
        return float(self.values[tuple(J)][i0, i1])


def remainders(jet, k=None):
    """All remainder values; R_J(x, x) = 0 by the defining property."""
    return Remainder(jet, k)


def _pair_distances(jet, metric):
    pts = np.array([[float(c) for c in p] for p in jet.points])
    n = len(pts)
    d = np.zeros((n, n))
    for i in range(n):
        d[i, :] = metric.dist_many(np.tile(pts[i], (n, 1)), pts)
    return d


def lip_constant(jet, gamma, k=None, metric=None):
    """Least M bounding both |f_J| and the scaled remainders over all pairs.

    The remainder bound is |R_J(x0, x)| <= M d(x, x0)^(gamma - hom(J)).
    Returns a dict with the combined M and its two parts itemized; a zero
    distance between points with differing jet values makes M infinite and
    is reported via ``infinite=True``.
    """
    k = jet.order if k is None else k
    metric = metric or Metric(jet.group, "quasi")
    value_part = jet.max_abs_value()
    if len(jet.points) < 2:
        return {
            "M": value_part,
            "value_part": value_part,
            "remainder_part": 0.0,
            "infinite": False,
        }
    rem = remainders(jet, k)
    d = _pair_distances(jet, metric)
    w = jet.group.weights
    remainder_part = 0.0
    infinite = False
    n = len(jet.points)
    for J in rem.indices:
        expo = gamma - mi_hom(J, w)
        R = rem.values[J]
        for i0 in range(n):
            for i1 in range(n):
                if i0 == i1:
                    continue
                dij = d[i0, i1]
                rij = abs(R[i0, i1])
                if dij <= 0.0:
                    if rij > 1e-12:
                        infinite = True
                    continue
                remainder_part = max(remainder_part, rij / dij ** expo)
    M = max(value_part, remainder_part)
    return {
        "M": math.inf if infinite else M,
        "value_part": value_part,
        "remainder_part": remainder_part,
        "infinite": infinite,
    }


def whitney_modulus(jet, k=None, metric=None, scales=None):
    """Scale-indexed modulus t -> max over pairs within distance t of
    |R_J| / d^(k - hom(J)).

    Nondecreasing in t by construction.  ``scales`` defaults to the sorted
    distinct pair distances; the hypothesis check at scale t is
    ``omega(t) <= eps``.
    """
    k = jet.order if k is None else k
    metric = metric or Metric(jet.group, "quasi")
    if len(jet.points) < 2:
        raise IncompleteJet("modulus needs at least two points")
    rem = remainders(jet, k)
    d = _pair_distances(jet, metric)
    w = jet.group.weights
    n = len(jet.points)
    pair_d = []
    pair_score = []
    for i0 in range(n):
        for i1 in range(n):
            if i0 == i1:
                continue
            dij = d[i0, i1]
            if dij <= 0.0:
                same = all(
                    abs(rem.values[J][i0, i1]) <= 1e-12 for J in rem.indices
                )
                if not same:
                    raise CoincidentPoints(
                        "coincident base points with differing jet values"
                    )
                continue
            score = max(
                abs(rem.values[J][i0, i1]) / dij ** (k - mi_hom(J, w))
                for J in rem.indices
            )
            pair_d.append(dij)
            pair_score.append(score)
    pair_d = np.asarray(pair_d)
    pair_score = np.asarray(pair_score)
    order = np.argsort(pair_d)
    sorted_d = pair_d[order]
    prefix = np.maximum.accumulate(pair_score[order])
    if scales is None:
        scales = sorted(set(float(x) for x in sorted_d))
    table = []
    for t in scales:
        pos = np.searchsorted(sorted_d, t, side="right") - 1
        omega = float(prefix[pos]) if pos >= 0 else 0.0
        table.append((float(t), omega))
    return table


# ---------------------------------------------------------------------------
# symbolic decay probe


def taylor_decay_probe(group, u, x0, k, radii, metric=None, sphere_samples=400,
                       seed=0, order_offset=0):
    """Log-log decay rate of the Taylor remainder of a symbolic polynomial.

    For each radius r the probe records sup over sampled points of
    ``|u(x) - P(x)|`` with P the order-k expansion at x0 (set
    ``order_offset=-1`` to expand at order k-1 and normalize by r^k, the
    bounded-ratio regime).  Returns exact_zero when the remainder vanishes
    identically; otherwise the regression slope of log sup against log r,
    plus the normalized ratios.
    """
    metric = metric or Metric(group, "quasi")
    expand_order = k + order_offset
    jet = Jet.of_polynomial(group, u, expand_order, [tuple(x0)])
    tp = taylor_poly(jet, 0, expand_order)
    remainder = u - tp.poly
    if remainder.is_zero():
        return {"exact_zero": True, "slope": math.inf, "sups": [], "ratios": []}
    rem = remainder.as_float()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    shell = metric.sample_unit_ball(sphere_samples, rng)
    x0f = np.array([float(c) for c in x0])
    sups = []
    for r in radii:
        pts = group.law.multiply_many(
            x0f[None, :], group.law.dilate_many(float(r), shell)
        )
        sups.append(float(np.max(np.abs(rem.eval_many(pts)))))
    logs = np.log(np.asarray(sups))
    logr = np.log(np.asarray([float(r) for r in radii]))
    slope = float(np.polyfit(logr, logs, 1)[0])
    ratios = [s / float(r) ** k for s, r in zip(sups, radii)]
    return {"exact_zero": False, "slope": slope, "sups": sups, "ratios": ratios}


# ---------------------------------------------------------------------------
# jet file format: header + per-point records `x_1 ... x_N  J  value`


def jet_to_text(jet):
    lines = [
        f"# carnotjet jet file v1",
        f"group {jet.group.name}",
        f"order {jet.order}",
    ]
    for pi, p in enumerate(jet.points):
        coords = " ".join(repr(float(c)) for c in p)
        for J in jet.indices:
            jtxt = ",".join(str(j) for j in J)
            lines.append(f"{coords}  {jtxt}  {jet.values[J][pi]!r}")
    return "\n".join(lines) + "\n"


def jet_from_text(group, text):
    order = None
    records = {}
    points = []
    seen = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("group "):
            continue
        if line.startswith("order "):
            order = int(line.split()[1])
            continue
        parts = line.split()
        coords = tuple(float(v) for v in parts[: group.dim])
        J = tuple(int(s) for s in parts[group.dim].split(","))
        val = float(parts[group.dim + 1])
        if coords not in seen:
            seen[coords] = len(points)
            points.append(coords)
        records.setdefault(J, {})[seen[coords]] = val
    if order is None:
        raise IncompleteJet("jet file missing order header")
    values = {}
    for J, d in records.items():
        values[J] = [d[i] for i in range(len(points))]
    return Jet(group, order, points, values)
