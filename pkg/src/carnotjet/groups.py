"""Carnot groups in exponential coordinates: exact group law and basic ops.

A group is specified by its stratification (layer dimensions) and the
structure constants of an adapted basis.  The product is computed once,
symbolically, as ``x * y = x + y + Q(x, y)`` where the correction
polynomials Q_i come from the Baker-Campbell-Hausdorff series; for a
nilpotent algebra of step s the series is the finite Dynkin sum over
bracket words of length at most s, so all coefficients are exact rationals.

Points are plain sequences of scalars.  Exact paths use Fractions, numeric
paths use floats or numpy arrays; the polynomial layer keeps the two apart.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import (
    DimensionMismatch,
    GradingViolation,
    GroupFileError,
    JacobiViolation,
    NonGenerating,
)
from .exactlinalg import exact_rank
from .poly import Poly, VarSpace


class StratificationSpec:
    """Layer dimensions of a stratified algebra and the derived bookkeeping.

    ``layer_dims = (m_1, ..., m_s)`` gives cumulative offsets ``h_i``, total
    dimension ``N = h_s``, per-coordinate homogeneity ``weights`` (coordinate
    i in layer j scales like lam**j under dilations), and the homogeneous
    dimension ``Q = sum(j * m_j)`` that governs ball-volume scaling.
    """

    __slots__ = ("step", "layer_dims", "h", "dim", "weights", "hom_dim")

    def __init__(self, layer_dims):
        dims = tuple(int(m) for m in layer_dims)
        if not dims or any(m < 1 for m in dims):
            raise ValueError("layer dimensions must be positive integers")
        self.layer_dims = dims
        self.step = len(dims)
        h = [0]
        for m in dims:
            h.append(h[-1] + m)
        self.h = tuple(h)
        self.dim = h[-1]
        self.weights = tuple(
            j + 1 for j, m in enumerate(dims) for _ in range(m)
        )
        self.hom_dim = sum((j + 1) * m for j, m in enumerate(dims))

    def layer_of(self, i):
        """Layer (1-based) of coordinate i (0-based)."""
        return self.weights[i]

    def layer_slice(self, layer):
        """Index slice of layer (1-based) coordinates."""
        return slice(self.h[layer - 1], self.h[layer])

    def __eq__(self, other):
        return (
            isinstance(other, StratificationSpec)
            and self.layer_dims == other.layer_dims
        )

    def __hash__(self):
        return hash(self.layer_dims)

    def __repr__(self):
        return f"StratificationSpec{self.layer_dims}"


class StructureConstants:
    """Bracket table of an adapted basis: [X_i, X_j] = sum_l c[l,i,j] X_l.

    Stored sparsely for i < j; antisymmetry is built in.  ``validate``
    checks the grading, the Jacobi identity, and that first-layer brackets
    generate each successive layer, all in exact arithmetic.
    """

    def __init__(self, spec, brackets):
        """``brackets``: iterable of (i, j, l, coeff) with 0-based indices."""
        self.spec = spec
        table = {}
        for i, j, l, c in brackets:
            c = Fraction(c)
            if c == 0:
                continue
            if i == j:
                raise GradingViolation(f"bracket [X_{i}, X_{i}] must vanish")
            if i > j:
                i, j, c = j, i, -c
            table.setdefault((i, j), {})
            table[(i, j)][l] = table[(i, j)].get(l, Fraction(0)) + c
        self.table = {
            key: tuple(sorted((l, c) for l, c in val.items() if c != 0))
            for key, val in table.items()
        }
        self.table = {k: v for k, v in self.table.items() if v}

    def coefficient(self, l, i, j):
        """c[l][i][j], including the antisymmetric half."""
        if i == j:
            return Fraction(0)
        sign = 1
        if i > j:
            i, j, sign = j, i, -1
        for ll, c in self.table.get((i, j), ()):
            if ll == l:
                return sign * c
        return Fraction(0)

    def bracket_vectors(self, u, v):
        """Bracket of two coefficient vectors (lists of Fractions)."""
        n = self.spec.dim
        out = [Fraction(0)] * n
        for (i, j), entries in self.table.items():
            w = u[i] * v[j] - u[j] * v[i]
            if w == 0:
                continue
            for l, c in entries:
                out[l] += c * w
        return out

    def bracket_polys(self, u, v, space):
        """Bracket of two vectors of polynomials over ``space``."""
        n = self.spec.dim
        out = [Poly.zero(space) for _ in range(n)]
        for (i, j), entries in self.table.items():
            w = u[i] * v[j] - u[j] * v[i]
            if w.is_zero():
                continue
            for l, c in entries:
                out[l] = out[l] + w.scale(c)
        return out

    def validate(self):
        spec = self.spec
        d = spec.weights
        # grading: c[l][i][j] = 0 unless layer(l) = layer(i) + layer(j)
        for (i, j), entries in self.table.items():
            for l, c in entries:
                if d[l] != d[i] + d[j]:
                    raise GradingViolation(
                        f"[X_{i+1}, X_{j+1}] -> X_{l+1} violates the grading "
                        f"({d[i]}+{d[j]} != {d[l]})"
                    )
        # Jacobi identity on basis triples, exact
        n = spec.dim
        basis = [
            [Fraction(1) if k == i else Fraction(0) for k in range(n)]
            for i in range(n)
        ]
        for i in range(n):
            for j in range(i + 1, n):
                for k in range(j + 1, n):
                    acc = [Fraction(0)] * n
                    for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
                        inner = self.bracket_vectors(basis[b], basis[c])
                        term = self.bracket_vectors(basis[a], inner)
                        acc = [x + y for x, y in zip(acc, term)]
                    if any(x != 0 for x in acc):
                        raise JacobiViolation(
                            f"Jacobi fails on (X_{i+1}, X_{j+1}, X_{k+1})"
                        )
        # layer generation: [V_1, V_l] spans V_{l+1}
        for layer in range(2, spec.step + 1):
            rows = []
            lo, hi = spec.h[layer - 1], spec.h[layer]
            for a in range(spec.h[0], spec.h[1]):
                for b in range(spec.h[layer - 2], spec.h[layer - 1]):
                    vec = self.bracket_vectors(basis[a], basis[b])
                    rows.append(vec[lo:hi])
            if exact_rank(rows) < hi - lo:
                raise NonGenerating(
                    f"first-layer brackets do not span layer {layer}"
                )
        return True


# ---------------------------------------------------------------------------
# BCH / Dynkin expansion


def _dynkin_blocks(step):
    """All ordered block sequences ((r_1,s_1),...,(r_n,s_n)), r_i+s_i>=1,
    with total degree at most ``step``."""
    seqs = []

    def rec(budget, prefix):
        if prefix:
            seqs.append(tuple(prefix))
        for t in range(1, budget + 1):
            for r in range(t + 1):
                prefix.append((r, t - r))
                rec(budget - t, prefix)
                prefix.pop()

    rec(step, [])
    return seqs


def bch_truncated(sc):
    """Coordinates of log(exp X exp Y) as polynomials in (x, y).

    Returns the vector of dim polynomials over the doubled space.  The sum
    runs over the Dynkin expansion; every nested bracket of length above the
    step vanishes by nilpotency, so the expansion is exact.
    """
    spec = sc.spec
    n = spec.dim
    space = VarSpace(spec.weights).doubled()
    xs = [Poly.coordinate(space, i) for i in range(n)]
    ys = [Poly.coordinate(space, n + i) for i in range(n)]
    letters = (xs, ys)

    memo = {}

    def nested(word):
        if word in memo:
            return memo[word]
        if len(word) == 1:
            vec = letters[word[0]]
        elif word[-1] == word[-2]:
            vec = [Poly.zero(space) for _ in range(n)]  # ends in [a, a] = 0
        else:
            tail = nested(word[1:])
            vec = sc.bracket_polys(letters[word[0]], tail, space)
        memo[word] = vec
        return vec

    total = [Poly.zero(space) for _ in range(n)]
    for blocks in _dynkin_blocks(spec.step):
        word = []
        denom = 1
        for r, s in blocks:
            word.extend([0] * r + [1] * s)
            denom *= math.factorial(r) * math.factorial(s)
        m = len(word)
        coeff = Fraction((-1) ** (len(blocks) - 1), len(blocks) * m * denom)
        vec = nested(tuple(word))
        for i in range(n):
            if not vec[i].is_zero():
                total[i] = total[i] + vec[i].scale(coeff)
    return total


class GroupLaw:
    """The product in coordinates: ``x * y = x + y + Q(x, y)``.

    ``corrections`` holds the N polynomials Q_i over the doubled space.
    The law also exposes vectorized numeric products and symbolic
    left-translation machinery used throughout the package.
    """

    def __init__(self, spec, corrections):
        self.spec = spec
        self.corrections = list(corrections)
        self.space2 = VarSpace(spec.weights).doubled()
        self._eval_cache = {}

    # -- exact point ops ------------------------------------------------------

    def _check_point(self, p):
        if len(p) != self.spec.dim:
            raise DimensionMismatch(
                f"point has {len(p)} coordinates, group has {self.spec.dim}"
            )

    def multiply(self, p, q):
        self._check_point(p)
        self._check_point(q)
        pq = tuple(p) + tuple(q)
        return tuple(
            a + b + Qi.eval(pq)
            for a, b, Qi in zip(p, q, self.corrections)
        )

    def inverse(self, p):
        self._check_point(p)
        return tuple(-a for a in p)

    def dilate(self, lam, p):
        self._check_point(p)
        if isinstance(lam, (int, Fraction)) and all(
            isinstance(x, (int, Fraction)) for x in p
        ):
            lam = Fraction(lam)
        return tuple(lam ** w * x for w, x in zip(self.spec.weights, p))

    def origin(self):
        return (Fraction(0),) * self.spec.dim

    # -- numeric array ops ----------------------------------------------------

    def _correction_arrays(self, i):
        if i not in self._eval_cache:
            Qi = self.corrections[i]
            if Qi.is_zero():
                self._eval_cache[i] = None
            else:
                exps = np.array(list(Qi.terms.keys()), dtype=np.int64)
                coeffs = np.array([float(c) for c in Qi.terms.values()])
                self._eval_cache[i] = (exps, coeffs)
        return self._eval_cache[i]

    def multiply_many(self, xs, ys):
        """Row-wise products of two (n, N) float arrays."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        xs, ys = np.broadcast_arrays(xs, ys)
        out = xs + ys
        pts = np.hstack([xs, ys])
        for i in range(self.spec.dim):
            arrs = self._correction_arrays(i)
            if arrs is None:
                continue
            exps, coeffs = arrs
            out[:, i] += np.prod(pts[:, None, :] ** exps[None, :, :], axis=2) @ coeffs
        return out

    def dilate_many(self, lam, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        w = np.array(self.spec.weights, dtype=float)
        lam = np.asarray(lam, dtype=float)
        if lam.ndim == 0:
            return xs * lam ** w
        return xs * lam[:, None] ** w[None, :]

    # -- symbolic composition --------------------------------------------------

    def translate_polys(self, g, r=1, exact=True):
        """Coordinate polynomials of ``y -> g * dilate(r, y)``.

        Returns N polynomials in y over the single space; with exact inputs
        the result is exact.  Used to push polynomials through left
        translations and to center Taylor expansions.
        """
        self._check_point(g)
        space = VarSpace(self.spec.weights)
        n = self.spec.dim
        if exact:
            g = tuple(Fraction(a) for a in g)
            r = Fraction(r)
        else:
            g = tuple(float(a) for a in g)
            r = float(r)
        # substitute x := g (constants), y := dilate(r, y) into x + y + Q(x,y)
        repl = [Poly.constant(space, gi, exact) for gi in g]
        repl += [
            Poly.monomial(space, tuple(1 if k == i else 0 for k in range(n)),
                          r ** self.spec.weights[i], exact)
            for i in range(n)
        ]
        out = []
        for i in range(n):
            zi = repl[i] + repl[n + i]
            Qi = self.corrections[i] if exact else self.corrections[i].as_float()
            if not Qi.is_zero():
                zi = zi + Qi.substitute(repl)
            out.append(zi)
        return out


def build_group_law(sc, spec=None):
    """Construct the exact group law from validated structure constants.

    The returned law satisfies: Q_i = 0 on the first layer, joint
    homogeneity of each Q_i, Q_i(x, x) = 0, and associativity (the latter
    exercised by the verification suites rather than at build time).
    """
    if spec is not None and spec != sc.spec:
        raise DimensionMismatch("structure constants and spec disagree")
    spec = sc.spec
    sc.validate()
    z = bch_truncated(sc)
    n = spec.dim
    space2 = VarSpace(spec.weights).doubled()
    corrections = []
    for i in range(n):
        Qi = z[i] - Poly.coordinate(space2, i) - Poly.coordinate(space2, n + i)
        corrections.append(Qi)
    law = GroupLaw(spec, corrections)
    _validate_law(law)
    return law


def _validate_law(law):
    spec = law.spec
    n = spec.dim
    space = VarSpace(spec.weights)
    for i, Qi in enumerate(law.corrections):
        if i < spec.layer_dims[0] and not Qi.is_zero():
            raise GradingViolation(f"Q_{i+1} must vanish on the first layer")
        for (deg, _part) in Qi.homogeneous_parts():
            if deg != spec.weights[i]:
                raise GradingViolation(
                    f"Q_{i+1} has a term of joint degree {deg}, expected "
                    f"{spec.weights[i]}"
                )
        # Q_i(x, x) = 0 as a polynomial identity
        coords = [Poly.coordinate(space, k) for k in range(n)]
        diag = Qi.substitute(coords + coords)
        if not diag.is_zero():
            raise GradingViolation(f"Q_{i+1}(x, x) != 0")


# ---------------------------------------------------------------------------
# group facade and built-ins


class CarnotGroup:
    """A stratified group: spec, structure constants, law, and cached calculus.

    Instances are immutable and safe to share; derived objects (vector
    fields, coefficient tables) are built lazily and cached on the instance.
    """

    def __init__(self, name, sc):
        self.name = name
        self.sc = sc
        self.spec = sc.spec
        self.law = build_group_law(sc)
        self.space = VarSpace(self.spec.weights)
        self._cache = {}

    # point ops delegate to the law
    def multiply(self, p, q):
        return self.law.multiply(p, q)

    def inverse(self, p):
        return self.law.inverse(p)

    def dilate(self, lam, p):
        return self.law.dilate(lam, p)

    def origin(self):
        return self.law.origin()

    @property
    def dim(self):
        return self.spec.dim

    @property
    def hom_dim(self):
        return self.spec.hom_dim

    @property
    def step(self):
        return self.spec.step

    @property
    def weights(self):
        return self.spec.weights

    def is_abelian(self):
        return self.spec.step == 1

    # -- homogeneous norm and quasi-distance ----------------------------------

    def hom_norm(self, p):
        """Layerwise norm sum: sum_j |x^(j)|**(1/j).  1-homogeneous, zero
        only at the origin."""
        self.law._check_point(p)
        total = 0.0
        for layer in range(1, self.step + 1):
            sl = self.spec.layer_slice(layer)
            block = [float(x) for x in p[sl]]
            norm = math.sqrt(sum(x * x for x in block))
            if norm:
                total += norm ** (1.0 / layer)
        return total

    def hom_norm_many(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        total = np.zeros(pts.shape[0])
        for layer in range(1, self.step + 1):
            sl = self.spec.layer_slice(layer)
            norm = np.sqrt(np.sum(pts[:, sl] ** 2, axis=1))
            total += norm ** (1.0 / layer)
        return total

    def quasi_distance(self, p, q):
        """hom_norm(p^{-1} q): left-invariant, 1-homogeneous."""
        return self.hom_norm(self.multiply(self.inverse(p), q))

    def quasi_distance_many(self, xs, ys):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return self.hom_norm_many(self.law.multiply_many(-xs, ys))

    def __repr__(self):
        return f"CarnotGroup({self.name}, layers={self.spec.layer_dims})"


def abelian(n):
    """R^n with addition: the step-1, everything-is-classical case."""
    spec = StratificationSpec((n,))
    return CarnotGroup(f"abelian{n}", StructureConstants(spec, []))


def heisenberg():
    """First Heisenberg group: layers (2, 1), [X1, X2] = X3."""
    spec = StratificationSpec((2, 1))
    return CarnotGroup("heisenberg", StructureConstants(spec, [(0, 1, 2, 1)]))


def engel():
    """Engel group: layers (2, 1, 1), [X1, X2] = X3, [X1, X3] = X4."""
    spec = StratificationSpec((2, 1, 1))
    sc = StructureConstants(spec, [(0, 1, 2, 1), (0, 2, 3, 1)])
    return CarnotGroup("engel", sc)


_BUILTINS = {}


def builtin_group(name):
    """Resolve a built-in group by name (abelian1..abelian5, heisenberg, engel)."""
    if name not in _BUILTINS:
        if name == "heisenberg":
            _BUILTINS[name] = heisenberg()
        elif name == "engel":
            _BUILTINS[name] = engel()
        elif name.startswith("abelian"):
            n = int(name[len("abelian"):])
            _BUILTINS[name] = abelian(n)
        else:
            raise KeyError(f"unknown built-in group {name!r}")
    return _BUILTINS[name]


# ---------------------------------------------------------------------------
# group specification files
#
# Format (exact rationals only):
#   step 2
#   layer_dims 2 1
#   bracket 1 2 3 1 1        # [X_1, X_2] = (1/1) X_3, 1-based indices
# Blank lines and '#' comments allowed.


def parse_group_file(text, name="custom"):
    step = None
    dims = None
    brackets = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "step":
                step = int(parts[1])
            elif key == "layer_dims":
                dims = tuple(int(p) for p in parts[1:])
            elif key == "bracket":
                i, j, l, num, den = (int(p) for p in parts[1:6])
                brackets.append((i - 1, j - 1, l - 1, Fraction(num, den)))
            else:
                raise GroupFileError(f"unknown directive {key!r}", lineno)
        except GroupFileError:
            raise
        except (IndexError, ValueError, ZeroDivisionError) as exc:
            raise GroupFileError(str(exc), lineno) from exc
    if dims is None:
        raise GroupFileError("missing layer_dims")
    spec = StratificationSpec(dims)
    if step is not None and step != spec.step:
        raise GroupFileError(
            f"declared step {step} does not match {spec.step} layers"
        )
    return CarnotGroup(name, StructureConstants(spec, brackets))


def load_group(source):
    """Resolve a group from a built-in name or a specification file path."""
    try:
        return builtin_group(str(source))
    except KeyError:
        pass
    from pathlib import Path

    path = Path(source)
    return parse_group_file(path.read_text(), name=path.stem)


def group_file_text(group):
    lines = [f"step {group.step}", "layer_dims " + " ".join(map(str, group.spec.layer_dims))]
    for (i, j), entries in sorted(group.sc.table.items()):
        for l, c in entries:
            lines.append(f"bracket {i+1} {j+1} {l+1} {c.numerator} {c.denominator}")
    return "\n".join(lines) + "\n"
