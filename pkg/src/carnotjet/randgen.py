"""Seeded generators for rational points and graded polynomials.

Shared by the verification suites and the test oracles.  Everything is a
pure function of a numpy Generator, so suites stay replayable: derive
sub-generators with ``numpy.random.SeedSequence(seed).spawn(n)``.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .poly import Poly, VarSpace, multi_indices


def rng_from(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))


def spawn_rngs(seed, n):
    """Deterministic partition of a seed into n independent generators."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def random_fraction(rng, max_num=8, max_den=6):
    num = int(rng.integers(-max_num, max_num + 1))
    den = int(rng.integers(1, max_den + 1))
    return Fraction(num, den)


def random_rational_point(group, rng, max_num=8, max_den=6):
    return tuple(
        random_fraction(rng, max_num, max_den) for _ in range(group.dim)
    )


def random_polynomial(group, rng, max_hom, n_terms=None, exact=True, max_num=6,
                      max_den=4):
    """Random polynomial of homogeneous degree <= max_hom with rational
    coefficients (nonzero by construction)."""
    space = VarSpace(group.weights)
    idx = multi_indices(group.weights, max_hom)
    if n_terms is None:
        n_terms = min(len(idx), 6)
    chosen = rng.choice(len(idx), size=min(n_terms, len(idx)), replace=False)
    terms = {}
    for c in chosen:
        f = random_fraction(rng, max_num, max_den)
        if f == 0:
            f = Fraction(1, int(rng.integers(1, max_den + 1)))
        terms[idx[int(c)]] = f
    if not terms:
        terms[idx[0]] = Fraction(1)
    return Poly(space, terms, exact=exact)


def random_unit_sphere_polynomial(group, rng, max_hom, rationalize=10**6):
    """Dense polynomial with coefficient vector on the unit sphere, then
    snapped to exact rationals so symbolic operators stay exact."""
    space = VarSpace(group.weights)
    idx = multi_indices(group.weights, max_hom)
    vec = rng.normal(size=len(idx))
    vec /= np.sqrt(np.sum(vec * vec))
    terms = {}
    for J, c in zip(idx, vec):
        f = Fraction(float(c)).limit_denominator(rationalize)
        if f != 0:
            terms[J] = f
    if not terms:
        terms[idx[0]] = Fraction(1)
    return Poly(space, terms, exact=True)
