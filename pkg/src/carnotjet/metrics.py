"""Distances, balls, and volumes.

Two metric kinds are supported behind one selector:

* ``"quasi"`` -- the homogeneous quasi-distance ``hom_norm(p^{-1} q)``.
  Available on every group; equivalent to the geodesic distance up to a
  constant, which is all most estimates need.
* ``"cc"`` -- the genuine geodesic (Carnot-Caratheodory) distance.  Exact on
  step-1 groups (it is the Euclidean distance there) and available on the
  first Heisenberg group through a geodesic solver; elsewhere it raises
  MetricUnsupported.  Only geodesic-midpoint arguments genuinely need it.

Monte-Carlo volume estimates are pure functions of an explicit seed; callers
that parallelize must partition seeds with ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import CoincidentPoints, DimensionMismatch, MetricUnsupported

_H1_LAYERS = (2, 1)


def _is_h1(group):
    return group.spec.layer_dims == _H1_LAYERS


# ---------------------------------------------------------------------------
# Heisenberg geodesic distance
#
# With the convention that the vertical coordinate accumulates the signed
# area (x*y' - y*x')/2, unit-speed geodesics from the origin are horizontal
# lifts of circular arcs.  For a target with horizontal displacement R > 0
# and height t, the turning half-angle psi in (0, pi) solves
#     (2 psi - sin 2 psi) / (8 sin^2 psi) = |t| / R^2
# (monotone increasing), and the distance is psi * R / sin(psi).  Purely
# vertical targets give the isoperimetric value 2*sqrt(pi*|t|).


def _h1_psi_ratio(psi):
    s = np.sin(psi)
    return (2.0 * psi - np.sin(2.0 * psi)) / (8.0 * s * s)


def h1_norm_many(pts, iters=80):
    """Geodesic distance from the origin, vectorized over (n, 3) arrays."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    R = np.hypot(pts[:, 0], pts[:, 1])
    t = np.abs(pts[:, 2])
    out = np.empty(len(pts))
    vertical = R <= 1e-14 * np.maximum(1.0, np.sqrt(t))
    out[vertical] = 2.0 * np.sqrt(np.pi * t[vertical])
    flat = (~vertical) & (t <= 1e-16 * np.maximum(R * R, 1.0))
    out[flat] = R[flat]
    rest = ~(vertical | flat)
    if np.any(rest):
        ratio = t[rest] / (R[rest] * R[rest])
        lo = np.full(ratio.shape, 1e-12)
        hi = np.full(ratio.shape, np.pi - 1e-12)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            too_low = _h1_psi_ratio(mid) < ratio
            lo = np.where(too_low, mid, lo)
            hi = np.where(too_low, hi, mid)
        psi = 0.5 * (lo + hi)
        out[rest] = psi * R[rest] / np.sin(psi)
    return out


def h1_norm(p):
    return float(h1_norm_many(np.asarray(p, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# metric selector


@dataclass(frozen=True)
class _BallBox:
    """Axis-aligned box guaranteed to contain the unit ball."""

    half_widths: tuple


class Metric:
    """A distance on a fixed group, selected by kind ('quasi' or 'cc')."""

    def __init__(self, group, kind="quasi"):
        if kind not in ("quasi", "cc"):
            raise ValueError(f"unknown metric kind {kind!r}")
        if kind == "cc" and not (group.is_abelian() or _is_h1(group)):
            raise MetricUnsupported(
                f"no geodesic oracle for group {group.name!r}; use 'quasi'"
            )
        self.group = group
        self.kind = kind
        self._volume_cache = {}

    # -- distances -------------------------------------------------------------

    def norm(self, p):
        """Distance from the origin."""
        if self.kind == "quasi":
            return self.group.hom_norm(p)
        if self.group.is_abelian():
            return math.sqrt(sum(float(x) ** 2 for x in p))
        return h1_norm(p)

    def norm_many(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != self.group.dim:
            raise DimensionMismatch("point width does not match the group")
        if self.kind == "quasi":
            return self.group.hom_norm_many(pts)
        if self.group.is_abelian():
            return np.sqrt(np.sum(pts * pts, axis=1))
        return h1_norm_many(pts)

    def dist(self, p, q):
        return self.norm(self.group.multiply(self.group.inverse(p), q))

    def dist_many(self, xs, ys):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        return self.norm_many(self.group.law.multiply_many(-xs, ys))

    # -- geometry helpers --------------------------------------------------------

    def unit_ball_box(self):
        """Half-widths of a box containing the unit ball around the origin."""
        spec = self.group.spec
        if self.kind == "quasi" or self.group.is_abelian():
            # |x^(j)| <= 1 per layer for the layerwise norm; Euclidean ball
            # for abelian cc.  Either way the unit cube works and is tight.
            return _BallBox(tuple(1.0 for _ in range(spec.dim)))
        # H1 geodesic ball: horizontal reach <= 1, area swept <= 1/(4 pi)
        return _BallBox((1.0, 1.0, 1.0 / (4.0 * math.pi)))

    def ball_box(self, r):
        hw = self.unit_ball_box().half_widths
        w = self.group.weights
        return tuple(h * float(r) ** wi for h, wi in zip(hw, w))

    def sample_unit_ball(self, n, rng):
        """Uniform sample of the unit ball by rejection from its box."""
        hw = np.array(self.unit_ball_box().half_widths)
        dim = self.group.dim
        out = np.empty((n, dim))
        got = 0
        while got < n:
            draw = max(n - got, 1024)
            pts = rng.uniform(-1.0, 1.0, size=(draw, dim)) * hw
            keep = pts[self.norm_many(pts) <= 1.0]
            take = min(len(keep), n - got)
            out[got : got + take] = keep[:take]
            got += take
        return out

    def sample_ball(self, center, r, n, rng):
        """Uniform sample of B(center, r) via dilation and left translation."""
        unit = self.sample_unit_ball(n, rng)
        pts = self.group.law.dilate_many(float(r), unit)
        c = np.asarray([float(x) for x in center], dtype=float)
        return self.group.law.multiply_many(c[None, :], pts)

    # -- volume --------------------------------------------------------------

    def unit_ball_volume(self, mc_samples=200_000, seed=0):
        """Measure of the unit ball with a standard error.

        Closed form for step-1 groups (Euclidean ball volume); Monte Carlo
        estimate from the bounding box otherwise.  Results are cached per
        (samples, seed).
        """
        if self.group.is_abelian() and self.kind == "cc":
            n = self.group.dim
            v = math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)
            return v, 0.0
        key = (int(mc_samples), int(seed))
        if key not in self._volume_cache:
            rng = np.random.default_rng(np.random.SeedSequence(seed))
            hw = np.array(self.unit_ball_box().half_widths)
            box_vol = float(np.prod(2.0 * hw))
            pts = rng.uniform(-1.0, 1.0, size=(int(mc_samples), self.group.dim)) * hw
            frac = float(np.mean(self.norm_many(pts) <= 1.0))
            vol = box_vol * frac
            stderr = box_vol * math.sqrt(max(frac * (1.0 - frac), 0.0) / mc_samples)
            self._volume_cache[key] = (vol, stderr)
        return self._volume_cache[key]

    def ball_volume(self, r, **kw):
        v, se = self.unit_ball_volume(**kw)
        scale = float(r) ** self.group.hom_dim
        return v * scale, se * scale


def get_metric(group, kind="quasi"):
    return Metric(group, kind)


# ---------------------------------------------------------------------------
# distance bracketing by horizontal path optimization


def _chain_endpoint(law, controls, dt):
    """Endpoint of the piecewise-horizontal path with the given controls."""
    m = law.spec.layer_dims[0]
    n = law.spec.dim
    p = np.zeros((1, n))
    for u in controls:
        seg = np.zeros((1, n))
        seg[0, :m] = u * dt
        p = law.multiply_many(p, seg)
    return p[0]


def cc_distance_estimate(group, p, q, resolution=8, metric=None, restarts=2, seed=0):
    """Bracket the geodesic distance between p and q.

    The upper bound is the length of the best piecewise-horizontal path with
    ``resolution`` constant-control segments, found by constrained
    optimization; the lower bound is the quasi-distance divided by a
    calibrated equivalence constant.  Returns a dict with ``lower``,
    ``upper``, ``converged`` and the endpoint defect of the optimized path.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    law = group.law
    m = law.spec.layer_dims[0]
    target = np.array(
        [float(x) for x in group.multiply(group.inverse(p), q)], dtype=float
    )
    quasi = group.hom_norm(target)
    if quasi == 0.0:
        return {"lower": 0.0, "upper": 0.0, "converged": True, "defect": 0.0}
    dt = 1.0 / resolution

    def endpoint(flat):
        return _chain_endpoint(law, flat.reshape(resolution, m), dt)

    def length(flat):
        u = flat.reshape(resolution, m)
        return float(np.sum(np.sqrt(np.sum(u * u, axis=1) + 1e-18)) * dt)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    best = None
    for trial in range(restarts):
        if trial == 0:
            guess = np.tile(target[:m] / 1.0, (resolution, 1))
            if group.step > 1:
                guess += rng.normal(scale=0.3 * (quasi + 1.0), size=(resolution, m))
        else:
            guess = rng.normal(scale=quasi + 1.0, size=(resolution, m))
        res = optimize.minimize(
            length,
            guess.ravel(),
            method="SLSQP",
            constraints=[{"type": "eq", "fun": lambda f: endpoint(f) - target}],
            options={"maxiter": 400, "ftol": 1e-12},
        )
        defect = float(np.max(np.abs(endpoint(res.x) - target)))
        cand = (length(res.x), defect, bool(res.success))
        if best is None or cand[0] < best[0]:
            best = cand
    upper, defect, ok = best
    c_est = calibration_constant(group)
    lower = quasi / c_est
    converged = ok and defect < 1e-6 * max(1.0, quasi)
    return {
        "lower": min(lower, upper),
        "upper": upper,
        "converged": converged,
        "defect": defect,
    }


_CALIBRATION = {}


def calibration_constant(group, samples=4096, seed=20_240_901):
    """Empirical constant c with quasi <= c * geodesic on sampled directions.

    Exact (1.0) on abelian groups.  Where a geodesic oracle exists the
    constant is a sampled supremum of quasi/cc over the unit sphere; for
    other groups it falls back on optimized path upper bounds, which makes
    the resulting lower bounds surrogate rather than certified.
    """
    key = (id(group), samples, seed)
    if key in _CALIBRATION:
        return _CALIBRATION[key]
    if group.is_abelian():
        _CALIBRATION[key] = 1.0
        return 1.0
    quasi = Metric(group, "quasi")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pts = quasi.sample_unit_ball(samples, rng)
    norms = quasi.norm_many(pts)
    keep = norms > 1e-9
    pts = group.law.dilate_many(1.0 / norms[keep], pts[keep])
    if _is_h1(group):
        cc = h1_norm_many(pts)
        c = float(np.max(1.0 / cc))
    else:
        ups = []
        for row in pts[: min(64, len(pts))]:
            est = cc_distance_estimate(group, group.origin(), tuple(row), 6)
            ups.append(est["upper"])
        c = float(np.max(1.0 / np.asarray(ups)))
    c = max(c, 1e-9)
    _CALIBRATION[key] = c
    return c


def equivalence_constants(group, box_half_widths, samples=20_000, metric=None, seed=0):
    """Empirical extremal ratios between the selected metric and Euclidean.

    Over sampled pairs in the box, reports
      c1 = inf d(x,y)/|x-y|        (linear lower comparison)
      c2 = sup d(x,y)/|x-y|**(1/s) (root upper comparison)
      c  = sup ratio between hom_norm and d in both directions
    together with the sample count.  On step-1 groups all three are 1.
    """
    metric = metric or Metric(group, "quasi")
    hw = np.asarray(box_half_widths, dtype=float)
    if hw.ndim == 0:
        hw = np.full(group.dim, float(hw))
    if len(hw) != group.dim or np.any(hw <= 0):
        raise ValueError("box must be nondegenerate with one half-width per axis")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    xs = rng.uniform(-1.0, 1.0, size=(samples, group.dim)) * hw
    ys = rng.uniform(-1.0, 1.0, size=(samples, group.dim)) * hw
    eu = np.sqrt(np.sum((xs - ys) ** 2, axis=1))
    keep = eu > 1e-12
    xs, ys, eu = xs[keep], ys[keep], eu[keep]
    d = metric.dist_many(xs, ys)
    s = group.step
    c1 = float(np.min(d / eu))
    c2 = float(np.max(d / eu ** (1.0 / s)))
    offs = group.law.multiply_many(-xs, ys)
    hn = group.hom_norm_many(offs)
    ratio = hn / np.maximum(d, 1e-300)
    c = float(max(np.max(ratio), np.max(1.0 / np.maximum(ratio, 1e-300))))
    return {"c1": c1, "c2": c2, "c": c, "samples": int(np.sum(keep))}
