"""Sampled functions on grids: density, approximate limits, and jet fitting.

The substrate is a :class:`SampledFunction`: values on the cell centers of
an axis-aligned box grid, plus a membership mask for the domain D.  All
measure bookkeeping is exact cell arithmetic (counts times cell volume);
ball membership uses cell-center inclusion, so discretization error is
bounded by a cell diameter and the discrete ball measure is used wherever
the continuum ball measure would appear, keeping both sides of every
comparison on the same footing.

Jet fitting is local least squares in the group-centered monomial basis
``(x0^{-1} y)^J / J!``; columns are dilation-normalized by the fit scale so
conditioning is scale-free.  The optional robust pass drops residual
outliers once and refits, which is what lets salt corruption be detected
and quarantined instead of smeared into the coefficients.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import (
    DimensionMismatch,
    RadiusUnderResolved,
    SpecMismatch,
    TooFewSamples,
)
from .jets import jet_indices, beta_table
from .metrics import Metric
from .poly import mi_factorial, mi_hom
from .randgen import rng_from

_MIN_BALL_CELLS = 50


class SampledFunction:
    """Gridded values with a domain mask.

    ``box``: per-axis (lo, hi); ``shape``: per-axis cell counts; ``values``
    and ``mask`` are arrays of that shape indexed by cell.  Values are only
    meaningful where the mask is set.
    """

    def __init__(self, group, box, values, mask=None):
        self.group = group
        self.box = [(float(lo), float(hi)) for lo, hi in box]
        if len(self.box) != group.dim:
            raise DimensionMismatch("box must have one interval per coordinate")
        self.values = np.asarray(values, dtype=float)
        self.shape = self.values.shape
        if len(self.shape) != group.dim:
            raise DimensionMismatch("values array rank must equal the dimension")
        if mask is None:
            mask = np.ones(self.shape, dtype=bool)
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != self.shape:
            raise DimensionMismatch("mask shape must match values shape")
        self.widths = np.array(
            [(hi - lo) / n for (lo, hi), n in zip(self.box, self.shape)]
        )
        self.lo = np.array([lo for lo, _ in self.box])
        self.cell_volume = float(np.prod(self.widths))

    # -- geometry --------------------------------------------------------------

    def center(self, idx):
        """Coordinates of the center of cell ``idx``."""
        return tuple(self.lo + (np.asarray(idx) + 0.5) * self.widths)

    def centers_axis(self, d):
        lo, _ = self.box[d]
        return lo + (np.arange(self.shape[d]) + 0.5) * self.widths[d]

    def index_near(self, x):
        """Index of the cell whose center is nearest to x."""
        raw = (np.asarray([float(c) for c in x]) - self.lo) / self.widths - 0.5
        idx = np.clip(np.rint(raw).astype(int), 0, np.array(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def domain_measure(self):
        return float(np.sum(self.mask)) * self.cell_volume

    @classmethod
    def from_callable(cls, group, box, shape, fn, mask=None):
        """Sample ``fn`` (vectorized over an (n, dim) array, or a Poly) on
        the cell centers."""
        axes = [
            np.array(b[0]) + (np.arange(n) + 0.5) * (b[1] - b[0]) / n
            for b, n in zip(box, shape)
        ]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        pts = mesh.reshape(-1, group.dim)
        if hasattr(fn, "eval_many"):
            vals = fn.eval_many(pts)
        else:
            vals = np.asarray(fn(pts), dtype=float)
        return cls(group, box, vals.reshape(shape), mask)

    def copy(self, values=None, mask=None):
        return SampledFunction(
            self.group,
            self.box,
            self.values if values is None else values,
            self.mask if mask is None else mask,
        )

    # -- dataset file format -----------------------------------------------------
    # header lines, then rows `cell_index value mask_bit` (flat C-order index)

    def to_text(self, k=None, group_ref=None):
        head = [
            "# carnotjet dataset v1",
            f"group {group_ref or self.group.name}",
            "box " + " ".join(f"{lo!r} {hi!r}" for lo, hi in self.box),
            "shape " + " ".join(str(n) for n in self.shape),
        ]
        if k is not None:
            head.append(f"k {k}")
        flat_v = self.values.ravel()
        flat_m = self.mask.ravel()
        rows = [
            f"{i} {flat_v[i]!r} {int(flat_m[i])}" for i in range(flat_v.size)
        ]
        return "\n".join(head + rows) + "\n"

    @classmethod
    def from_text(cls, text, group_resolver):
        group = None
        box = None
        shape = None
        k = None
        rows = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "group":
                group = group_resolver(parts[1])
            elif parts[0] == "box":
                nums = [float(p) for p in parts[1:]]
                box = list(zip(nums[0::2], nums[1::2]))
            elif parts[0] == "shape":
                shape = tuple(int(p) for p in parts[1:])
            elif parts[0] == "k":
                k = int(parts[1])
            else:
                rows.append((int(parts[0]), float(parts[1]), int(parts[2])))
        if group is None or box is None or shape is None:
            raise SpecMismatch("dataset file missing header fields")
        values = np.zeros(int(np.prod(shape)))
        mask = np.zeros(int(np.prod(shape)), dtype=bool)
        for i, v, m in rows:
            values[i] = v
            mask[i] = bool(m)
        f = cls(group, box, values.reshape(shape), mask.reshape(shape))
        f.order_hint = k
        return f


# ---------------------------------------------------------------------------
# local neighborhoods in the group metric


class _OffsetForm:
    """The group offset z = x0^{-1} y written in the lattice offset u = y - x0.

    Symbolically ``z_i = u_i + sum_t c_t x0^(alpha_t) u^(beta_t)`` where
    every correction term carries a u factor from a strictly lower layer.
    The split enables two things: tight per-axis candidate boxes by interval
    propagation, and fast per-cell evaluation in which the u-monomials are
    shared across all cells of a uniform grid.
    """

    def __init__(self, group):
        from .poly import Poly, VarSpace

        self.group = group
        n = group.dim
        law = group.law
        space2 = VarSpace(group.weights).doubled()
        x0_vars = [Poly.coordinate(space2, i) for i in range(n)]
        u_vars = [Poly.coordinate(space2, n + i) for i in range(n)]
        minus_x0 = [-p for p in x0_vars]
        y_vars = [x0_vars[i] + u_vars[i] for i in range(n)]
        self.terms = []
        for i in range(n):
            Qi = law.corrections[i]
            rows = []
            if not Qi.is_zero():
                Qpart = Qi.substitute(minus_x0 + y_vars)
                for JK, c in Qpart.terms.items():
                    xpart, upart = JK[:n], JK[n:]
                    if not any(upart):
                        raise RuntimeError(
                            "offset polynomial has a u-free term; law bug"
                        )
                    rows.append(
                        (float(c), np.array(xpart, dtype=np.int64),
                         np.array(upart, dtype=np.int64))
                    )
            self.terms.append(rows)

    def ranges(self, x0_abs, r):
        """Safe per-axis half-width for lattice offsets reaching the ball."""
        group = self.group
        n = group.dim
        w = group.weights
        half = np.zeros(n)
        for i in range(n):
            bound = float(r) ** w[i]
            for c, xp, up in self.terms[i]:
                t = abs(c)
                for j in range(n):
                    if xp[j]:
                        t *= x0_abs[j] ** int(xp[j])
                    if up[j]:
                        t *= half[j] ** int(up[j])
                bound += t
            half[i] = bound
        return half


class NeighborEngine:
    """Per-(dataset, radius) machinery for fast ball gathering.

    The generic path precomputes the integer offset lattice covering every
    ball of radius r and the shared u-monomials of the offset form.  Two
    structured fast paths avoid over-gathering:

    * step-1 groups: balls are lattice-translation invariant, so the ball
      offsets and distances are computed once.
    * step-2 groups with a one-dimensional vertical layer: the ball
      condition ``|u_h| + sqrt|z_v| <= r`` pins, for each horizontal
      column, an exact vertical index window around the twist
      ``z_v = u_v + t(x0, u_h)``, so exactly the ball cells are touched.
    """

    def __init__(self, f, r, metric=None):
        group = f.group
        self.f = f
        self.r = float(r)
        self.metric = metric or Metric(group, "quasi")
        self.form = _offset_form(group)
        self.shape = np.array(f.shape)
        self.strides = np.array(
            [int(np.prod(f.shape[d + 1 :])) for d in range(group.dim)]
        )
        self.mode = "generic"
        if self.metric.kind == "quasi" or group.is_abelian():
            if group.step == 1:
                self.mode = "translation"
                self._init_translation()
            elif group.step == 2 and group.spec.layer_dims[1] == 1:
                self.mode = "columns"
                self._init_columns()
        if self.mode == "generic":
            self._init_generic()

    # -- shared generic lattice -------------------------------------------------

    def _init_generic(self):
        f, group, r = self.f, self.f.group, self.r
        x0_abs = np.maximum(
            np.abs(f.lo), np.abs(f.lo + f.widths * np.array(f.shape))
        )
        half = self.form.ranges(x0_abs, r)
        counts = np.ceil(half / f.widths + 0.5).astype(int)
        axes = [np.arange(-c, c + 1) for c in counts]
        self.ioff = np.stack(
            np.meshgrid(*axes, indexing="ij"), axis=-1
        ).reshape(-1, group.dim)
        self.uoff = self.ioff * f.widths[None, :]
        self.monu = []
        for rows in self.form.terms:
            if rows:
                exps = np.stack([up for _c, _xp, up in rows])
                self.monu.append(
                    np.prod(self.uoff[:, None, :] ** exps[None, :, :], axis=2)
                )
            else:
                self.monu.append(None)

    def _init_translation(self):
        f, group, r = self.f, self.f.group, self.r
        counts = np.ceil(r / f.widths + 0.5).astype(int)
        axes = [np.arange(-c, c + 1) for c in counts]
        ioff = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(
            -1, group.dim
        )
        uoff = ioff * f.widths[None, :]
        dist = np.sqrt(np.sum(uoff * uoff, axis=1))
        keep = dist <= r
        self.ioff = ioff[keep]
        self.uoff = uoff[keep]
        self.dist0 = dist[keep]

    def _init_columns(self):
        f, group, r = self.f, self.f.group, self.r
        m1 = group.spec.layer_dims[0]
        counts = np.ceil(r / f.widths[:m1] + 0.5).astype(int)
        axes = [np.arange(-c, c + 1) for c in counts]
        cols = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(
            -1, m1
        )
        ucols = cols * f.widths[None, :m1]
        hnorm = np.sqrt(np.sum(ucols * ucols, axis=1))
        keep = hnorm <= r
        self.cols = cols[keep]
        self.ucols = ucols[keep]
        self.hnorm = hnorm[keep]
        self.bmax = (r - self.hnorm) ** 2
        # vertical twist: z_v = u_v + sum_t c_t x0^alpha u_h^gamma
        rows = self.form.terms[m1]
        ufull = np.zeros((len(self.ucols), group.dim))
        ufull[:, :m1] = self.ucols
        if rows:
            exps = np.stack([up for _c, _xp, up in rows])
            self.monu_v = np.prod(
                ufull[:, None, :] ** exps[None, :, :], axis=2
            )
            self.twist_terms = rows
        else:
            self.monu_v = None
            self.twist_terms = []
        self.m1 = m1

    # -- gathering ----------------------------------------------------------------

    def gather(self, cell):
        """Ball arrays around a cell center: (flat_indices, z, dist, x0)."""
        if self.mode == "translation":
            return self._gather_translation(cell)
        if self.mode == "columns":
            return self._gather_columns(cell)
        return self._gather_generic(cell)

    def _gather_translation(self, cell):
        f = self.f
        cell = np.asarray(cell)
        idx = cell[None, :] + self.ioff
        valid = np.all((idx >= 0) & (idx < self.shape[None, :]), axis=1)
        x0 = f.lo + (cell + 0.5) * f.widths
        flat = idx[valid] @ self.strides
        return flat, self.uoff[valid], self.dist0[valid], x0

    def _gather_columns(self, cell):
        f = self.f
        group = f.group
        m1 = self.m1
        cell = np.asarray(cell)
        x0 = f.lo + (cell + 0.5) * f.widths
        nz = f.shape[m1]
        hz = f.widths[m1]
        # twist per horizontal column
        if self.twist_terms:
            weights = np.array(
                [
                    c * np.prod(x0 ** xp) if xp.any() else c
                    for c, xp, _up in self.twist_terms
                ]
            )
            t = self.monu_v @ weights
        else:
            t = np.zeros(len(self.cols))
        # in-grid horizontal columns
        hidx = cell[None, :m1] + self.cols
        okcol = np.all((hidx >= 0) & (hidx < self.shape[None, :m1]), axis=1)
        # exact vertical windows: u_v in [-b - t, b - t], u_v = (j - cell_v) hz
        jlo = cell[m1] + np.ceil((-self.bmax - t) / hz - 1e-12).astype(int)
        jhi = cell[m1] + np.floor((self.bmax - t) / hz + 1e-12).astype(int)
        jlo = np.maximum(jlo, 0)
        jhi = np.minimum(jhi, nz - 1)
        cnt = np.where(okcol, np.maximum(jhi - jlo + 1, 0), 0)
        total = int(np.sum(cnt))
        if total == 0:
            return (
                np.empty(0, dtype=np.int64),
                np.empty((0, group.dim)),
                np.empty(0),
                x0,
            )
        sel = cnt > 0
        counts = cnt[sel]
        starts = jlo[sel]
        offsets_rep = np.repeat(np.arange(len(counts)), counts)
        seq = np.arange(total) - np.repeat(
            np.concatenate(([0], np.cumsum(counts)[:-1])), counts
        )
        j3 = starts[offsets_rep] + seq
        u3 = (j3 - cell[m1]) * hz
        z = np.empty((total, group.dim))
        z[:, :m1] = self.ucols[sel][offsets_rep]
        z[:, m1] = u3 + t[sel][offsets_rep]
        dist = self.hnorm[sel][offsets_rep] + np.sqrt(np.abs(z[:, m1]))
        flat = (
            (hidx[sel][offsets_rep] @ self.strides[:m1])
            + j3 * self.strides[m1]
        )
        keep = dist <= self.r
        if not np.all(keep):
            return flat[keep], z[keep], dist[keep], x0
        return flat, z, dist, x0

    def _gather_generic(self, cell):
        f = self.f
        cell = np.asarray(cell)
        idx = cell[None, :] + self.ioff
        valid = np.all((idx >= 0) & (idx < self.shape[None, :]), axis=1)
        idx = idx[valid]
        x0 = f.lo + (cell + 0.5) * f.widths
        z = self.uoff[valid].copy()
        for i, rows in enumerate(self.form.terms):
            if not rows:
                continue
            weights = np.array(
                [
                    c * np.prod(x0 ** xp) if xp.any() else c
                    for c, xp, _up in rows
                ]
            )
            z[:, i] += self.monu[i][valid] @ weights
        dist = self.metric.norm_many(z)
        keep = dist <= self.r
        flat = idx[keep] @ self.strides
        return flat, z[keep], dist[keep], x0


class LocalBall:
    """Gathered neighborhood of one center: indices, offsets, distances."""

    __slots__ = ("flat_indices", "centers", "offsets", "dist", "center")

    def __init__(self, flat_indices, centers, offsets, dist, center):
        self.flat_indices = flat_indices
        self.centers = centers
        self.offsets = offsets  # z = x0^{-1} y
        self.dist = dist
        self.center = center

    def __len__(self):
        return len(self.flat_indices)


def local_ball(f, x0, r, metric=None):
    """All grid cells with center in the metric ball B(x0, r).

    General-purpose (x0 need not be a cell center); the batched pipeline
    uses :class:`NeighborEngine` instead.
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    form = _offset_form(group)
    x0f = np.asarray([float(c) for c in x0])
    half = form.ranges(np.abs(x0f), r)
    slices = []
    for d in range(group.dim):
        lo = int(np.floor((x0f[d] - half[d] - f.lo[d]) / f.widths[d] - 0.5))
        hi = int(np.ceil((x0f[d] + half[d] - f.lo[d]) / f.widths[d] - 0.5))
        lo = max(lo, 0)
        hi = min(hi, f.shape[d] - 1)
        if hi < lo:
            return LocalBall(
                np.empty(0, dtype=np.int64),
                np.empty((0, group.dim)),
                np.empty((0, group.dim)),
                np.empty(0),
                x0f,
            )
        slices.append(np.arange(lo, hi + 1))
    mesh = np.stack(np.meshgrid(*slices, indexing="ij"), axis=-1).reshape(
        -1, group.dim
    )
    centers = f.lo + (mesh + 0.5) * f.widths
    z = group.law.multiply_many(-x0f[None, :], centers)
    dist = metric.norm_many(z)
    keep = dist <= float(r)
    flat = np.ravel_multi_index(mesh[keep].T, f.shape)
    return LocalBall(flat, centers[keep], z[keep], dist[keep], x0f)


_FORM_CACHE = {}


def _offset_form(group):
    key = id(group)
    if key not in _FORM_CACHE:
        _FORM_CACHE[key] = _OffsetForm(group)
    return _FORM_CACHE[key]


def _design_matrix(group, k, offsets, scale=1.0):
    """Columns ``(z/delta_scale)^J / J!`` for hom(J) <= k at the offsets."""
    idx = jet_indices(group, k)
    exps = np.array(idx, dtype=np.int64)
    w = np.array(group.weights, dtype=float)
    z = np.asarray(offsets, dtype=float)
    if scale != 1.0:
        z = z / (float(scale) ** w)[None, :]
    mons = np.prod(z[:, None, :] ** exps[None, :, :], axis=2)
    facts = np.array([mi_factorial(J) for J in idx], dtype=float)
    return mons / facts[None, :], idx


# ---------------------------------------------------------------------------
# density and approximate limits


def density(f, x0, radii, metric=None):
    """Masked-cell fraction of discrete balls around x0 per radius.

    Fractions are counts of masked cells over counts of ball cells, hence
    exactly in [0, 1].  Radii whose discrete ball holds fewer than 50 cells
    raise RadiusUnderResolved.
    """
    metric = metric or Metric(f.group, "quasi")
    out = []
    for r in radii:
        lb = local_ball(f, x0, r, metric)
        if len(lb) < _MIN_BALL_CELLS:
            raise RadiusUnderResolved(
                f"radius {r} resolves only {len(lb)} cells (< {_MIN_BALL_CELLS})"
            )
        masked = f.mask.ravel()[lb.flat_indices]
        out.append((float(r), float(np.mean(masked))))
    return out


def aplimsup(f, x0, radii, tau=0.01, levels=None, metric=None):
    """Approximate limsup surrogate on a level grid.

    Returns the smallest grid level lam such that the empirical density of
    ``{g > lam}`` within the two finest balls is at most tau, together with
    the grid and threshold used (the continuum notion is a scale-free
    limit; any grid realization carries these knobs, so they are reported
    rather than hidden).
    """
    metric = metric or Metric(f.group, "quasi")
    radii = sorted(radii, reverse=True)
    balls = []
    for r in radii:
        lb = local_ball(f, x0, r, metric)
        if len(lb) < _MIN_BALL_CELLS:
            raise RadiusUnderResolved(f"radius {r} under-resolved")
        balls.append(lb)
    fine = balls[-2:] if len(balls) >= 2 else balls
    if levels is None:
        lb = balls[0]
        vals = f.values.ravel()[lb.flat_indices][f.mask.ravel()[lb.flat_indices]]
        if len(vals) == 0:
            raise TooFewSamples("no masked samples near the probe point")
        lo, hi = float(np.min(vals)), float(np.max(vals))
        pad = 1e-9 * (1.0 + abs(hi))
        levels = np.linspace(lo - pad, hi + pad, 129)
    chosen = None
    for lam in levels:
        ok = True
        for lb in fine:
            m = f.mask.ravel()[lb.flat_indices]
            g = f.values.ravel()[lb.flat_indices]
            frac = float(np.mean(m & (g > lam)))
            if frac > tau:
                ok = False
                break
        if ok:
            chosen = float(lam)
            break
    if chosen is None:
        chosen = float(levels[-1])
    return {"value": chosen, "tau": tau, "levels": [float(x) for x in levels]}


# ---------------------------------------------------------------------------
# jet fitting


class ApproxJetFit:
    """Result of one local fit: coefficients, scale, diagnostics."""

    __slots__ = (
        "center",
        "order",
        "coeffs",
        "scale",
        "residual_rms",
        "residual_max",
        "condition",
        "ill_conditioned",
        "n_samples",
        "n_excluded",
    )

    def __init__(self, center, order, coeffs, scale, residual_rms, residual_max,
                 condition, ill_conditioned, n_samples, n_excluded):
        self.center = center
        self.order = order
        self.coeffs = coeffs
        self.scale = scale
        self.residual_rms = residual_rms
        self.residual_max = residual_max
        self.condition = condition
        self.ill_conditioned = ill_conditioned
        self.n_samples = n_samples
        self.n_excluded = n_excluded

    def coefficient_vector(self, indices):
        return np.array([self.coeffs[J] for J in indices])

    def jet_values(self, group):
        """Jet values f_J from the Taylor coefficients (exact linear map)."""
        table = beta_table(group, self.order)
        a = self.coefficient_vector(table.indices)
        vals = table.values_from_coefficients_float(a)
        return dict(zip(table.indices, vals))


def _solve_fit(design, rhs):
    sol, _res, rank, sv = np.linalg.lstsq(design, rhs, rcond=None)
    if sv[0] <= 0 or sv[-1] <= 0:
        cond = math.inf
    else:
        cond = float(sv[0] / sv[-1])
    return sol, cond, rank


def _robust_keep(residuals, values_scale):
    med = float(np.median(residuals))
    mad = float(np.median(np.abs(residuals - med)))
    floor = 1e-9 * (1.0 + values_scale)
    thresh = max(6.0 * 1.4826 * mad, floor)
    return np.abs(residuals - med) <= thresh


def fit_jet(f, x0, k, r, metric=None, robust=False, min_sample_factor=3):
    """Least-squares jet of order k at x0 over the masked ball B(x0, r).

    Uniform weights; columns are scale-normalized, so the reported
    condition number reflects the geometry rather than the radius.  With
    ``robust=True`` residual outliers (6 scaled MADs from the median) are
    excluded once and the system refit.  Raises TooFewSamples below
    ``min_sample_factor`` masked samples per coefficient; severe
    conditioning is flagged on the result rather than raised.
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    lb = local_ball(f, x0, r, metric)
    m = f.mask.ravel()[lb.flat_indices]
    design_all, idx = _design_matrix(group, k, lb.offsets, scale=r)
    rhs_all = f.values.ravel()[lb.flat_indices]
    use = m.copy()
    if int(np.sum(use)) < min_sample_factor * len(idx):
        raise TooFewSamples(
            f"{int(np.sum(use))} masked samples for {len(idx)} coefficients"
        )
    sol, cond, _ = _solve_fit(design_all[use], rhs_all[use])
    n_excluded = 0
    if robust:
        res = rhs_all[use] - design_all[use] @ sol
        keep = _robust_keep(res, float(np.max(np.abs(rhs_all[use]))))
        if not np.all(keep) and int(np.sum(keep)) >= max(
            len(idx), int(0.3 * np.sum(use))
        ):
            n_excluded = int(np.sum(~keep))
            sub = np.where(use)[0][keep]
            use = np.zeros_like(use)
            use[sub] = True
            sol, cond, _ = _solve_fit(design_all[use], rhs_all[use])
    res = rhs_all[use] - design_all[use] @ sol
    w = np.array(group.weights, dtype=float)
    homs = np.array([mi_hom(J, group.weights) for J in idx], dtype=float)
    coeffs = {J: float(c / float(r) ** h) for J, c, h in zip(idx, sol, homs)}
    return ApproxJetFit(
        tuple(float(c) for c in x0),
        k,
        coeffs,
        float(r),
        float(np.sqrt(np.mean(res ** 2))) if len(res) else 0.0,
        float(np.max(np.abs(res))) if len(res) else 0.0,
        cond,
        cond > 1e10,
        int(np.sum(use)),
        n_excluded,
    )


class GridFits:
    """Vectorized container of per-cell fits over an entire grid."""

    def __init__(self, group, k, indices, coeffs, ok, excluded, scale):
        self.group = group
        self.k = k
        self.indices = indices
        self.coeffs = coeffs  # shape grid + (ncoef,), Taylor coefficients
        self.ok = ok
        self.excluded = excluded  # per-cell outlier counts
        self.scale = scale

    def jet_value_table(self):
        """Array of jet values f_J per cell, same layout as coeffs."""
        table = beta_table(self.group, self.k)
        M = table.derivative_matrix_float()
        flat = self.coeffs.reshape(-1, len(self.indices))
        vals = flat @ M.T
        return vals.reshape(self.coeffs.shape)

    def repaired_values(self, f):
        """Dataset values with each cell replaced by its own fitted value.

        Detected-outlier cells are thereby imputed from their neighborhoods;
        cells with no fit keep their raw value.
        """
        a0 = self.coeffs[..., 0]
        out = np.where(self.ok, a0, f.values)
        return out


def _normal_solve(design, rhs):
    """Least squares through the normal equations (fast path).

    The design columns are scale-normalized by the caller, so the squared
    condition number stays benign for the geometries in play.
    """
    A = design.T @ design
    b = design.T @ rhs
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
        return sol


def fit_all(f, k, r, metric=None, robust=True, min_sample_factor=3,
            progress=None, engine=None):
    """Fit a jet at every masked cell; the workhorse of the pipeline.

    Returns a :class:`GridFits`.  Cells whose neighborhoods are too thin
    (near the box boundary) are marked not-ok instead of raising.
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    idx = jet_indices(group, k)
    ncoef = len(idx)
    homs = np.array([mi_hom(J, group.weights) for J in idx], dtype=float)
    rescale = float(r) ** homs
    coeffs = np.zeros(f.shape + (ncoef,))
    ok = np.zeros(f.shape, dtype=bool)
    excluded = np.zeros(f.shape, dtype=np.int32)
    mask_flat = f.mask.ravel()
    values_flat = f.values.ravel()
    engine = engine or NeighborEngine(f, r, metric)
    exps = np.array(idx, dtype=np.int64)
    facts = np.array([mi_factorial(J) for J in idx], dtype=float)
    w = np.array(group.weights, dtype=float)
    rw = float(r) ** w
    total = int(np.sum(f.mask))
    done = 0
    for cell in np.argwhere(f.mask):
        flat, z, _dist, _x0 = engine.gather(cell)
        m = mask_flat[flat]
        n_use = int(np.sum(m))
        if n_use < min_sample_factor * ncoef:
            continue
        zs = z[m] / rw[None, :]
        design = np.prod(zs[:, None, :] ** exps[None, :, :], axis=2) / facts[None, :]
        rhs = values_flat[flat][m]
        sol = _normal_solve(design, rhs)
        nexc = 0
        if robust:
            res = rhs - design @ sol
            keep = _robust_keep(res, float(np.max(np.abs(rhs))))
            nkeep = int(np.sum(keep))
            if nkeep < len(res) and nkeep >= max(ncoef, int(0.3 * len(res))):
                nexc = len(res) - nkeep
                sol = _normal_solve(design[keep], rhs[keep])
        ci = tuple(cell)
        coeffs[ci] = sol / rescale
        ok[ci] = True
        excluded[ci] = nexc
        done += 1
        if progress and done % progress == 0:
            print(f"  fit {done}/{total}")
    return GridFits(group, k, idx, coeffs, ok, excluded, float(r))


# ---------------------------------------------------------------------------
# bad sets and classification


def bad_set_measure(f, x0, p, delta, r, k=None, metric=None, atol=None):
    """Measure of the ball cells where f strays from the local polynomial.

    A cell is bad when it is off-mask or ``|f(y) - p(y)| > delta d(x0,y)^k``
    (plus a small absolute tolerance that absorbs float noise at the center
    cell, where the threshold vanishes).
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    if hasattr(p, "order"):
        k = p.order if k is None else k
        coeff_vec = None
        poly = p
    else:
        if k is None:
            raise ValueError("k required when p is a coefficient mapping")
        coeff_vec = p
        poly = None
    lb = local_ball(f, x0, r, metric)
    if len(lb) < _MIN_BALL_CELLS:
        raise RadiusUnderResolved(f"radius {r} under-resolved")
    if poly is not None:
        pred = poly.eval_many(lb.centers)
    else:
        design, idx = _design_matrix(group, k, lb.offsets)
        vec = np.array([coeff_vec[J] for J in idx])
        pred = design @ vec
    vals = f.values.ravel()[lb.flat_indices]
    m = f.mask.ravel()[lb.flat_indices]
    if atol is None:
        atol = 1e-9 * (1.0 + float(np.max(np.abs(vals)))) if len(vals) else 0.0
    bad = (~m) | (np.abs(vals - pred) > delta * lb.dist ** k + atol)
    return float(np.sum(bad)) * f.cell_volume


class ClassifyResult:
    """Per-level masks A_j, B_j, C_j plus the shared fit data."""

    def __init__(self, j_values, A, B, C, fits, radii, mode, threshold):
        self.j_values = list(j_values)
        self.A = A
        self.B = B
        self.C = C
        self.fits = fits
        self.radii = radii
        self.mode = mode
        self.threshold = threshold

    def union_C(self):
        out = np.zeros_like(next(iter(self.C.values())))
        for m in self.C.values():
            out |= m
        return out


def classify(
    f,
    k,
    mode="differentiability",
    delta=0.5,
    j_values=(1, 2, 4, 8, 16),
    r_cap=0.25,
    n_radii=3,
    fits=None,
    metric=None,
    atol=None,
    progress=None,
):
    """Split the domain into the good sets of the approximation argument.

    For each level j:
      A_j: cells whose bad-set measure inside B(x, r) stays below
           ``(discrete ball measure) / 2**(Q+2)`` for every audited radius
           r <= 1/j (audited radii are a dyadic grid within resolution).
      B_j: cells with every jet value |f_J| <= j (hom(J) <= fit order).
      C_j = A_j and B_j.  C_j is nondecreasing in j.

    ``mode="differentiability"`` uses the fixed threshold ``delta`` and jets
    of order k; ``mode="taylor"`` uses threshold j itself with jets of
    order k - 1 (still normalizing by d^k).  Fits may be supplied to avoid
    refitting; they must match the mode's order.
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    if mode not in ("differentiability", "taylor"):
        raise ValueError(f"unknown mode {mode!r}")
    fit_order = k if mode == "differentiability" else k - 1
    if fit_order < 0:
        raise ValueError("taylor mode needs k >= 1")
    if fits is None:
        fits = fit_all(f, fit_order, r_cap, metric=metric)
    if fits.k != fit_order:
        raise SpecMismatch(f"fits have order {fits.k}, mode needs {fit_order}")
    Q = group.hom_dim
    # audited radii: dyadics r_cap, r_cap/2, ... while balls stay resolved
    radii = [r_cap / 2 ** i for i in range(n_radii)]
    idx = fits.indices
    exps = np.array(idx, dtype=np.int64)
    facts = np.array([mi_factorial(J) for J in idx], dtype=float)
    mask_flat = f.mask.ravel()
    values_flat = f.values.ravel()
    engine = NeighborEngine(f, radii[0], metric)
    thresh_frac = 1.0 / 2 ** (Q + 2)
    cells = np.argwhere(f.mask & fits.ok)
    npass = np.zeros((len(radii),) + f.shape, dtype=bool)
    ratio_tables = {}  # only used in taylor mode
    if atol is None:
        atol = 1e-9 * (1.0 + float(np.max(np.abs(f.values))))
    done = 0
    for cell in cells:
        ci = tuple(cell)
        flat, z, dist, _x0 = engine.gather(cell)
        if len(flat) == 0:
            continue
        design = (
            np.prod(z[:, None, :] ** exps[None, :, :], axis=2)
            / facts[None, :]
        )
        pred = design @ fits.coeffs[ci]
        vals = values_flat[flat]
        m = mask_flat[flat]
        err = np.abs(vals - pred)
        dk = dist ** k
        for ri, r in enumerate(radii):
            sel = dist <= r
            nball = int(np.sum(sel))
            if nball < _MIN_BALL_CELLS:
                # unresolved radius: treat as unaudited (pass)
                npass[(ri,) + ci] = True
                continue
            if mode == "differentiability":
                bad = (~m[sel]) | (err[sel] > delta * dk[sel] + atol)
                nbad = int(np.sum(bad))
                npass[(ri,) + ci] = nbad <= thresh_frac * nball
            else:
                off = ~m[sel]
                ratio = np.where(
                    dk[sel] > 0,
                    (err[sel] - atol) / np.maximum(dk[sel], 1e-300),
                    np.where(err[sel] > atol, np.inf, 0.0),
                )
                ratio[off] = np.inf
                ratio_tables.setdefault(ri, {})[ci] = (
                    np.sort(ratio),
                    nball,
                )
        done += 1
        if progress and done % progress == 0:
            print(f"  classify {done}/{len(cells)}")
    jet_vals = fits.jet_value_table()
    max_jet = np.max(np.abs(jet_vals), axis=-1)
    A = {}
    B = {}
    C = {}
    for j in j_values:
        audited = [ri for ri, r in enumerate(radii) if r <= 1.0 / j + 1e-12]
        if mode == "differentiability":
            Aj = f.mask & fits.ok
            for ri in audited:
                Aj = Aj & npass[ri]
        else:
            Aj = f.mask & fits.ok
            flat_bad = np.ones(f.shape, dtype=bool)
            for ri in audited:
                table = ratio_tables.get(ri, {})
                ok_r = np.zeros(f.shape, dtype=bool)
                for ci, (sorted_ratio, nball) in table.items():
                    nbad = len(sorted_ratio) - int(
                        np.searchsorted(sorted_ratio, float(j), side="right")
                    )
                    ok_r[ci] = nbad <= thresh_frac * nball
                Aj = Aj & ok_r
        Bj = f.mask & fits.ok & (max_jet <= float(j))
        A[j] = Aj
        B[j] = Bj
        C[j] = Aj & Bj
    return ClassifyResult(j_values, A, B, C, fits, radii, mode,
                          delta if mode == "differentiability" else None)


# ---------------------------------------------------------------------------
# coefficient-interval decomposition criterion


def decomposition_check(
    f,
    x0,
    lower_coeffs,
    intervals,
    eps_grid,
    R_grid,
    r_per_R=4,
    q_points=3,
    metric=None,
):
    """Countable-quantifier test that the top coefficients lie in intervals.

    For every eps in ``eps_grid`` the check searches rational top
    coefficients ``q_J`` on a grid inside each interval and a scale R in
    ``R_grid`` such that for all audited radii r < R,

        measure{ y in B(x0, r) : |f(y) - p_q(y)| / d(x0,y)^k > eps } < eps r^Q

    where ``p_q`` uses the supplied lower-order coefficients and the
    candidate top ones (monomials here are unnormalized -- no factorials --
    matching the convention of the criterion it implements).  Returns the
    verdict and per-eps witnesses.
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    w = group.weights
    lower_idx = sorted(lower_coeffs.keys(), key=lambda J: (mi_hom(J, w), J))
    top_idx = sorted(intervals.keys(), key=lambda J: (mi_hom(J, w), J))
    if not top_idx:
        return {"verdict": False, "witnesses": {}, "reason": "no intervals"}
    k = mi_hom(top_idx[0], w)
    if any(mi_hom(J, w) != k for J in top_idx):
        raise SpecMismatch("interval indices must share one homogeneous degree")
    Q = group.hom_dim
    # rational grids inside the intervals
    q_grids = {}
    for J, (lo, hi) in intervals.items():
        lo_f, hi_f = Fraction(lo).limit_denominator(10**6), Fraction(
            hi
        ).limit_denominator(10**6)
        if q_points == 1:
            pts = [(lo_f + hi_f) / 2]
        else:
            stepq = (hi_f - lo_f) / (q_points - 1)
            pts = [lo_f + stepq * i for i in range(q_points)]
        q_grids[J] = pts
    radii_sets = {
        float(R): [float(R) * (i + 1) / (r_per_R + 1) for i in range(r_per_R)]
        for R in R_grid
    }
    # gather the largest ball once
    r_max = max(max(v) for v in radii_sets.values())
    lb = local_ball(f, x0, r_max, metric)
    vals = f.values.ravel()[lb.flat_indices]
    m = f.mask.ravel()[lb.flat_indices]
    exps_low = np.array(lower_idx, dtype=np.int64) if lower_idx else None
    exps_top = np.array(top_idx, dtype=np.int64)
    base = np.zeros(len(lb))
    if lower_idx:
        mons_low = np.prod(
            lb.offsets[:, None, :] ** exps_low[None, :, :], axis=2
        )
        base = mons_low @ np.array([float(lower_coeffs[J]) for J in lower_idx])
    mons_top = np.prod(lb.offsets[:, None, :] ** exps_top[None, :, :], axis=2)
    dk = lb.dist ** k

    def q_combinations(i=0, prefix=()):
        if i == len(top_idx):
            yield prefix
            return
        for q in q_grids[top_idx[i]]:
            yield from q_combinations(i + 1, prefix + (q,))

    witnesses = {}
    verdict = True
    for eps in eps_grid:
        eps = float(eps)
        found = None
        for R in R_grid:
            for qs in q_combinations():
                qvec = np.array([float(q) for q in qs])
                resid = np.abs(vals - base - mons_top @ qvec)
                ok_all = True
                for r in radii_sets[float(R)]:
                    sel = m & (lb.dist <= r)
                    ratio_bad = sel & (resid > eps * dk) & (lb.dist > 0)
                    measure = float(np.sum(ratio_bad)) * f.cell_volume
                    if not measure < eps * r ** Q:
                        ok_all = False
                        break
                if ok_all:
                    found = {
                        "R": float(R),
                        "q": {
                            "".join(map(str, J)): [q.numerator, q.denominator]
                            for J, q in zip(top_idx, qs)
                        },
                    }
                    break
            if found:
                break
        witnesses[repr(eps)] = found
        if found is None:
            verdict = False
    return {"verdict": verdict, "witnesses": witnesses, "k": k}


# ---------------------------------------------------------------------------
# uniqueness probe


def uniqueness_probe(f, x0, k, scales, n_subsamples=3, seed=0, metric=None,
                     robust=True):
    """Coefficient spread of fits across scales and random subsamples.

    Differences are weighted by ``r_ref**hom(J)`` (r_ref the coarsest
    scale), the weighting under which a genuinely unique local polynomial
    shows vanishing spread while a direction-dependent one stays bounded
    away from zero.
    """
    group = f.group
    metric = metric or Metric(group, "quasi")
    if len(scales) < 3:
        raise ValueError("need at least 3 scales")
    rng = rng_from(seed)
    idx = jet_indices(group, k)
    vectors = []
    for r in scales:
        lb = local_ball(f, x0, r, metric)
        m = f.mask.ravel()[lb.flat_indices]
        design, _ = _design_matrix(group, k, lb.offsets, scale=r)
        rhs = f.values.ravel()[lb.flat_indices]
        avail = np.where(m)[0]
        if len(avail) < 3 * len(idx):
            raise TooFewSamples(f"scale {r} holds too few masked samples")
        for sub in range(n_subsamples):
            take = avail
            if sub > 0:
                take = rng.choice(avail, size=max(3 * len(idx),
                                                  int(0.6 * len(avail))),
                                  replace=False)
            sol, *_ = np.linalg.lstsq(design[take], rhs[take], rcond=None)
            if robust:
                res = rhs[take] - design[take] @ sol
                keep = _robust_keep(res, float(np.max(np.abs(rhs[take]))))
                if 0 < np.sum(~keep) and np.sum(keep) >= 3 * len(idx):
                    sol, *_ = np.linalg.lstsq(
                        design[take][keep], rhs[take][keep], rcond=None
                    )
            homs = np.array([mi_hom(J, group.weights) for J in idx])
            vectors.append(sol / float(r) ** homs)  # unnormalized coefficients
    r_ref = float(max(scales))
    homs = np.array([mi_hom(J, group.weights) for J in idx], dtype=float)
    weighted = [v * r_ref ** homs for v in vectors]
    spread = 0.0
    for i in range(len(weighted)):
        for j in range(i + 1, len(weighted)):
            spread = max(spread, float(np.max(np.abs(weighted[i] - weighted[j]))))
    return {"spread": spread, "fits": len(weighted), "r_ref": r_ref}
