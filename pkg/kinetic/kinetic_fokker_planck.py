"""Explicit finite-volume solver for the convection-diffusion equation in 1D and 2D.

Two forms of the same operator are supported:

    fick:          du/dt = -div(b u) + 1/2 div(D grad u)
    ito_standard:  du/dt = -sum_i d_i(bt_i u) + 1/2 sum_ij d_i d_j(D_ij u)

Both are written as the divergence of a face flux with zero flux through the
boundary, so mass is conserved up to round-off. Fick convection is upwinded
and keeps the density nonnegative for diagonal tensors; the Ito form uses
centered stencils throughout and positivity is not guaranteed there.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.stats import norm

from kinetic.kinetic_errors import (GridMismatch, MassLoss, ParamViolation,
                                    StabilityViolation)
from kinetic.kinetic_tensor_field import divergence_D

logger = logging.getLogger(__name__)

STABILITY_SAFETY = 0.9
MASS_TOL = 1e-6


@dataclass(eq=False)
class DensityGrid:
    """Cell averages of a density on [-L, L]^d, values indexed (x[, y])."""
    half_width: float
    values: np.ndarray
    time: float = 0.0
    leaked_fraction: float = 0.0

    @classmethod
    def zeros(cls, half_width, cells, dim):
        cells = (cells,) * dim if np.isscalar(cells) else tuple(cells)
        if dim not in (1, 2) or len(cells) != dim:
            raise ParamViolation("density grids support d = 1 or d = 2")
        return cls(float(half_width), np.zeros(cells))

    @property
    def dim(self):
        return self.values.ndim

    @property
    def cells(self):
        return self.values.shape

    @property
    def dx(self):
        return tuple(2.0 * self.half_width / n for n in self.cells)

    @property
    def cell_volume(self):
        return float(np.prod(self.dx))

    def edges(self, axis):
        return np.linspace(-self.half_width, self.half_width, self.cells[axis] + 1)

    def axes(self):
        return [0.5 * (e[1:] + e[:-1]) for e in (self.edges(k) for k in range(self.dim))]

    def points(self):
        """Cell centers raveled in C order, shape (n_cells, d)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def mass(self):
        return float(np.sum(self.values) * self.cell_volume)

    def boundary_mass(self):
        """Mass in the outermost ring of cells."""
        inner = self.values[(slice(1, -1),) * self.dim]
        return float((np.sum(self.values) - np.sum(inner)) * self.cell_volume)

    def clipped(self):
        return replace(self, values=np.maximum(self.values, 0.0))

    def same_grid(self, other):
        return self.half_width == other.half_width and self.cells == other.cells

    def coarsen(self, factor):
        """Block-average onto a grid with factor-times fewer cells per axis."""
        if factor == 1:
            return self
        if any(n % factor for n in self.cells):
            raise GridMismatch(f"factor {factor} does not divide grid {self.cells}")
        shape = []
        for n in self.cells:
            shape += [n // factor, factor]
        blocks = self.values.reshape(shape)
        return replace(self, values=blocks.mean(axis=tuple(range(1, 2 * self.dim, 2))))


def gaussian_cell_averages(half_width, cells, dim, mean=0.0, std=0.5, time=0.0):
    """Exact cell averages of N(mean, std^2 I) via differences of the normal CDF."""
    grid = DensityGrid.zeros(half_width, cells, dim)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,))
    factors = []
    for k in range(dim):
        cdf = norm.cdf(grid.edges(k), loc=mean[k], scale=std)
        factors.append(np.diff(cdf) / grid.dx[k])
    values = factors[0] if dim == 1 else np.outer(factors[0], factors[1])
    return replace(grid, values=values, time=time)


@dataclass(frozen=True)
class PdeForm:
    variant: str
    drift: Callable
    tensor: Callable
    name: str = ""

    def __post_init__(self):
        if self.variant not in ("fick", "ito_standard"):
            raise ParamViolation(f"unknown PDE variant '{self.variant}'")


def drift_for_ito_form(model):
    """bt(x) = b(x) + 1/2 div D(x)."""
    def drift(x):
        return model.drift(x) + 0.5 * divergence_D(model, x)
    return drift


def fick_form(model, drift=None):
    return PdeForm("fick", drift or model.drift, model.diff_tensor, model.name)


def ito_form(model, drift=None):
    return PdeForm("ito_standard", drift or drift_for_ito_form(model), model.diff_tensor, model.name)


def _face_points(grid, axis):
    """Interior face centers normal to axis, raveled, plus their array shape."""
    axes = grid.axes()
    edges = grid.edges(axis)[1:-1]
    coords = [edges if k == axis else axes[k] for k in range(grid.dim)]
    mesh = np.meshgrid(*coords, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), mesh[0].shape


def stable_time_step(form, grid):
    """0.9 min(dx^2 / (2 d max|D|_S), dx / max|b|) over cell centers and faces."""
    pts = [grid.points()] + [_face_points(grid, k)[0] for k in range(grid.dim)]
    pts = np.concatenate(pts)
    d_norm = float(np.max(np.abs(np.linalg.eigvalsh(form.tensor(pts)))))
    b_max = float(np.max(np.abs(form.drift(pts))))
    h = min(grid.dx)
    bound = h ** 2 / (2 * grid.dim * d_norm)
    if b_max > 0:
        bound = min(bound, h / b_max)
    return STABILITY_SAFETY * bound


def _pad_edge(u, axis):
    pad = [(0, 0)] * u.ndim
    pad[axis] = (1, 1)
    return np.pad(u, pad, mode="edge")


def _central(u, axis, h):
    """Central difference along axis with zero-gradient ghost cells."""
    p = _pad_edge(u, axis)
    hi = [slice(None)] * u.ndim
    lo = [slice(None)] * u.ndim
    hi[axis], lo[axis] = slice(2, None), slice(None, -2)
    return (p[tuple(hi)] - p[tuple(lo)]) / (2.0 * h)


def _face_average(v, axis):
    a = [slice(None)] * v.ndim
    b = [slice(None)] * v.ndim
    a[axis], b[axis] = slice(None, -1), slice(1, None)
    return 0.5 * (v[tuple(a)] + v[tuple(b)]), v[tuple(a)], v[tuple(b)]


class _Operator:
    """Precomputed coefficients of the discrete flux divergence."""

    def __init__(self, form, grid):
        self.form = form
        self.dim = grid.dim
        self.dx = grid.dx
        self.shape = grid.cells
        centers = grid.points()
        self.center_D = form.tensor(centers).reshape(self.shape + (self.dim, self.dim))
        self.face_b = []
        self.face_D = []
        for k in range(self.dim):
            pts, shape = _face_points(grid, k)
            self.face_b.append(form.drift(pts).reshape(shape + (self.dim,))[..., k])
            self.face_D.append(form.tensor(pts).reshape(shape + (self.dim, self.dim))[..., k, :])

    def _flux(self, u, k):
        avg, left, right = _face_average(u, k)
        b = self.face_b[k]
        if self.form.variant == "fick":
            convective = np.maximum(b, 0.0) * left + np.minimum(b, 0.0) * right
            diffusive = 0.0
            for j in range(self.dim):
                if j == k:
                    grad = (right - left) / self.dx[k]
                else:
                    grad = _face_average(_central(u, j, self.dx[j]), k)[0]
                diffusive = diffusive + self.face_D[k][..., j] * grad
            return convective - 0.5 * diffusive
        convective = b * avg
        diffusive = 0.0
        for j in range(self.dim):
            w = self.center_D[..., k, j] * u
            if j == k:
                _, wl, wr = _face_average(w, k)
                diffusive = diffusive + (wr - wl) / self.dx[k]
            else:
                diffusive = diffusive + _face_average(_central(w, j, self.dx[j]), k)[0]
        return convective - 0.5 * diffusive

    def rate(self, u):
        out = np.zeros_like(u)
        for k in range(self.dim):
            flux = self._flux(u, k)
            pad = [(0, 0)] * self.dim
            pad[k] = (1, 1)
            full = np.pad(flux, pad)
            hi = [slice(None)] * self.dim
            lo = [slice(None)] * self.dim
            hi[k], lo[k] = slice(1, None), slice(None, -1)
            out -= (full[tuple(hi)] - full[tuple(lo)]) / self.dx[k]
        return out


def solve_pde(form, u0, T, dt_pde=None, mass_tol=MASS_TOL):
    """Advance u0 to time u0.time + T with explicit Euler steps.

    dt_pde defaults to the stability bound; a larger request raises
    StabilityViolation. The step is shrunk so that T is hit exactly.
    """
    if T < 0:
        raise ParamViolation("T must be nonnegative")
    limit = stable_time_step(form, u0)
    if dt_pde is None:
        dt_pde = limit
    elif dt_pde > limit * (1.0 + 1e-12):
        raise StabilityViolation(f"dt_pde = {dt_pde:.3e} exceeds the stability bound {limit:.3e}")
    n_steps = int(np.ceil(T / dt_pde)) if T > 0 else 0
    dt = T / n_steps if n_steps else 0.0
    op = _Operator(form, u0)
    u = u0.values.astype(float).copy()
    mass0 = u0.mass()
    logger.debug("%s %s: %d steps of %.3e on %s cells", form.variant, form.name, n_steps, dt, u0.cells)
    for _ in range(n_steps):
        u = u + dt * op.rate(u)
    result = replace(u0, values=u, time=u0.time + T)
    drift = abs(result.mass() - mass0)
    if drift > mass_tol * max(1.0, abs(mass0)):
        raise MassLoss(f"mass changed by {drift:.3e} during the {form.variant} solve")
    return result


def l1_distance(a, b):
    if not a.same_grid(b):
        raise GridMismatch(f"grids differ: {a.cells} on L={a.half_width} vs {b.cells} on L={b.half_width}")
    return float(np.sum(np.abs(a.values - b.values)) * a.cell_volume)


def histogram_density(samples, half_width, cells):
    """Normalized histogram count / (N cell volume); samples off the grid count as leaked."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n_total, dim = samples.shape
    grid = DensityGrid.zeros(half_width, cells, dim)
    finite = samples[np.all(np.isfinite(samples), axis=1)]
    counts, _ = np.histogramdd(finite, bins=[grid.edges(k) for k in range(dim)])
    inside = float(np.sum(counts))
    values = counts / (n_total * grid.cell_volume)
    return replace(grid, values=values, leaked_fraction=1.0 - inside / n_total)
