"""Discretized function space over the unit cube.

A regular midpoint grid on [0,1]^d carries all field algebra: quadrature
integrals, L2 inner products, the Euclidean projection onto the probability
simplex, its tangent-cone projection, and the 1-d CDF/quantile machinery.
All quadrature weights are equal (h = res^-d), which makes the simplex
projection the textbook shift-and-clip and keeps inner products diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ResourceLimitError, UsageError

CELL_CAP = 2**20

DENSITY_MASS_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular midpoint discretization of [0,1]^dim with res cells per axis.

    centers has shape (res**dim, dim), ordered lexicographically by axis
    index (axis 0 slowest). cell_weight is the quadrature weight per cell.
    """

    dim: int
    res: int
    centers: np.ndarray
    cell_weight: float

    @property
    def n_cells(self) -> int:
        return self.centers.shape[0]

    @property
    def axis_coords(self) -> np.ndarray:
        """The res midpoints shared by every axis."""
        return (np.arange(self.res) + 0.5) / self.res


@dataclass(frozen=True, eq=False)
class GridField:
    """One real value per grid cell (density or discriminator, by context)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise UsageError(
                f"field has {v.shape} values for a grid with {self.grid.n_cells} cells"
            )
        if not np.all(np.isfinite(v)):
            raise UsageError("field contains non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class GridDensity(GridField):
    """A nonnegative field with unit quadrature integral."""

    def __post_init__(self):
        super().__post_init__()
        if np.min(self.values) < -1e-12:
            raise UsageError(f"density has negative values (min {np.min(self.values):g})")
        mass = self.grid.cell_weight * float(np.sum(self.values))
        if abs(mass - 1.0) > DENSITY_MASS_TOL:
            raise UsageError(f"density mass is {mass!r}, not 1 within {DENSITY_MASS_TOL}")


@dataclass(frozen=True, eq=False)
class SampleSet:
    """An empirical measure kept as exact atoms, never binned to the grid."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise UsageError("a SampleSet needs at least one atom")
        if np.min(pts) < 0.0 or np.max(pts) > 1.0:
            raise UsageError("atoms must lie in [0,1]^d")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def make_grid(dim: int, res: int, cell_cap: int = CELL_CAP) -> Grid:
    """Build the midpoint grid; refuses more than cell_cap cells."""
    if dim < 1 or res < 2:
        raise UsageError(f"need dim >= 1 and res >= 2, got ({dim}, {res})")
    n_cells = res**dim
    if n_cells > cell_cap:
        raise ResourceLimitError(
            f"grid would have {n_cells} cells, exceeding the cap of {cell_cap}"
        )
    axis = (np.arange(res) + 0.5) / res
    if dim == 1:
        centers = axis[:, None]
    else:
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        centers = np.stack([m.ravel() for m in mesh], axis=1)
    return Grid(dim=dim, res=res, centers=centers, cell_weight=float(res) ** (-dim))


def _same_grid(f: GridField, g: GridField) -> None:
    if f.grid is not g.grid:
        raise UsageError("fields live on different grids")


def integrate(f: GridField) -> float:
    return f.grid.cell_weight * float(np.sum(f.values))


def inner_l2(f: GridField, g: GridField) -> float:
    _same_grid(f, g)
    return f.grid.cell_weight * float(np.dot(f.values, g.values))


def norm_l2(f: GridField) -> float:
    return float(np.sqrt(max(0.0, inner_l2(f, f))))


def _clip_shift(values: np.ndarray, target_sum: float) -> np.ndarray:
    """max(0, values - tau) with tau chosen so the result sums to target_sum."""
    u = np.sort(values)[::-1]
    cssv = np.cumsum(u) - target_sum
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u * j > cssv)[0][-1]
    tau = cssv[rho] / (rho + 1.0)
    return np.maximum(values - tau, 0.0)


def project_simplex(f: GridField) -> GridDensity:
    """Quadrature-L2 projection onto {p >= 0, integral = 1}.

    With equal cell weights this is the classic shift-and-clip projection:
    p_i = max(0, f_i - tau) with tau fixing the integral.
    """
    h = f.grid.cell_weight
    p = _clip_shift(f.values, 1.0 / h)
    # renormalize away the O(eps) threshold residue so the mass invariant is exact
    p *= 1.0 / (h * p.sum())
    return GridDensity(grid=f.grid, values=p)


def project_tangent_cone(v: GridField, p: GridDensity, eps: float = 1e-6) -> GridField:
    """One-sided difference approximation of the simplex tangent-cone projection.

    Evaluates (proj(p + eps*v) - p) / eps, the limit definition of the cone
    projection at finite eps.
    """
    _same_grid(v, p)
    if eps <= 0:
        raise UsageError("eps must be positive")
    shifted = GridField(grid=p.grid, values=p.values + eps * v.values)
    return GridField(grid=p.grid, values=(project_simplex(shifted).values - p.values) / eps)


def _cumulative_masses(p: GridDensity) -> np.ndarray:
    """Cumulative cell masses with a leading 0; last entry is forced to 1."""
    masses = p.values * p.grid.cell_weight
    c = np.concatenate([[0.0], np.cumsum(masses)])
    c[-1] = 1.0
    return c


def cdf_quantile_1d(p: GridDensity, u: float) -> float:
    """Invert the piecewise-linear CDF of a 1-d grid density.

    Ties (flat CDF stretches from zero-mass cells) resolve to the leftmost
    point attaining the value.
    """
    if p.grid.dim != 1:
        raise UsageError("quantile inversion requires a 1-d grid")
    if not 0.0 <= u <= 1.0:
        raise UsageError(f"u must lie in [0,1], got {u}")
    c = _cumulative_masses(p)
    i = int(np.searchsorted(c[1:], u, side="left"))
    i = min(i, p.grid.res - 1)
    width = 1.0 / p.grid.res
    left = i * width
    mass_i = c[i + 1] - c[i]
    if mass_i <= 0.0:
        return left
    return left + (u - c[i]) / mass_i * width


def cdf_quantile_1d_batch(p: GridDensity, u: np.ndarray) -> np.ndarray:
    """Vectorized cdf_quantile_1d, used for inverse-CDF sampling."""
    if p.grid.dim != 1:
        raise UsageError("quantile inversion requires a 1-d grid")
    u = np.asarray(u, dtype=float)
    c = _cumulative_masses(p)
    idx = np.minimum(np.searchsorted(c[1:], u, side="left"), p.grid.res - 1)
    width = 1.0 / p.grid.res
    left = idx * width
    mass = c[idx + 1] - c[idx]
    frac = np.where(mass > 0.0, (u - c[idx]) / np.where(mass > 0.0, mass, 1.0), 0.0)
    return left + frac * width


def uniform_density(grid: Grid) -> GridDensity:
    return GridDensity(grid=grid, values=np.ones(grid.n_cells))


def as_density(f: GridField) -> GridDensity:
    """Reinterpret a field already satisfying the density invariants."""
    return GridDensity(grid=f.grid, values=f.values)
