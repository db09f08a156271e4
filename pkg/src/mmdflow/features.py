"""Random ReLU features, the kernel they induce, and its spectral calculus.

A FeatureEnsemble holds m draws (w_j, b_j) from the uniform distribution on
the L1 sphere {|w|_1 + |b| = 1}. The induced kernel is the feature Gram
average k(x, x') = mean_j relu(w_j.x + b_j) relu(w_j.x' + b_j); convolving it
against grid fields and atomic measures, eigendecomposing the discretized
operator, and evaluating reproducing-kernel norms all live here. A large
fixed-seed ensemble stands in for the population kernel; the operator-norm
gap between two ensembles (which shrinks like 1/sqrt(m)) is measurable via
operator_gap so the surrogate error is always reportable.
"""

from __future__ import annotations

import hashlib
import weakref
from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, ResourceLimitError, UsageError
from .grid import (
    Grid,
    GridDensity,
    GridField,
    SampleSet,
    inner_l2,
    integrate,
    norm_l2,
    uniform_density,
)

EIGENSOLVE_CELL_CAP = 4096

FEATURE_MATRIX_ENTRY_CAP = 2**28  # ~2 GiB of float64 per cached matrix


class FeatureEnsemble:
    """m sampled ReLU features; defines the kernel and everything built on it.

    Feature matrices and dense kernel matrices are cached per grid (weakly
    keyed, so dropping a grid frees them). The ensemble itself is immutable.
    """

    def __init__(self, weights: np.ndarray, biases: np.ndarray, seed: int):
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        biases = np.asarray(biases, dtype=float)
        if weights.shape[0] != biases.shape[0]:
            raise UsageError("weights and biases disagree on the feature count")
        support = np.abs(weights).sum(axis=1) + np.abs(biases)
        if np.max(support) > 1.0 + 1e-9:
            raise UsageError("a feature violates |w|_1 + |b| <= 1")
        self.weights = weights
        self.biases = biases
        self.seed = seed
        self._phi_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()
        self._kmat_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weights).tobytes())
        h.update(np.ascontiguousarray(self.biases).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Discriminator:
    """Feature expansion D(x) = mean_j a_j relu(w_j.x + b_j)."""

    ensemble: FeatureEnsemble
    coeffs: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.coeffs, dtype=float)
        if a.shape != (self.ensemble.m,):
            raise UsageError("coefficient count must equal the feature count")
        object.__setattr__(self, "coeffs", a)

    def rkhs_norm(self) -> float:
        """sqrt(mean_j a_j^2), the coefficient L2 norm over the sampled features."""
        return float(np.sqrt(np.mean(self.coeffs**2)))

    def evaluate(self, grid: Grid) -> GridField:
        phi = feature_matrix(self.ensemble, grid)
        return GridField(grid=grid, values=(self.coeffs @ phi) / self.ensemble.m)

    def evaluate_at(self, points: np.ndarray) -> np.ndarray:
        phi = _relu_features(self.ensemble, np.atleast_2d(points))
        return (self.coeffs @ phi) / self.ensemble.m

    def gradient_at(self, points: np.ndarray) -> np.ndarray:
        """Gradient field of D at the given points, one row per point."""
        pts = np.atleast_2d(points)
        act = _relu_features(self.ensemble, pts) > 0.0  # m x n
        # grad D(x) = mean_j a_j w_j 1[w_j.x + b_j > 0]
        return ((self.coeffs[:, None] * act).T @ self.ensemble.weights) / self.ensemble.m


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigenpairs of the discretized kernel operator, quadrature-orthonormal.

    eigenvalues are sorted descending; eigenfields is (n_cells, rank) with
    columns e_i satisfying h * e_i.e_j = delta_ij and K e_i = lambda_i e_i.
    """

    grid: Grid
    eigenvalues: np.ndarray
    eigenfields: np.ndarray
    rank: int

    def coeffs(self, f: GridField) -> np.ndarray:
        """Quadrature inner products <f, e_i> for all retained eigenpairs."""
        return self.grid.cell_weight * (self.eigenfields.T @ f.values)

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        return self.eigenfields @ coeffs

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_median(self) -> float:
        return float(np.median(self.eigenvalues))


def sample_rho0(dim: int, m: int, seed: int) -> FeatureEnsemble:
    """Draw m features i.i.d. uniform on the L1 sphere {|w|_1 + |b| = 1}.

    Uniformity on the sphere is realized as a uniform point on the standard
    simplex in d+1 coordinates (all faces are congruent simplices) combined
    with independent uniform signs.
    """
    if m < 1:
        raise UsageError("need at least one feature")
    rng = np.random.default_rng(seed)
    radii = rng.dirichlet(np.ones(dim + 1), size=m)
    signs = rng.integers(0, 2, size=(m, dim + 1)) * 2 - 1
    v = radii * signs
    return FeatureEnsemble(weights=v[:, :dim], biases=v[:, dim], seed=seed)


def _relu_features(ens: FeatureEnsemble, points: np.ndarray) -> np.ndarray:
    """relu(w_j . x + b_j) for each feature j and point x; shape (m, n_points)."""
    return np.maximum(0.0, ens.weights @ points.T + ens.biases[:, None])


def feature_matrix(ens: FeatureEnsemble, grid: Grid) -> np.ndarray:
    """Feature values at all cell centers, cached per (ensemble, grid)."""
    cached = ens._phi_cache.get(grid)
    if cached is not None:
        return cached
    if ens.m * grid.n_cells > FEATURE_MATRIX_ENTRY_CAP:
        raise ResourceLimitError(
            f"feature matrix would hold {ens.m * grid.n_cells} entries, "
            f"above the cap of {FEATURE_MATRIX_ENTRY_CAP}"
        )
    phi = _relu_features(ens, grid.centers)
    ens._phi_cache[grid] = phi
    return phi


def kernel_matrix(ens: FeatureEnsemble, grid: Grid) -> np.ndarray:
    """Dense discretized operator K = (h/m) Phi^T Phi, cached per grid."""
    cached = ens._kmat_cache.get(grid)
    if cached is not None:
        return cached
    if grid.n_cells > EIGENSOLVE_CELL_CAP:
        raise ResourceLimitError(
            f"dense kernel matrix needs {grid.n_cells} <= {EIGENSOLVE_CELL_CAP} cells"
        )
    phi = feature_matrix(ens, grid)
    K = (grid.cell_weight / ens.m) * (phi.T @ phi)
    ens._kmat_cache[grid] = K
    return K


def feature_integrals_grid(ens: FeatureEnsemble, f: GridField) -> np.ndarray:
    """int sigma_j f dx by quadrature, for every feature j."""
    phi = feature_matrix(ens, f.grid)
    return f.grid.cell_weight * (phi @ f.values)


def feature_integrals_atoms(ens: FeatureEnsemble, s: SampleSet) -> np.ndarray:
    """mean_l sigma_j(x_l), the feature integrals against the empirical measure."""
    return _relu_features(ens, s.points).mean(axis=1)


def feature_integrals(ens: FeatureEnsemble, measure) -> np.ndarray:
    if isinstance(measure, SampleSet):
        return feature_integrals_atoms(ens, measure)
    if isinstance(measure, GridField):
        return feature_integrals_grid(ens, measure)
    raise UsageError(f"cannot integrate features against {type(measure).__name__}")


def kernel_apply(ens: FeatureEnsemble, f: GridField) -> GridField:
    """Convolution k*f of the ensemble kernel against a grid field."""
    phi = feature_matrix(ens, f.grid)
    out = phi.T @ feature_integrals_grid(ens, f) / ens.m
    return GridField(grid=f.grid, values=out)


def kernel_apply_atoms(
    ens: FeatureEnsemble, s: SampleSet, grid: Grid, weight: float = 1.0
) -> GridField:
    """Convolution k*(weight * P_s) of the kernel against an atomic measure.

    Atoms enter through exact feature evaluations; nothing is binned.
    """
    vals = phi_transpose_apply(ens, grid, feature_integrals_atoms(ens, s)) * weight
    return GridField(grid=grid, values=vals)


def phi_transpose_apply(ens: FeatureEnsemble, grid: Grid, per_feature: np.ndarray) -> np.ndarray:
    """mean_j per_feature[j] * sigma_j(.) evaluated on the grid."""
    phi = feature_matrix(ens, grid)
    return phi.T @ per_feature / ens.m


def kernel_apply_measure(ens: FeatureEnsemble, grid: Grid, terms) -> GridField:
    """k* applied to a signed combination sum_k coef_k * measure_k."""
    acc = np.zeros(ens.m)
    for coef, measure in terms:
        acc += coef * feature_integrals(ens, measure)
    return GridField(grid=grid, values=phi_transpose_apply(ens, grid, acc))


def spectral_decompose(
    ens: FeatureEnsemble, grid: Grid, lambda_min_rel: float = 1e-12
) -> SpectralDecomposition:
    """Symmetric eigendecomposition of the discretized kernel operator.

    With equal quadrature weights the matrix (h/m) Phi^T Phi is already
    symmetric, so eigh applies directly; eigenvectors are rescaled by
    1/sqrt(h) to be orthonormal in the quadrature inner product. Eigenpairs
    below lambda_min_rel * lambda_max are discarded.
    """
    if grid.n_cells > EIGENSOLVE_CELL_CAP:
        raise ResourceLimitError(
            f"eigensolve needs {grid.n_cells} <= {EIGENSOLVE_CELL_CAP} cells"
        )
    K = kernel_matrix(ens, grid)
    lam, vec = np.linalg.eigh(K)
    lam = lam[::-1]
    vec = vec[:, ::-1]
    keep = lam >= lambda_min_rel * lam[0]
    lam = lam[keep]
    vec = vec[:, keep]
    eigenfields = vec / np.sqrt(grid.cell_weight)
    return SpectralDecomposition(
        grid=grid, eigenvalues=lam, eigenfields=eigenfields, rank=int(lam.size)
    )


def rkhs_norm_sq(f: GridField, spec: SpectralDecomposition) -> tuple[float, float]:
    """Squared kernel-space norm of f plus the out-of-range residual.

    Returns (sum_i <f,e_i>^2 / lambda_i, ||f - range-projection of f||_L2).
    A nonzero residual means f is not in the span of the retained eigenpairs;
    its true norm is then infinite and the caller decides how to treat it.
    """
    c = spec.coeffs(f)
    value = float(np.sum(c**2 / spec.eigenvalues))
    recon = spec.synthesize(c)
    residual = norm_l2(GridField(grid=f.grid, values=f.values - recon))
    return value, residual


def make_pair_in_h(
    grid: Grid,
    ens: FeatureEnsemble,
    spec: SpectralDecomposition,
    seed: int,
    scale: float = 0.5,
    octaves: float = 8.0,
) -> tuple[GridDensity, GridDensity, float, float]:
    """Construct (p0, p_star) with a known, finite kernel-space distance.

    p0 is uniform. A seeded random function g is drawn with its spectral
    weights spread so that the kernel-space mass of u = k*g is roughly
    log-uniform across the top `octaves` octaves of the spectrum (this makes
    the 1/t training-error envelope tight rather than vacuous). g is shifted
    so u integrates to zero, then p_star = p0 + s*u with s <= scale chosen to
    keep p_star nonnegative without projection.

    Returns (p0, p_star, distance, final_scale) where distance is the exact
    kernel-space norm s * sqrt(<g, k*g>).
    """
    if scale < 0.0:
        raise UsageError("scale must be nonnegative")
    rng = np.random.default_rng(seed)
    lam = spec.eigenvalues
    usable = lam >= lam[0] * 2.0**-octaves
    # target: coefficient mass per lambda-octave roughly constant over the
    # usable band; a_i = sqrt(lam_i) <g, e_i> are the kernel-space coefficients
    octave = np.floor(np.log2(lam[0] / lam[usable])).astype(int)
    counts = np.bincount(octave)
    per_mode = 1.0 / np.sqrt(counts[octave])
    a = np.zeros(lam.size)
    a[usable] = rng.standard_normal(int(usable.sum())) * per_mode
    g_coeffs = a / np.sqrt(lam)
    g = GridField(grid=grid, values=spec.synthesize(g_coeffs))

    u = kernel_apply(ens, g)
    k_one = kernel_apply(ens, GridField(grid=grid, values=np.ones(grid.n_cells)))
    denom = integrate(k_one)
    if abs(denom) < 1e-14:
        raise ConstructionError("kernel annihilates constants; cannot center the target")
    shift = integrate(u) / denom
    g_adj = GridField(grid=grid, values=g.values - shift)
    u = kernel_apply(ens, g_adj)

    if not np.all(np.isfinite(u.values)):
        raise ConstructionError("perturbation field is not finite")
    min_u = float(np.min(u.values))
    final_scale = scale
    if scale > 0.0 and min_u < 0.0:
        final_scale = min(scale, 0.9 / abs(min_u))
        if final_scale <= 0.0:
            raise ConstructionError("no positive scale keeps the target nonnegative")

    p0 = uniform_density(grid)
    p_star_vals = p0.values + final_scale * u.values
    p_star_vals *= 1.0 / (grid.cell_weight * p_star_vals.sum())
    p_star = GridDensity(grid=grid, values=p_star_vals)
    distance = final_scale * float(np.sqrt(max(0.0, inner_l2(g_adj, u))))
    return p0, p_star, distance, final_scale


def optimal_discriminator(ens: FeatureEnsemble, p, p_star, grid: Grid | None = None) -> GridField:
    """The closed-form maximizer 0.5 * k*(P_star - P) of the penalized dual loss."""
    if grid is None:
        for measure in (p, p_star):
            if isinstance(measure, GridField):
                grid = measure.grid
                break
        else:
            raise UsageError("pass a grid when both measures are atomic")
    return kernel_apply_measure(ens, grid, [(0.5, p_star), (-0.5, p)])


def mmd_loss(ens: FeatureEnsemble, target, model) -> float:
    """Squared kernel discrepancy 0.5 * mean_j (int sigma_j d(target - model))^2."""
    diff = feature_integrals(ens, target) - feature_integrals(ens, model)
    return 0.5 * float(np.mean(diff**2))


def feature_sup_gap(probe_ens: FeatureEnsemble, p_star: GridField, s: SampleSet) -> float:
    """Largest probe-feature integral gap between a density and its sample.

    A lower bound on the true supremum over the L1 ball, used to test the
    Monte Carlo rate empirically.
    """
    gaps = feature_integrals_grid(probe_ens, p_star) - feature_integrals_atoms(probe_ens, s)
    return float(np.max(np.abs(gaps)))


def operator_gap(ens_a: FeatureEnsemble, ens_b: FeatureEnsemble, grid: Grid) -> float:
    """Spectral norm of the difference of two discretized kernel operators."""
    if ens_a.dim != ens_b.dim:
        raise UsageError("ensembles live in different dimensions")
    diff = kernel_matrix(ens_a, grid) - kernel_matrix(ens_b, grid)
    lam = np.linalg.eigvalsh(diff)
    return float(np.max(np.abs(lam)))
