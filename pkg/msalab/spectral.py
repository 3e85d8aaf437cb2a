from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from scipy import linalg

from msalab.errors import DecompositionError, ParameterError, PreconditionError, RegionError, ResonanceError
from msalab.lattice import Config, Interactivity, MultiParticleCube, classify_interactivity
from msalab.model import (
    AssembledHamiltonian,
    DisorderRealization,
    InteractionSpec,
    Interval,
    assemble,
    check_dimension,
    interaction_values,
)

logger = logging.getLogger(__name__)

RESONANCE_FLOOR = 1e-12
CLUSTER_TOL = 1e-9

Site = Union[Config, int]


@dataclass(frozen=True, eq=False)
class SpectralData:
    """
    Ascending eigenvalues and orthonormal eigenvectors (columns) of a restricted
    Hamiltonian. Rows follow the cube's site enumeration.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    cube: Optional[MultiParticleCube] = None

    @property
    def dimension(self) -> int:
        return len(self.eigenvalues)

    def eta(self, energy: float) -> float:
        """dist(E, spectrum)."""
        return float(np.min(np.abs(self.eigenvalues - energy)))

    def row(self, x: Site) -> int:
        if isinstance(x, (int, np.integer)):
            return int(x)
        if self.cube is None:
            raise ParameterError("Sites given as configurations need spectral data attached to a cube")
        return self.cube.index_of(x)

    def amplitudes(self, x: Site) -> np.ndarray:
        """(psi_j(x))_j."""
        return self.eigenvectors[self.row(x)]

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


def _normalize_signs(vectors: np.ndarray) -> np.ndarray:
    # first entry above noise is made positive in every column
    significant = np.abs(vectors) > 1e-12
    first = np.argmax(significant, axis=0)
    signs = np.sign(vectors[first, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def diagonalize(
        H: Union[AssembledHamiltonian, np.ndarray],
        cube: Optional[MultiParticleCube] = None,
        cap: Optional[int] = None,
) -> SpectralData:
    """
    Dense symmetric eigensolve.

    Raises:
        ResourceLimitError: matrix dimension above the cap
    """
    if isinstance(H, AssembledHamiltonian):
        matrix, cube = H.matrix, H.cube
    else:
        matrix = np.atleast_2d(np.asarray(H, dtype=float))
    check_dimension(matrix.shape[0], f"eigensolve of dimension {matrix.shape[0]}", cap)
    values, vectors = linalg.eigh(matrix)
    return SpectralData(eigenvalues=values, eigenvectors=_normalize_signs(vectors), cube=cube)


# =========================
# Green functions
# =========================

def _check_off_spectrum(spec: SpectralData, energy: float) -> float:
    eta = spec.eta(energy)
    if eta <= RESONANCE_FLOOR:
        raise ResonanceError(energy, eta)
    return eta


def green(spec: SpectralData, energy: float, x: Site, y: Site) -> float:
    """
    G(x, y; E) = sum_j psi_j(x) psi_j(y) / (lambda_j - E).

    Raises:
        ResonanceError: dist(E, spectrum) <= 1e-12
    """
    _check_off_spectrum(spec, energy)
    return float(np.sum(spec.amplitudes(x) * spec.amplitudes(y) / (spec.eigenvalues - energy)))


def green_row(spec: SpectralData, energy: float, x: Site) -> np.ndarray:
    """G(x, .; E) over every site, in enumeration order."""
    _check_off_spectrum(spec, energy)
    return spec.eigenvectors @ (spec.amplitudes(x) / (spec.eigenvalues - energy))


def green_solve(matrix: np.ndarray, energy: float, x: int, y: int) -> float:
    """Linear-solve oracle: solve (H - E) u = delta_y and read u(x)."""
    size = matrix.shape[0]
    rhs = np.zeros(size)
    rhs[y] = 1.0
    u = linalg.solve(matrix - energy * np.eye(size), rhs, assume_a="sym")
    return float(u[x])


@dataclass(frozen=True, eq=False)
class GreenFunction:
    energy: float
    eta: float
    matrix: np.ndarray = field(repr=False)
    cube: Optional[MultiParticleCube] = None

    @property
    def norm(self) -> float:
        """Operator norm, equal to 1 / eta."""
        return 1.0 / self.eta

    def _index(self, x: Site) -> int:
        if isinstance(x, (int, np.integer)):
            return int(x)
        if self.cube is None:
            raise ParameterError("Sites given as configurations need a cube")
        return self.cube.index_of(x)

    def __call__(self, x: Site, y: Site) -> float:
        return float(self.matrix[self._index(x), self._index(y)])

    def row(self, x: Site) -> np.ndarray:
        return self.matrix[self._index(x)]


def resolvent(spec: SpectralData, energy: float) -> GreenFunction:
    """
    Full resolvent matrix at E.

    Raises:
        ResonanceError: dist(E, spectrum) <= 1e-12
    """
    eta = _check_off_spectrum(spec, energy)
    vecs = spec.eigenvectors
    matrix = (vecs / (spec.eigenvalues - energy)) @ vecs.T
    return GreenFunction(energy=float(energy), eta=eta, matrix=matrix, cube=spec.cube)


# =========================
# Correlators and projectors
# =========================

def eigenvalue_clusters(values: np.ndarray, tol: float = CLUSTER_TOL) -> list[np.ndarray]:
    """Index groups of ascending eigenvalues whose consecutive gaps are <= tol."""
    if len(values) == 0:
        return []
    breaks = np.flatnonzero(np.diff(values) > tol) + 1
    return np.split(np.arange(len(values)), breaks)


def spectral_projectors(spec: SpectralData, tol: float = CLUSTER_TOL) -> list[tuple[float, np.ndarray]]:
    """(cluster mean eigenvalue, orthogonal projector) per eigenvalue cluster."""
    out = []
    for idx in eigenvalue_clusters(spec.eigenvalues, tol):
        vecs = spec.eigenvectors[:, idx]
        out.append((float(np.mean(spec.eigenvalues[idx])), vecs @ vecs.T))
    return out


def correlator(
        spec: SpectralData,
        x: Site,
        y: Site,
        interval: Interval,
        clustered: bool = True,
) -> float:
    """
    Upsilon(x, y, I) = sum over eigenvalues in I of |psi_j(x) psi_j(y)|.

    With clustered=True the products are summed inside each eigenvalue cluster
    before taking absolute values, which makes the result basis independent and
    equal to sup_{|f| <= 1} |<delta_x, f(H) 1_I(H) delta_y>|.
    """
    inside = np.flatnonzero(interval.mask(spec.eigenvalues))
    if inside.size == 0:
        return 0.0
    prod = spec.amplitudes(x)[inside] * spec.amplitudes(y)[inside]
    if not clustered:
        return float(np.sum(np.abs(prod)))
    return float(sum(abs(prod[c].sum()) for c in eigenvalue_clusters(spec.eigenvalues[inside])))


def correlator_matrix(
        spec: SpectralData,
        interval: Interval,
        rows: Optional[np.ndarray] = None,
        cols: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Clustered Upsilon(x, y, I) for every x in rows, y in cols (default: all sites)."""
    rows = np.arange(spec.dimension) if rows is None else np.asarray(rows)
    cols = np.arange(spec.dimension) if cols is None else np.asarray(cols)
    inside = np.flatnonzero(interval.mask(spec.eigenvalues))
    out = np.zeros((len(rows), len(cols)))
    if inside.size == 0:
        return out
    vr = spec.eigenvectors[np.ix_(rows, inside)]
    vc = spec.eigenvectors[np.ix_(cols, inside)]
    clusters = eigenvalue_clusters(spec.eigenvalues[inside])
    singles = np.asarray([c[0] for c in clusters if len(c) == 1], dtype=np.int64)
    if singles.size:
        out += np.abs(vr[:, singles]) @ np.abs(vc[:, singles]).T
    for c in clusters:
        if len(c) > 1:
            out += np.abs(vr[:, c] @ vc[:, c].T)
    return out


# =========================
# Tensor structure
# =========================

def tensor_eigenpairs(
        parts: Sequence[SpectralData],
        cube: Optional[MultiParticleCube] = None,
        cap: Optional[int] = None,
) -> SpectralData:
    """
    Eigenpairs of the Kronecker sum of the parts (non-interacting product system):
    eigenvalues are sums with one index per part, eigenvectors the tensor products.
    The first part's coordinates vary slowest, matching cube enumeration.

    Raises:
        ParameterError: parts is empty
        ResourceLimitError: product dimension above the cap
    """
    if not parts:
        raise ParameterError("tensor_eigenpairs needs at least one part")
    dimension = int(np.prod([p.dimension for p in parts], dtype=np.int64))
    check_dimension(dimension, f"tensor product of {len(parts)} parts", cap)

    values = parts[0].eigenvalues
    vectors = parts[0].eigenvectors
    for part in parts[1:]:
        values = np.add.outer(values, part.eigenvalues).ravel()
        vectors = np.kron(vectors, part.eigenvectors)
    order = np.argsort(values, kind="stable")
    return SpectralData(eigenvalues=values[order], eigenvectors=vectors[:, order], cube=cube)


# =========================
# Combes-Thomas
# =========================

@dataclass(frozen=True)
class CombesThomasReport:
    energy: float
    eta: float
    nu: int
    max_violation_ratio: float
    worst_pair: tuple[int, int]
    pairs_checked: int

    @property
    def holds(self) -> bool:
        return self.max_violation_ratio <= 1.0


def combes_thomas_bound(eta: float, nu: int, distance: np.ndarray | float) -> np.ndarray:
    """2 eta^-1 exp(-eta |x - y| / (12 nu))."""
    return 2.0 / eta * np.exp(-eta * np.asarray(distance, dtype=float) / (12.0 * nu))


def combes_thomas_check(
        spec: SpectralData,
        energy: float,
        nu: Optional[int] = None,
        chunk: int = 512,
) -> CombesThomasReport:
    """
    Max over site pairs of |G(x, y; E)| divided by the Combes-Thomas bound.
    Distances are max-norm; nu defaults to the cube's nd.

    Raises:
        PreconditionError: eta = dist(E, spectrum) outside (0, 1]
        ParameterError: spectral data carries no cube
    """
    if spec.cube is None:
        raise ParameterError("combes_thomas_check needs spectral data attached to a cube")
    eta = spec.eta(energy)
    if eta <= RESONANCE_FLOOR or eta > 1.0 + 1e-12:
        raise PreconditionError(f"Combes-Thomas needs eta in (0, 1], got eta={eta:.3e} at E={energy}")
    nu = spec.cube.nd if nu is None else nu
    G = resolvent(spec, energy).matrix
    sites = spec.cube.site_array()

    worst, worst_pair = -1.0, (0, 0)
    for start in range(0, len(sites), chunk):
        block = sites[start:start + chunk]
        dist = np.max(np.abs(block[:, None, :] - sites[None, :, :]), axis=2)
        ratio = np.abs(G[start:start + chunk]) / combes_thomas_bound(eta, nu, dist)
        k = int(np.argmax(ratio))
        if ratio.flat[k] > worst:
            worst = float(ratio.flat[k])
            worst_pair = (start + k // len(sites), k % len(sites))
    return CombesThomasReport(
        energy=float(energy),
        eta=eta,
        nu=nu,
        max_violation_ratio=worst,
        worst_pair=worst_pair,
        pairs_checked=len(sites) ** 2,
    )


# =========================
# PI-cube Green decomposition
# =========================

@dataclass(frozen=True, eq=False)
class PiGreenReport:
    """
    G(u, y; E) for every y in the cube (u = cube center), computed directly and
    through the eigenpairs of either factor of the canonical decomposition.
    """

    energy: float
    split: Optional[Interactivity]
    direct: np.ndarray = field(repr=False)
    via_first: np.ndarray = field(repr=False)
    via_second: np.ndarray = field(repr=False)

    @property
    def max_relative_error(self) -> float:
        scale = float(np.max(np.abs(self.direct))) or 1.0
        err = max(np.max(np.abs(self.via_first - self.direct)), np.max(np.abs(self.via_second - self.direct)))
        return float(err) / scale


def pi_green_decomposition(
        H: AssembledHamiltonian,
        realization: DisorderRealization,
        interaction: InteractionSpec,
        energy: float,
) -> PiGreenReport:
    """
    Reconstruct G(u, .; E) of a PI cube from its factors C' x C'':

        G(u, y) = sum_i phi_i(u') phi_i(y') G''(u'', y''; E - lambda_i)
                = sum_k chi_k(u'') chi_k(y'') G'(u', y'; E - mu_k)

    A single-particle cube is returned unchanged in all three slots.

    Raises:
        DecompositionError: the cube is FI or the interaction does not split
        ResonanceError: E on the product spectrum
    """
    cube = H.cube
    full = diagonalize(H)
    direct = green_row(full, energy, cube.center)
    if cube.n == 1:
        return PiGreenReport(energy=float(energy), split=None, direct=direct, via_first=direct, via_second=direct)

    split = classify_interactivity(cube, interaction.r0)
    if not split.is_partial:
        raise DecompositionError(f"Cube centered at {cube.center.coords} is fully interactive")
    first_cube, second_cube = split.first_cube, split.second_cube

    cross = H.interaction - (
        _lifted(interaction_values(first_cube, interaction), cube, split.first, first_cube)
        + _lifted(interaction_values(second_cube, interaction), cube, split.second, second_cube)
    )
    if np.any(np.abs(cross) > 0):
        raise DecompositionError("Interaction is not additive across the PI split")

    first = diagonalize(assemble(first_cube, realization, interaction))
    second = diagonalize(assemble(second_cube, realization, interaction))
    product = np.add.outer(first.eigenvalues, second.eigenvalues)
    eta = float(np.min(np.abs(product - energy)))
    if eta <= RESONANCE_FLOOR:
        raise ResonanceError(energy, eta)

    idx1 = _factor_indices(cube, split.first, first_cube)
    idx2 = _factor_indices(cube, split.second, second_cube)
    u1 = first_cube.index_of(cube.center.particles(split.first))
    u2 = second_cube.index_of(cube.center.particles(split.second))

    via_first = np.zeros(cube.cardinality)
    for i, lam in enumerate(first.eigenvalues):
        phi = first.eigenvectors[:, i]
        via_first += phi[u1] * phi[idx1] * green_row(second, energy - lam, u2)[idx2]

    via_second = np.zeros(cube.cardinality)
    for k, mu in enumerate(second.eigenvalues):
        chi = second.eigenvectors[:, k]
        via_second += chi[u2] * chi[idx2] * green_row(first, energy - mu, u1)[idx1]

    logger.debug("PI decomposition: center=%s split=%s|%s", cube.center.coords, split.first, split.second)
    return PiGreenReport(energy=float(energy), split=split, direct=direct, via_first=via_first, via_second=via_second)


def _factor_indices(cube: MultiParticleCube, group: tuple[int, ...], factor: MultiParticleCube) -> np.ndarray:
    sites = cube.site_array().reshape(-1, cube.n, cube.d)[:, list(group), :]
    return factor.indices_of(sites.reshape(len(sites), -1))


def _lifted(values: np.ndarray, cube: MultiParticleCube, group: tuple[int, ...], factor: MultiParticleCube) -> np.ndarray:
    return values[_factor_indices(cube, group, factor)]


# =========================
# Spectrum oracles
# =========================

class SpectrumOracle(Protocol):
    """Spectra of cubes that live inside one disorder realization."""

    r0: int

    def spectrum(self, cube: MultiParticleCube) -> SpectralData: ...

    def eigenvalues(self, cube: MultiParticleCube) -> np.ndarray: ...


class CubeSolver:
    """
    Spectra of arbitrary cubes for one realization and interaction. With h == 0 a
    multi-particle cube is the tensor product of cached one-particle spectra;
    otherwise the cube is assembled and diagonalized.
    """

    def __init__(
            self,
            realization: DisorderRealization,
            interaction: InteractionSpec,
            cap: Optional[int] = None,
    ):
        self.realization = realization
        self.interaction = interaction
        self.cap = cap
        self.r0 = interaction.r0
        self._one_particle: dict[tuple[tuple[int, ...], int], SpectralData] = {}

    def hamiltonian(self, cube: MultiParticleCube) -> AssembledHamiltonian:
        return assemble(cube, self.realization, self.interaction, self.cap)

    def factorizes(self, cube: MultiParticleCube) -> bool:
        return cube.n == 1 or self.interaction.h == 0

    def one_particle(self, point: tuple[int, ...], L: int) -> SpectralData:
        key = (point, L)
        if key not in self._one_particle:
            cube = MultiParticleCube.equal(Config((point,)), L)
            self._one_particle[key] = diagonalize(self.hamiltonian(cube), cap=self.cap)
        return self._one_particle[key]

    def _parts(self, cube: MultiParticleCube) -> list[SpectralData]:
        return [self.one_particle(p, L) for p, L in zip(cube.center.coords, cube.side_lengths)]

    def spectrum(self, cube: MultiParticleCube) -> SpectralData:
        if not self.factorizes(cube):
            return diagonalize(self.hamiltonian(cube), cap=self.cap)
        parts = self._parts(cube)
        if len(parts) == 1:
            return parts[0]
        return tensor_eigenpairs(parts, cube=cube, cap=self.cap)

    def eigenvalues(self, cube: MultiParticleCube) -> np.ndarray:
        if not self.factorizes(cube):
            return linalg.eigvalsh(self.hamiltonian(cube).matrix)
        values = np.zeros(1)
        for part in self._parts(cube):
            values = np.add.outer(values, part.eigenvalues).ravel()
        return np.sort(values)


class BlockSolver:
    """Spectra of sub-cubes of an assembled cube, read off principal blocks of its matrix."""

    def __init__(self, H: AssembledHamiltonian):
        self.H = H
        self.r0 = H.r0

    def block(self, cube: MultiParticleCube) -> np.ndarray:
        """
        Raises:
            RegionError: the sub-cube is not inside the assembled cube
        """
        outer = self.H.cube
        if not (outer.contains(Config.from_flat(cube.lower, cube.n, cube.d))
                and outer.contains(Config.from_flat(cube.upper, cube.n, cube.d))):
            raise RegionError(f"Sub-cube at {cube.center.coords} leaves the assembled cube")
        idx = outer.indices_of(cube.site_array())
        return self.H.matrix[np.ix_(idx, idx)]

    def spectrum(self, cube: MultiParticleCube) -> SpectralData:
        return diagonalize(self.block(cube), cube=cube)

    def eigenvalues(self, cube: MultiParticleCube) -> np.ndarray:
        return linalg.eigvalsh(self.block(cube))
