from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import stats

from msalab.errors import CoverageError, ParameterError, ResourceLimitError
from msalab.lattice import Config, MultiParticleCube, Point
from msalab.settings import max_dimension

logger = logging.getLogger(__name__)

DisorderFamily = Literal["uniform", "truncated-gaussian", "piecewise-density", "constant"]

_UINT64_TO_UNIT = 2.0 ** -53


@dataclass(frozen=True)
class DisorderSpec:
    """
    Single-site law of the i.i.d. potential V, supported in [-M, M].

    - uniform: uniform on [-M, M]
    - truncated-gaussian: N(0, sigma^2) conditioned on [-M, M] (sigma defaults to M/2)
    - piecewise-density: piecewise constant density, equal-width bins on [-M, M]
      with relative weights density_weights
    - constant: V == constant_value everywhere (deterministic controls)

    density_weight_exponent (kappa) is validated but not used by any sampler.
    """

    family: DisorderFamily = "uniform"
    support_bound: float = 1.0
    density_weight_exponent: float = 0.5
    master_seed: int = 0
    gaussian_sigma: Optional[float] = None
    density_weights: tuple[float, ...] = ()
    constant_value: float = 0.0

    def __post_init__(self) -> None:
        if self.support_bound < 0:
            raise ParameterError(f"support_bound must be >= 0, got {self.support_bound}")
        if not 0.0 < self.density_weight_exponent < 1.0:
            raise ParameterError(f"density_weight_exponent must be in (0, 1), got {self.density_weight_exponent}")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ParameterError(f"master_seed must fit in 64 bits, got {self.master_seed}")
        if self.family == "truncated-gaussian" and self.support_bound == 0:
            raise ParameterError("truncated-gaussian needs support_bound > 0")
        if self.family == "piecewise-density":
            w = self.density_weights
            if not w or any(v < 0 for v in w) or sum(w) <= 0:
                raise ParameterError("piecewise-density needs nonnegative density_weights with positive sum")
        if self.family == "constant" and abs(self.constant_value) > self.support_bound:
            raise ParameterError(
                f"constant_value {self.constant_value} outside [-M, M] with M={self.support_bound}"
            )

    @property
    def sigma(self) -> float:
        return self.gaussian_sigma if self.gaussian_sigma is not None else self.support_bound / 2.0

    @property
    def has_bounded_density(self) -> bool:
        return self.family != "constant" and self.support_bound > 0


@dataclass(frozen=True)
class InteractionSpec:
    """
    Finite-range pair interaction U(x) = sum_{i<j} Phi(|x_i - x_j|), scaled by h
    in the Hamiltonian. phi tabulates Phi(0), ..., Phi(r0); Phi(r) = 0 for r > r0.
    """

    phi: tuple[float, ...] = (1.0, 1.0)
    r0: int = 1
    h: float = 0.0

    def __post_init__(self) -> None:
        if self.r0 < 0:
            raise ParameterError(f"r0 must be >= 0, got {self.r0}")
        if len(self.phi) != self.r0 + 1:
            raise ParameterError(f"phi must tabulate r = 0..r0 ({self.r0 + 1} values), got {len(self.phi)}")

    @classmethod
    def step(cls, r0: int = 1, value: float = 1.0, h: float = 0.0) -> "InteractionSpec":
        return cls(phi=(float(value),) * (r0 + 1), r0=r0, h=h)

    def with_amplitude(self, h: float) -> "InteractionSpec":
        return replace(self, h=float(h))

    def phi_at(self, r: np.ndarray | int) -> np.ndarray:
        r = np.asarray(r, dtype=np.int64)
        table = np.asarray(self.phi, dtype=float)
        return np.where(r <= self.r0, table[np.minimum(r, self.r0)], 0.0)


@dataclass(frozen=True)
class Interval:
    """Closed energy interval [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if self.hi < self.lo:
            raise ParameterError(f"Empty interval [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, energy: float) -> bool:
        return self.lo <= energy <= self.hi

    def mask(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        return (values >= self.lo) & (values <= self.hi)

    def interior_points(self, count: int) -> tuple[float, ...]:
        """count equispaced energies strictly inside the interval."""
        step = self.width / (count + 1)
        return tuple(float(self.lo + (k + 1) * step) for k in range(count))

    def grid(self, step: float) -> np.ndarray:
        if step <= 0:
            raise ParameterError(f"Grid step must be > 0, got {step}")
        count = int(np.floor(self.width / step + 1e-9)) + 1
        return self.lo + step * np.arange(count)


# =========================
# Disorder
# =========================

@dataclass(frozen=True)
class SiteBox:
    """Inclusive box [lower, upper] of single-particle sites in Z^d."""

    lower: Point
    upper: Point

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ParameterError(f"Box corners must share a positive dimension: {self.lower}, {self.upper}")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ParameterError(f"Empty box: lower={self.lower} upper={self.upper}")

    @classmethod
    def around(cls, cube: MultiParticleCube, margin: int = 0) -> "SiteBox":
        lo, hi = cube.projection_bounds()
        return cls(tuple(c - margin for c in lo), tuple(c + margin for c in hi))

    @classmethod
    def covering(cls, cubes: Sequence[MultiParticleCube]) -> "SiteBox":
        bounds = [c.projection_bounds() for c in cubes]
        d = len(bounds[0][0])
        lo = tuple(min(b[0][k] for b in bounds) for k in range(d))
        hi = tuple(max(b[1][k] for b in bounds) for k in range(d))
        return cls(lo, hi)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> Point:
        return tuple(hi - lo + 1 for lo, hi in zip(self.lower, self.upper))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def points(self) -> np.ndarray:
        grid = np.indices(self.shape, dtype=np.int64).reshape(self.d, -1).T
        return grid + np.asarray(self.lower, dtype=np.int64)

    def covers(self, lower: Point, upper: Point) -> bool:
        return all(a <= b for a, b in zip(self.lower, lower)) and all(a >= b for a, b in zip(self.upper, upper))


@dataclass(frozen=True, eq=False)
class DisorderRealization:
    """Sample of V on a box; values has the box's shape."""

    box: SiteBox
    values: np.ndarray
    spec: DisorderSpec
    seed: Optional[int] = None
    trial_index: Optional[int] = None

    @property
    def realization_id(self) -> str:
        if self.trial_index is None:
            return "fixed"
        return f"{self.spec.master_seed}:{self.trial_index}"

    @classmethod
    def from_values(
            cls,
            box: SiteBox,
            values: np.ndarray | Sequence[float],
            spec: Optional[DisorderSpec] = None,
    ) -> "DisorderRealization":
        """Deterministic realization (deep wells, constant potentials, hand-made controls)."""
        arr = np.asarray(values, dtype=float).reshape(box.shape)
        bound = float(np.max(np.abs(arr))) if arr.size else 0.0
        spec = spec or DisorderSpec(family="uniform", support_bound=bound)
        return cls(box=box, values=arr, spec=spec)

    def value_at(self, points: np.ndarray) -> np.ndarray:
        """
        V at an (K, d) array of sites.

        Raises:
            CoverageError: some site lies outside the box
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        rel = pts - np.asarray(self.box.lower, dtype=np.int64)
        if np.any(rel < 0) or np.any(rel >= np.asarray(self.box.shape)):
            raise CoverageError(f"Sites outside disorder box [{self.box.lower}, {self.box.upper}]")
        return self.values[tuple(rel.T)]

    def __getitem__(self, point: Point) -> float:
        return float(self.value_at(np.asarray([point]))[0])

    def as_mapping(self) -> dict[Point, float]:
        return {tuple(int(c) for c in p): float(v) for p, v in zip(self.box.points(), self.values.ravel())}


def trial_seed(master_seed: int, trial_index: int) -> int:
    """split(master_seed, trial_index): independent, reproducible per-trial seed."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(int(trial_index),))
    return int(seq.generate_state(1, np.uint64)[0])


def _site_key(point: Sequence[int]) -> tuple[int, ...]:
    # zigzag: spawn keys must be nonnegative
    return tuple(2 * c if c >= 0 else -2 * c - 1 for c in (int(v) for v in point))


def site_uniforms(seed: int, points: np.ndarray) -> np.ndarray:
    """U(0,1) value per site, a pure function of (seed, site): box-independent."""
    out = np.empty(len(points), dtype=float)
    for k, p in enumerate(points):
        state = np.random.SeedSequence(seed, spawn_key=_site_key(p)).generate_state(1, np.uint64)[0]
        out[k] = (int(state) >> 11) * _UINT64_TO_UNIT
    return out


def _piecewise_tables(spec: DisorderSpec) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(spec.density_weights, dtype=float)
    edges = np.linspace(-spec.support_bound, spec.support_bound, len(w) + 1)
    cum = np.concatenate([[0.0], np.cumsum(w) / w.sum()])
    return edges, cum


def _truncnorm(spec: DisorderSpec):
    s = spec.sigma
    return stats.truncnorm(-spec.support_bound / s, spec.support_bound / s, loc=0.0, scale=s)


def quantile(spec: DisorderSpec, u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the single-site law."""
    u = np.asarray(u, dtype=float)
    M = spec.support_bound
    if spec.family == "uniform":
        return -M + 2.0 * M * u
    if spec.family == "truncated-gaussian":
        return np.clip(_truncnorm(spec).ppf(u), -M, M)
    if spec.family == "piecewise-density":
        edges, cum = _piecewise_tables(spec)
        return np.interp(u, cum, edges)
    return np.full_like(u, spec.constant_value)


def cdf(spec: DisorderSpec, x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    M = spec.support_bound
    if spec.family == "uniform":
        if M == 0:
            return (x >= 0).astype(float)
        return np.clip((x + M) / (2.0 * M), 0.0, 1.0)
    if spec.family == "truncated-gaussian":
        return _truncnorm(spec).cdf(x)
    if spec.family == "piecewise-density":
        edges, cum = _piecewise_tables(spec)
        return np.interp(x, edges, cum, left=0.0, right=1.0)
    return (x >= spec.constant_value).astype(float)


def window_probability(spec: DisorderSpec, a: np.ndarray | float, b: np.ndarray | float) -> np.ndarray:
    """mu([a, b]) for the single-site law."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if spec.family == "constant" or spec.support_bound == 0:
        atom = spec.constant_value if spec.family == "constant" else 0.0
        return ((a <= atom) & (atom <= b)).astype(float)
    return np.clip(cdf(spec, b) - cdf(spec, a), 0.0, 1.0)


def sample_disorder(spec: DisorderSpec, box: SiteBox, trial_index: int) -> DisorderRealization:
    """
    i.i.d. sample of V on box for one trial. The value at a site depends only on
    (master_seed, trial_index, site), so growing the box keeps existing values.
    """
    seed = trial_seed(spec.master_seed, trial_index)
    if spec.family == "constant":
        values = np.full(box.shape, spec.constant_value, dtype=float)
    else:
        values = quantile(spec, site_uniforms(seed, box.points())).reshape(box.shape)
    logger.debug("Sampled disorder: family=%s trial=%s sites=%s", spec.family, trial_index, box.size)
    return DisorderRealization(box=box, values=values, spec=spec, seed=seed, trial_index=trial_index)


def continuity_modulus(spec: DisorderSpec, eps: float, grid_points: int = 4001) -> float:
    """
    s(mu, eps) = sup_a mu([a, a + eps]), evaluated on a grid of window positions
    that includes the support edges and density breakpoints.

    Raises:
        ParameterError: eps <= 0
    """
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    M = spec.support_bound
    starts = [np.linspace(-M - eps, M, grid_points), np.asarray([-M, M - eps])]
    if spec.family == "piecewise-density":
        edges, _ = _piecewise_tables(spec)
        starts += [edges, edges - eps]
    if spec.family == "constant":
        starts.append(np.asarray([spec.constant_value - eps, spec.constant_value]))
    a = np.concatenate(starts)
    return float(np.max(window_probability(spec, a, a + eps)))


# =========================
# Interaction and assembly
# =========================

def interaction_energy(x: Config, spec: InteractionSpec) -> float:
    """U(x) = sum_{i<j} Phi(|x_i - x_j|) (amplitude h not included)."""
    total = 0.0
    for i in range(x.n):
        for j in range(i + 1, x.n):
            r = max(abs(a - b) for a, b in zip(x.coords[i], x.coords[j]))
            total += float(spec.phi_at(r))
    return total


def interaction_values(cube: MultiParticleCube, spec: InteractionSpec) -> np.ndarray:
    """U at every site of the cube, in enumeration order."""
    sites = cube.site_array().reshape(-1, cube.n, cube.d)
    out = np.zeros(len(sites), dtype=float)
    for i in range(cube.n):
        for j in range(i + 1, cube.n):
            r = np.max(np.abs(sites[:, i, :] - sites[:, j, :]), axis=1)
            out += spec.phi_at(r)
    return out


def interaction_norm(cube: MultiParticleCube, spec: InteractionSpec) -> float:
    """||U|| on the cube: max over sites of |U(x)|."""
    if cube.n < 2:
        return 0.0
    return float(np.max(np.abs(interaction_values(cube, spec))))


@dataclass(frozen=True, eq=False)
class AssembledHamiltonian:
    """
    Dense matrix of H = -Delta + V + hU restricted to a cube with simple boundary
    conditions: diagonal 2dn + sum_j V(x_j) + hU(x), -1 between |.|_1 nearest
    neighbours that both lie in the cube.
    """

    cube: MultiParticleCube
    matrix: np.ndarray
    h: float
    r0: int
    realization_id: str
    potential: np.ndarray = field(repr=False)
    interaction: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def u_norm(self) -> float:
        return float(np.max(np.abs(self.interaction))) if self.interaction.size else 0.0


def check_dimension(dimension: int, what: str, cap: Optional[int] = None) -> None:
    """
    Raises:
        ResourceLimitError: dimension above the cap (MSALAB_MAX_DIMENSION by default)
    """
    cap = max_dimension() if cap is None else cap
    if dimension > cap:
        raise ResourceLimitError(dimension, cap, what)


def describe_cube(cube: MultiParticleCube) -> str:
    return f"cube(center={cube.center.coords}, sides={cube.side_lengths})"


def assemble(
        cube: MultiParticleCube,
        realization: DisorderRealization,
        interaction: InteractionSpec,
        cap: Optional[int] = None,
) -> AssembledHamiltonian:
    """
    Restricted Hamiltonian on the cube; rows follow the cube's site enumeration.

    Raises:
        CoverageError: realization's box misses part of the cube's projection
        ResourceLimitError: cube cardinality above the dimension cap
    """
    check_dimension(cube.cardinality, describe_cube(cube), cap)
    lo, hi = cube.projection_bounds()
    if realization.box.d != cube.d or not realization.box.covers(lo, hi):
        raise CoverageError(
            f"Disorder box [{realization.box.lower}, {realization.box.upper}] does not cover "
            f"projection [{lo}, {hi}] of {describe_cube(cube)}"
        )

    flat = cube.site_array()
    sites = flat.reshape(-1, cube.n, cube.d)
    potential = np.zeros(len(flat), dtype=float)
    for j in range(cube.n):
        potential += realization.value_at(sites[:, j, :])
    u_values = interaction_values(cube, interaction)

    size = len(flat)
    matrix = np.zeros((size, size), dtype=float)
    idx = np.arange(size)
    matrix[idx, idx] = 2.0 * cube.d * cube.n + potential + interaction.h * u_values

    shape = cube.shape
    rel = flat - np.asarray(cube.lower, dtype=np.int64)
    for axis in range(cube.nd):
        stride = int(np.prod(shape[axis + 1:], dtype=np.int64))
        left = np.flatnonzero(rel[:, axis] < shape[axis] - 1)
        right = left + stride
        matrix[left, right] = -1.0
        matrix[right, left] = -1.0

    return AssembledHamiltonian(
        cube=cube,
        matrix=matrix,
        h=float(interaction.h),
        r0=interaction.r0,
        realization_id=realization.realization_id,
        potential=potential,
        interaction=u_values,
    )


def spectrum_interval(N: int, d: int, M: float, h: float, U_norm: float) -> Interval:
    """I = [-1 - N(4d+M) - |h| ||U||, N(4d+M) + |h| ||U|| + 1]."""
    if N < 1 or d < 1 or M < 0 or U_norm < 0:
        raise ParameterError(f"Invalid spectrum interval inputs: N={N} d={d} M={M} ||U||={U_norm}")
    reach = N * (4 * d + M) + abs(h) * U_norm
    return Interval(-1.0 - reach, reach + 1.0)
