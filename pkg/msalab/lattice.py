from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Iterator, Literal, Optional, Sequence, Union

import numpy as np

from msalab.errors import ClassificationError, DimensionError, ParameterError, RegionError

logger = logging.getLogger(__name__)

Point = tuple[int, ...]
PointLike = Union[int, Sequence[int]]


def _as_point(p: PointLike) -> Point:
    if isinstance(p, (int, np.integer)):
        return (int(p),)
    return tuple(int(c) for c in p)


@dataclass(frozen=True)
class Config:
    """
    n-particle configuration x = (x_1, ..., x_n), each x_i a point of Z^d.

    Particles are indexed 0..n-1 throughout the package.
    """

    coords: tuple[Point, ...]

    def __post_init__(self) -> None:
        if len(self.coords) < 1:
            raise DimensionError("A configuration needs at least one particle")
        d = len(self.coords[0])
        if d < 1:
            raise DimensionError("Particle dimension d must be >= 1")
        if any(len(c) != d for c in self.coords):
            raise DimensionError(f"All particles must share dimension d={d}: {self.coords}")

    @staticmethod
    def of(*points: PointLike) -> "Config":
        """Config.of(0, 3) for d=1, Config.of((0, 1), (2, 2)) for d=2."""
        return Config(tuple(_as_point(p) for p in points))

    @staticmethod
    def from_flat(flat: Sequence[int], n: int, d: int) -> "Config":
        if len(flat) != n * d:
            raise DimensionError(f"Flat length {len(flat)} != n*d = {n * d}")
        vals = [int(v) for v in flat]
        return Config(tuple(tuple(vals[i * d:(i + 1) * d]) for i in range(n)))

    @staticmethod
    def origin(n: int, d: int) -> "Config":
        return Config(tuple((0,) * d for _ in range(n)))

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def d(self) -> int:
        return len(self.coords[0])

    @property
    def flat(self) -> Point:
        return tuple(c for p in self.coords for c in p)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=np.int64)

    def norm(self) -> int:
        """|x| = max over all nd coordinates of |x_i|."""
        return max(abs(c) for c in self.flat)

    def particles(self, indices: Sequence[int]) -> "Config":
        return Config(tuple(self.coords[i] for i in indices))

    def shifted(self, offset: PointLike) -> "Config":
        off = _as_point(offset)
        if len(off) != self.d:
            raise DimensionError(f"Offset dimension {len(off)} != d={self.d}")
        return Config(tuple(tuple(a + b for a, b in zip(p, off)) for p in self.coords))


def sup_distance(a: Config, b: Config) -> int:
    """
    |a - b| in the max norm over all nd coordinates.

    Raises:
        DimensionError: a and b have different (n, d)
    """
    if a.n != b.n or a.d != b.d:
        raise DimensionError(f"Shape mismatch: (n={a.n}, d={a.d}) vs (n={b.n}, d={b.d})")
    return max(abs(p - q) for p, q in zip(a.flat, b.flat))


# =========================
# Cubes
# =========================

@lru_cache(maxsize=512)
def _site_grid(lower: Point, shape: Point) -> np.ndarray:
    grid = np.indices(shape, dtype=np.int64).reshape(len(shape), -1).T + np.asarray(lower, dtype=np.int64)
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True)
class MultiParticleCube:
    """
    Rectangle prod_i C_{L_i}(u_i) in Z^{nd}.

    Sites are enumerated row-major over the flat coordinate vector
    (x_1^1, ..., x_1^d, x_2^1, ...), the first coordinate varying slowest.
    A side length of 0 is a single-site factor.
    """

    center: Config
    side_lengths: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.side_lengths) != self.center.n:
            raise DimensionError(
                f"side_lengths has {len(self.side_lengths)} entries for n={self.center.n} particles"
            )
        if any(int(L) < 0 for L in self.side_lengths):
            raise ParameterError(f"Side lengths must be >= 0: {self.side_lengths}")

    @classmethod
    def equal(cls, center: Config, L: int) -> "MultiParticleCube":
        return cls(center=center, side_lengths=(int(L),) * center.n)

    @property
    def n(self) -> int:
        return self.center.n

    @property
    def d(self) -> int:
        return self.center.d

    @property
    def nd(self) -> int:
        return self.n * self.d

    @property
    def is_equal(self) -> bool:
        return len(set(self.side_lengths)) == 1

    @property
    def L(self) -> int:
        if not self.is_equal:
            raise ParameterError(f"Cube has unequal side lengths {self.side_lengths}")
        return self.side_lengths[0]

    @property
    def lower(self) -> Point:
        return tuple(c - L for p, L in zip(self.center.coords, self.side_lengths) for c in p)

    @property
    def upper(self) -> Point:
        return tuple(c + L for p, L in zip(self.center.coords, self.side_lengths) for c in p)

    @property
    def shape(self) -> Point:
        return tuple(2 * L + 1 for L in self.side_lengths for _ in range(self.d))

    @property
    def cardinality(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def contains(self, x: Config) -> bool:
        if x.n != self.n or x.d != self.d:
            return False
        return all(lo <= c <= hi for c, lo, hi in zip(x.flat, self.lower, self.upper))

    def site_array(self) -> np.ndarray:
        """(|C|, nd) integer array of sites in enumeration order (read-only)."""
        return _site_grid(self.lower, self.shape)

    def configs(self) -> Iterator[Config]:
        for row in self.site_array():
            yield Config.from_flat(row, self.n, self.d)

    def index_of(self, x: Config) -> int:
        """
        Enumeration index of a site.

        Raises:
            RegionError: x is not a site of the cube
        """
        if not self.contains(x):
            raise RegionError(f"{x} is not in cube centered at {self.center} with sides {self.side_lengths}")
        rel = np.asarray(x.flat, dtype=np.int64) - np.asarray(self.lower, dtype=np.int64)
        return int(np.ravel_multi_index(tuple(rel), self.shape))

    def indices_of(self, flat_sites: np.ndarray) -> np.ndarray:
        """Vectorised index_of for an (K, nd) array of sites known to be inside."""
        rel = np.asarray(flat_sites, dtype=np.int64) - np.asarray(self.lower, dtype=np.int64)
        return np.ravel_multi_index(tuple(rel.T), self.shape)

    def internal_mask(self) -> np.ndarray:
        """Boolean mask over sites: True on the internal boundary."""
        sites = self.site_array()
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        return np.any((sites == lower) | (sites == upper), axis=1)

    def internal_indices(self) -> np.ndarray:
        return np.flatnonzero(self.internal_mask())

    def projection(self) -> set[Point]:
        """Single-particle shadow: union of the boxes C_{L_i}(u_i) in Z^d."""
        out: set[Point] = set()
        for p, L in zip(self.center.coords, self.side_lengths):
            ranges = [range(c - L, c + L + 1) for c in p]
            out.update(itertools.product(*ranges))
        return out

    def projection_bounds(self) -> tuple[Point, Point]:
        """Smallest Z^d box (lower, upper) containing the projection."""
        lo = tuple(min(p[k] - L for p, L in zip(self.center.coords, self.side_lengths)) for k in range(self.d))
        hi = tuple(max(p[k] + L for p, L in zip(self.center.coords, self.side_lengths)) for k in range(self.d))
        return lo, hi

    def restrict(self, particles: Sequence[int]) -> "MultiParticleCube":
        """Factor cube over a group of particles (canonical decomposition factor)."""
        return MultiParticleCube(
            center=self.center.particles(particles),
            side_lengths=tuple(self.side_lengths[i] for i in particles),
        )

    def product(self, other: "MultiParticleCube") -> "MultiParticleCube":
        if other.d != self.d:
            raise DimensionError(f"Cannot multiply cubes with d={self.d} and d={other.d}")
        return MultiParticleCube(
            center=Config(self.center.coords + other.center.coords),
            side_lengths=self.side_lengths + other.side_lengths,
        )

    def subcube_centers(self, ell: int, stride: int = 1) -> list[Config]:
        """
        Centers of the equal-side sub-cubes C_ell(v) lying fully inside this cube,
        taken on a lattice of the given stride anchored at the lower corner.
        """
        if ell < 0 or stride < 1:
            raise ParameterError(f"Invalid sub-cube scan: ell={ell} stride={stride}")
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            if hi - lo < 2 * ell:
                return []
            axes.append(range(lo + ell, hi - ell + 1, stride))
        return [Config.from_flat(flat, self.n, self.d) for flat in itertools.product(*axes)]


def boundaries(cube: MultiParticleCube) -> tuple[set[Config], set[Config]]:
    """
    Internal boundary (sites of the cube at max-norm distance 1 from its complement)
    and external boundary (sites outside at max-norm distance 1 from the cube).
    """
    internal = {Config.from_flat(row, cube.n, cube.d) for row in cube.site_array()[cube.internal_mask()]}
    grown = MultiParticleCube(cube.center, tuple(L + 1 for L in cube.side_lengths))
    lower = np.asarray(cube.lower)
    upper = np.asarray(cube.upper)
    sites = grown.site_array()
    outside = np.any((sites < lower) | (sites > upper), axis=1)
    external = {Config.from_flat(row, cube.n, cube.d) for row in sites[outside]}
    return internal, external


# =========================
# Separability
# =========================

@dataclass(frozen=True)
class SeparabilityVerdict:
    separable: bool
    witness_J: Optional[tuple[int, ...]]
    distance_ok: bool
    # "x" when C(x) is J-separable from C(y), "y" for the reverse direction
    separated_cube: Optional[Literal["x", "y"]] = None


@lru_cache(maxsize=16)
def _subsets_lex(n: int) -> tuple[tuple[int, ...], ...]:
    subsets = [c for k in range(1, n + 1) for c in itertools.combinations(range(n), k)]
    return tuple(sorted(subsets))


def _pairwise_sup(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.max(np.abs(a[:, None, :] - b[None, :, :]), axis=2)


def j_separable(x: Config, y: Config, L: int) -> Optional[tuple[int, ...]]:
    """
    First J (lexicographic subset order) such that C_L(x) is J-separable from C_L(y):
    the boxes C_L(x_j), j in J, meet neither the remaining x-boxes nor any y-box.
    Two boxes of radius L meet iff their centers are within 2L in the max norm.
    """
    if x.n != y.n or x.d != y.d:
        raise DimensionError(f"Shape mismatch: (n={x.n}, d={x.d}) vs (n={y.n}, d={y.d})")
    xa = x.as_array()
    dxx = _pairwise_sup(xa, xa) <= 2 * L
    dxy = _pairwise_sup(xa, y.as_array()) <= 2 * L
    for J in _subsets_lex(x.n):
        inside = np.zeros(x.n, dtype=bool)
        inside[list(J)] = True
        if dxy[inside].any():
            continue
        if dxx[np.ix_(inside, ~inside)].any():
            continue
        return J
    return None


def is_separable(x: Config, y: Config, L: int, N: Optional[int] = None) -> SeparabilityVerdict:
    """
    Separability of the pair (C_L(x), C_L(y)): |x - y| > 7NL and one cube is
    J-separable from the other. N defaults to the configuration's particle count.
    """
    N = x.n if N is None else N
    distance_ok = sup_distance(x, y) > 7 * N * L
    J = j_separable(x, y, L)
    side: Optional[Literal["x", "y"]] = "x" if J is not None else None
    if J is None:
        J = j_separable(y, x, L)
        side = "y" if J is not None else None
    return SeparabilityVerdict(
        separable=distance_ok and J is not None,
        witness_J=J,
        distance_ok=distance_ok,
        separated_cube=side,
    )


def separability_collection(x: Config, L: int) -> list[Config]:
    """
    The n^n centers x^(sigma), one per map sigma: {0..n-1} -> {0..n-1}, whose i-th
    particle sits at x_{sigma(i)}. Outside the union of the cubes C_{2nL}(x^(sigma)),
    every y with |y - x| > 7NL gives a separable pair.

    Raises:
        ParameterError: L <= 1
    """
    if L <= 1:
        raise ParameterError(f"Separability collection needs L > 1, got L={L}")
    return [x.particles(sigma) for sigma in itertools.product(range(x.n), repeat=x.n)]


def exceptional_cubes(x: Config, L: int) -> list[MultiParticleCube]:
    return [MultiParticleCube.equal(c, 2 * x.n * L) for c in separability_collection(x, L)]


def in_exceptional_region(y: Config, x: Config, L: int) -> bool:
    return any(cube.contains(y) for cube in exceptional_cubes(x, L))


# =========================
# Interactivity
# =========================

@dataclass(frozen=True)
class Interactivity:
    """
    PI/FI verdict. For PI cubes first/second are the particle groups of the canonical
    decomposition (first always holds particle 0) and gap is the smallest distance
    between single-particle boxes across the split.
    """

    kind: Literal["PI", "FI"]
    first: tuple[int, ...] = ()
    second: tuple[int, ...] = ()
    gap: Optional[int] = None
    first_cube: Optional[MultiParticleCube] = None
    second_cube: Optional[MultiParticleCube] = None

    @property
    def is_partial(self) -> bool:
        return self.kind == "PI"

    @property
    def n_first(self) -> int:
        return len(self.first)

    @property
    def n_second(self) -> int:
        return len(self.second)


def box_gaps(cube: MultiParticleCube) -> np.ndarray:
    """(n, n) matrix of max-norm distances between the single-particle boxes."""
    centers = cube.center.as_array()
    sides = np.asarray(cube.side_lengths, dtype=np.int64)
    raw = _pairwise_sup(centers, centers) - (sides[:, None] + sides[None, :])
    return np.maximum(raw, 0)


def classify_interactivity(cube: MultiParticleCube, r0: int) -> Interactivity:
    """
    PI iff the particles split into two nonempty groups whose boxes are all farther
    than r0 apart, so the cross interaction vanishes on every site of the cube.
    Among valid splits the largest gap wins; ties go to the lexicographically
    smallest group containing particle 0.

    Raises:
        ClassificationError: n == 1
    """
    if cube.n == 1:
        raise ClassificationError("Interactivity is undefined for a single particle")
    gaps = box_gaps(cube)
    best: Optional[tuple[int, tuple[int, ...], tuple[int, ...]]] = None
    rest = list(range(1, cube.n))
    for k in range(0, cube.n - 1):
        for extra in itertools.combinations(rest, k):
            first = (0,) + extra
            second = tuple(i for i in range(cube.n) if i not in first)
            cross = int(gaps[np.ix_(list(first), list(second))].min())
            if cross <= r0:
                continue
            if best is None or cross > best[0] or (cross == best[0] and first < best[1]):
                best = (cross, first, second)
    if best is None:
        return Interactivity(kind="FI")
    gap, first, second = best
    return Interactivity(
        kind="PI",
        first=first,
        second=second,
        gap=gap,
        first_cube=cube.restrict(first),
        second_cube=cube.restrict(second),
    )


def iter_window(center: Config, radius: int) -> Iterable[Config]:
    """All configurations within max-norm distance radius of center (exhaustive scans)."""
    return MultiParticleCube.equal(center, radius).configs()
