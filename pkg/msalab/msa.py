from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from msalab.errors import ParameterError, PreconditionError
from msalab.lattice import MultiParticleCube, Point, classify_interactivity
from msalab.model import AssembledHamiltonian, Interval
from msalab.spectral import RESONANCE_FLOOR, SpectralData, SpectrumOracle, diagonalize

logger = logging.getLogger(__name__)


# =========================
# Parameters
# =========================

@dataclass(frozen=True)
class MsaParams:
    """
    Scale-induction parameters. L_{k+1} = floor(L_k^alpha), p_k = p (1 + theta)^k.

    enforce_strict=True additionally enforces p > 6Nd / (1 - 3 theta) and
    m <= 1 / (2^{N+1} 12 N d).
    """

    N: int = 2
    d: int = 1
    n: int = 2
    m: float = 0.01
    p: float = 2.0
    theta: float = 0.1
    alpha: float = 1.5
    L0: int = 8
    resonance_exponent: float = 0.5
    beta_prime: float = 0.5
    enforce_strict: bool = False

    def __post_init__(self) -> None:
        if self.N < 1 or self.d < 1:
            raise ParameterError(f"N and d must be >= 1, got N={self.N} d={self.d}")
        if not 1 <= self.n <= self.N:
            raise ParameterError(f"n must be in [1, N={self.N}], got {self.n}")
        if self.m <= 0:
            raise ParameterError(f"m must be > 0, got {self.m}")
        if self.p <= 0:
            raise ParameterError(f"p must be > 0, got {self.p}")
        if not 0.0 < self.theta < 1.0 / 3.0:
            raise ParameterError(f"theta must be in (0, 1/3), got {self.theta}")
        if self.alpha <= 1.0:
            raise ParameterError(f"alpha must be > 1, got {self.alpha}")
        if self.L0 < 1:
            raise ParameterError(f"L0 must be >= 1, got {self.L0}")
        if self.resonance_exponent <= 0 or self.beta_prime <= 0:
            raise ParameterError("resonance_exponent and beta_prime must be > 0")
        if self.enforce_strict:
            problems = self.strict_violations()
            if problems:
                raise ParameterError("; ".join(problems))

    @property
    def J_threshold(self) -> int:
        return self.n ** self.n + 5

    @property
    def strict_p_min(self) -> float:
        return 6.0 * self.N * self.d / (1.0 - 3.0 * self.theta)

    @property
    def strict_m_max(self) -> float:
        return 1.0 / (2 ** (self.N + 1) * 12 * self.N * self.d)

    def strict_violations(self) -> list[str]:
        out = []
        if not self.p > self.strict_p_min:
            out.append(f"p={self.p} must exceed 6Nd/(1-3theta)={self.strict_p_min:.6g}")
        if not self.m <= self.strict_m_max:
            out.append(f"m={self.m} must be <= 1/(2^(N+1) 12Nd)={self.strict_m_max:.6g}")
        return out

    @property
    def is_strict(self) -> bool:
        return not self.strict_violations()

    def with_n(self, n: int) -> "MsaParams":
        return replace(self, n=n)

    def scale(self, k: int) -> int:
        L = self.L0
        for _ in range(k):
            L = next_scale(L, self.alpha)
        return L

    def scales(self, count: int) -> list[int]:
        return [self.scale(k) for k in range(count)]

    def p_k(self, k: int) -> float:
        return self.p * (1.0 + self.theta) ** k

    def resonance_threshold(self, L: int) -> float:
        """e^{-L^{1/2}}: a cube is E-resonant when dist(E, spectrum) is at most this."""
        return math.exp(-(L ** self.resonance_exponent))

    def cnr_min_side(self, L: int) -> int:
        return int(math.ceil(L ** (1.0 / self.alpha) - 1e-9))

    def target(self, k: int, n: Optional[int] = None) -> float:
        """L_k^{-2p 4^{N-n} (1+theta)^k}."""
        n = self.n if n is None else n
        return float(self.scale(k)) ** (-2.0 * self.p * 4 ** (self.N - n) * (1.0 + self.theta) ** k)


def next_scale(L: int, alpha: float) -> int:
    return int(math.floor(L ** alpha + 1e-9))


def gamma(m: float, L: float, n: int, N: int) -> float:
    """
    gamma(m, L, n) = m (1 + L^{-1/8})^{N - n + 1}.

    Raises:
        ParameterError: m <= 0, L < 1 or n outside [1, N]
    """
    if m <= 0 or L < 1 or not 1 <= n <= N:
        raise ParameterError(f"gamma needs m > 0, L >= 1, 1 <= n <= N; got m={m} L={L} n={n} N={N}")
    return m * (1.0 + L ** (-1.0 / 8.0)) ** (N - n + 1)


def m_star(N: int, d: int, mu_tilde: float = math.inf) -> float:
    """m* = min(1 / (2^N 12 N d), 2^{-N-1} mu_tilde)."""
    return min(1.0 / (2 ** N * 12 * N * d), 2.0 ** (-N - 1) * mu_tilde)


# =========================
# Cube verdicts
# =========================

@dataclass(frozen=True)
class CubeVerdict:
    center: Point
    L: int
    n: int
    energy: float
    m: float
    h: float
    ns: bool
    resonant: bool
    cnr: Optional[bool]
    max_boundary_green: float
    gamma_threshold: float
    spectral_gap: float

    def to_record(self) -> dict:
        return {
            "cube": {"center": list(self.center), "L": self.L, "n": self.n},
            "E": self.energy,
            "m": self.m,
            "h": self.h,
            "ns": self.ns,
            "resonant": self.resonant,
            "cnr": self.cnr,
            "max_boundary_green": self.max_boundary_green,
            "eta": self.spectral_gap,
        }


def boundary_green_max(spec: SpectralData, cube: MultiParticleCube, energy: float) -> float:
    """max over the internal boundary v of |G(u, v; E)|, u the cube center."""
    u = cube.index_of(cube.center)
    boundary = cube.internal_indices()
    coeffs = spec.eigenvectors[u] / (spec.eigenvalues - energy)
    return float(np.max(np.abs(spec.eigenvectors[boundary] @ coeffs)))


def verdict_from_spectrum(
        spec: SpectralData,
        energy: float,
        params: MsaParams,
        h: float = 0.0,
        cnr: Optional[bool] = None,
) -> CubeVerdict:
    """
    (E, m, h)-NS/S and (E, h)-R/NR verdicts of the equal-side cube spec is attached
    to. When E is numerically an eigenvalue (eta <= 1e-12) the cube is S and R.
    """
    cube = spec.cube
    if cube is None:
        raise ParameterError("Cube verdicts need spectral data attached to a cube")
    L = cube.L
    eta = spec.eta(energy)
    threshold = math.exp(-gamma(params.m, L, cube.n, params.N) * L)
    resonant = eta <= params.resonance_threshold(L) or eta <= RESONANCE_FLOOR
    if eta <= RESONANCE_FLOOR:
        max_green, ns = math.inf, False
    else:
        max_green = boundary_green_max(spec, cube, energy)
        ns = max_green <= threshold
    return CubeVerdict(
        center=cube.center.flat,
        L=L,
        n=cube.n,
        energy=float(energy),
        m=params.m,
        h=h,
        ns=ns,
        resonant=resonant,
        cnr=cnr,
        max_boundary_green=max_green,
        gamma_threshold=threshold,
        spectral_gap=eta,
    )


def classify_cube(
        H: AssembledHamiltonian,
        energy: float,
        params: MsaParams,
        spec: Optional[SpectralData] = None,
        cnr: Optional[bool] = None,
) -> CubeVerdict:
    """Verdicts of an assembled cube; spec may carry its precomputed eigenpairs."""
    return verdict_from_spectrum(spec if spec is not None else diagonalize(H), energy, params, H.h, cnr)


# =========================
# Sub-cube scans
# =========================

@dataclass(frozen=True)
class CnrResult:
    cnr: bool
    offender: Optional[tuple[Point, int]] = None
    checked: int = 0


def _cnr_sides(L: int, params: MsaParams) -> range:
    if L ** (1.0 / params.alpha) < 2.0 - 1e-9:
        raise PreconditionError(f"CNR scan needs L^(1/alpha) >= 2, got L={L} alpha={params.alpha}")
    return range(L, params.cnr_min_side(L) - 1, -1)


def _scan(cube: MultiParticleCube, ell: int, stride: int) -> Iterator[MultiParticleCube]:
    for center in cube.subcube_centers(ell, stride if ell < cube.L else 1):
        yield MultiParticleCube.equal(center, ell)


def is_cnr(
        cube: MultiParticleCube,
        energy: float,
        params: MsaParams,
        oracle: SpectrumOracle,
        stride: int = 1,
) -> CnrResult:
    """
    E-CNR verdict: no sub-cube of side ell in [ceil(L^{1/alpha}), L] is E-resonant.
    The oracle supplies sub-cube spectra for one realization. Sides are scanned
    from L downward and the first resonant sub-cube is returned as the offender.

    Raises:
        PreconditionError: L^{1/alpha} < 2
    """
    checked = 0
    for ell in _cnr_sides(cube.L, params):
        width = params.resonance_threshold(ell)
        for sub in _scan(cube, ell, stride):
            checked += 1
            if np.min(np.abs(oracle.eigenvalues(sub) - energy)) <= width:
                return CnrResult(cnr=False, offender=(sub.center.flat, ell), checked=checked)
    return CnrResult(cnr=True, checked=checked)


@dataclass(frozen=True)
class EnergySet:
    """Finite union of disjoint closed intervals, sorted."""

    intervals: tuple[tuple[float, float], ...] = ()

    @classmethod
    def from_windows(cls, centers: np.ndarray, widths: np.ndarray) -> "EnergySet":
        if len(centers) == 0:
            return cls()
        lo = np.asarray(centers) - np.asarray(widths)
        hi = np.asarray(centers) + np.asarray(widths)
        order = np.argsort(lo, kind="stable")
        merged: list[list[float]] = []
        for a, b in zip(lo[order], hi[order]):
            if merged and a <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], float(b))
            else:
                merged.append([float(a), float(b)])
        return cls(tuple((a, b) for a, b in merged))

    def contains(self, energy: float) -> bool:
        return any(a <= energy <= b for a, b in self.intervals)

    @property
    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    def intersect(self, other: "EnergySet") -> "EnergySet":
        out = []
        i = j = 0
        while i < len(self.intervals) and j < len(other.intervals):
            a1, b1 = self.intervals[i]
            a2, b2 = other.intervals[j]
            lo, hi = max(a1, a2), min(b1, b2)
            if lo <= hi:
                out.append((lo, hi))
            if b1 < b2:
                i += 1
            else:
                j += 1
        return EnergySet(tuple(out))

    def clip(self, interval: Interval) -> "EnergySet":
        return self.intersect(EnergySet(((interval.lo, interval.hi),)))


def resonant_energy_set(
        cube: MultiParticleCube,
        params: MsaParams,
        oracle: SpectrumOracle,
        stride: int = 1,
) -> EnergySet:
    """
    Every E at which the cube is not E-CNR: union over the scanned sub-cubes of side
    ell of the windows |E - lambda| <= e^{-ell^{1/2}} around their eigenvalues.

    Raises:
        PreconditionError: L^{1/alpha} < 2
    """
    centers, widths = [], []
    for ell in _cnr_sides(cube.L, params):
        width = params.resonance_threshold(ell)
        for sub in _scan(cube, ell, stride):
            values = oracle.eigenvalues(sub)
            centers.append(values)
            widths.append(np.full(len(values), width))
    if not centers:
        return EnergySet()
    return EnergySet.from_windows(np.concatenate(centers), np.concatenate(widths))


# =========================
# Singular sub-cube counting
# =========================

class _PackingDone(Exception):
    pass


def max_separated_packing(
        points: np.ndarray,
        min_distance: float,
        limit: Optional[int] = None,
) -> list[int]:
    """
    Largest subset of points (rows, max norm) pairwise farther than min_distance
    apart, by branch and bound. Search stops early once more than limit points are
    packed. The bound counts occupied grid cells of side min_distance, since two
    points sharing a cell always conflict.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return []
    pts = pts.reshape(len(pts), -1)
    conflict = np.max(np.abs(pts[:, None, :] - pts[None, :, :]), axis=2) <= min_distance
    np.fill_diagonal(conflict, False)
    cells = np.floor(pts / min_distance).astype(np.int64) if min_distance > 0 else None
    order = [int(i) for i in np.argsort(conflict.sum(axis=1), kind="stable")]
    best: list[int] = []

    def bound(candidates: list[int]) -> int:
        if cells is None:
            return len(candidates)
        return len({tuple(cells[c]) for c in candidates})

    def search(candidates: list[int], chosen: list[int]) -> None:
        nonlocal best
        if len(chosen) > len(best):
            best = list(chosen)
            if limit is not None and len(best) > limit:
                raise _PackingDone
        if not candidates or len(chosen) + bound(candidates) <= len(best):
            return
        v, rest = candidates[0], candidates[1:]
        search([u for u in rest if not conflict[v, u]], chosen + [v])
        # a vertex without conflicts belongs to some maximum packing
        if any(conflict[v, u] for u in rest):
            search(rest, chosen)

    try:
        search(order, [])
    except _PackingDone:
        pass
    return sorted(best)


@dataclass(frozen=True)
class SingularCount:
    M_PI: int
    M_FI: int
    pi_centers: tuple[Point, ...] = ()
    fi_centers: tuple[Point, ...] = ()
    scanned: int = 0

    def exceeds(self, J: int) -> bool:
        return self.M_PI + self.M_FI > J


def singular_subcubes(
        cube: MultiParticleCube,
        energy: float,
        params: MsaParams,
        L_k: int,
        oracle: SpectrumOracle,
        stride: int = 1,
        kinds: tuple[str, ...] = ("PI", "FI"),
        first_only: bool = False,
) -> tuple[list[tuple[Point, str]], int]:
    """
    (center, "PI" | "FI") of every (E, m, h)-singular sub-cube of side L_k on the
    scan lattice, restricted to the requested kinds, plus the number scanned.
    One-particle sub-cubes are reported as FI.
    """
    found: list[tuple[Point, str]] = []
    scanned = 0
    for sub in _scan(cube, L_k, stride):
        if sub.n > 1:
            kind = "PI" if classify_interactivity(sub, oracle.r0).is_partial else "FI"
        else:
            kind = "FI"
        if kind not in kinds:
            continue
        scanned += 1
        verdict = verdict_from_spectrum(oracle.spectrum(sub), energy, params)
        if not verdict.ns:
            found.append((sub.center.flat, kind))
            if first_only:
                break
    return found, scanned


def count_singular_subcubes(
        cube: MultiParticleCube,
        energy: float,
        params: MsaParams,
        L_k: int,
        oracle: SpectrumOracle,
        stride: int = 1,
        limit: Optional[int] = None,
) -> SingularCount:
    """
    M_PI / M_FI: maximal numbers of (E, m, h)-singular PI (resp. FI) sub-cubes of
    side L_k with centers pairwise farther than 7 N L_k apart. Counting stops above
    limit (default J_threshold).

    Raises:
        ParameterError: L_{k+1} <= 7 N L_k
    """
    if cube.L <= 7 * params.N * L_k:
        raise ParameterError(
            f"count_singular_subcubes needs L_k+1 > 7 N L_k, got {cube.L} vs 7*{params.N}*{L_k}"
        )
    limit = params.J_threshold if limit is None else limit
    found, scanned = singular_subcubes(cube, energy, params, L_k, oracle, stride)
    pi = [c for c, kind in found if kind == "PI"]
    fi = [c for c, kind in found if kind == "FI"]
    min_distance = 7 * params.N * L_k
    pi_pick = max_separated_packing(np.asarray(pi), min_distance, limit)
    fi_pick = max_separated_packing(np.asarray(fi), min_distance, limit)
    return SingularCount(
        M_PI=len(pi_pick),
        M_FI=len(fi_pick),
        pi_centers=tuple(pi[i] for i in pi_pick),
        fi_centers=tuple(fi[i] for i in fi_pick),
        scanned=scanned,
    )

# =========================
# Recursion ledger
# =========================

@dataclass(frozen=True)
class RecursionRecord:
    k: int
    n: int
    L_k: int
    L_next: int
    P_k: float
    Q_next: float
    S_next: float
    rhs_bound: float
    target: float
    P_next: Optional[float] = None
    P_next_ci_lo: Optional[float] = None
    # "empirical" rows come from sampled trials, "reference" rows from fixed inputs
    source: str = "empirical"

    @property
    def holds(self) -> Optional[bool]:
        """Empirical P_{k+1} (its CI lower end when available) against the rhs."""
        if self.P_next is None:
            return None
        observed = self.P_next_ci_lo if self.P_next_ci_lo is not None else self.P_next
        return observed <= self.rhs_bound


@dataclass(frozen=True)
class RecursionLedger:
    records: tuple[RecursionRecord, ...] = field(default_factory=tuple)

    def append(self, record: RecursionRecord) -> "RecursionLedger":
        return RecursionLedger(self.records + (record,))

    @property
    def all_hold(self) -> bool:
        return all(r.holds is not False for r in self.records)


def recursion_rhs(n: int, d: int, L_next: int, P_k: float, Q_next: float, S_next: float) -> float:
    """(3^{2nd} / 2) L_{k+1}^{2nd} P_k^2 + Q_{k+1} + S_{k+1}."""
    e = 2 * n * d
    return (3.0 ** e / 2.0) * float(L_next) ** e * P_k ** 2 + Q_next + S_next


def recursion_step(
        ledger: RecursionLedger,
        k: int,
        params: MsaParams,
        P_k: float,
        Q_next: float,
        S_next: float,
        P_next: Optional[float] = None,
        P_next_ci_lo: Optional[float] = None,
        L_next: Optional[int] = None,
        source: str = "empirical",
) -> RecursionLedger:
    """
    Append the scale-k step: rhs of the P/Q/S recursion and the target
    L_{k+1}^{-2p 4^{N-n} (1+theta)^{k+1}}.

    Raises:
        ParameterError: a probability outside [0, 1]
    """
    for name, value in (("P_k", P_k), ("Q_next", Q_next), ("S_next", S_next)):
        if not 0.0 <= value <= 1.0:
            raise ParameterError(f"{name} must be in [0, 1], got {value}")
    L_k = params.scale(k)
    L_next = params.scale(k + 1) if L_next is None else L_next
    rhs = recursion_rhs(params.n, params.d, L_next, P_k, Q_next, S_next)
    target = float(L_next) ** (-2.0 * params.p * 4 ** (params.N - params.n) * (1.0 + params.theta) ** (k + 1))
    record = RecursionRecord(
        k=k,
        n=params.n,
        L_k=L_k,
        L_next=L_next,
        P_k=P_k,
        Q_next=Q_next,
        S_next=S_next,
        rhs_bound=rhs,
        target=target,
        P_next=P_next,
        P_next_ci_lo=P_next_ci_lo,
        source=source,
    )
    if record.holds is False:
        logger.warning("Recursion inequality violated: k=%s P_next=%s rhs=%s", k, P_next, rhs)
    return ledger.append(record)


# =========================
# Fixed to variable energy
# =========================

@dataclass(frozen=True)
class CoverParams:
    a: float
    b: float
    c: float

    def condition_holds(self, volume: int) -> bool:
        """b <= min(a c^2 / |C|, c)."""
        return self.b <= min(self.a * self.c ** 2 / volume, self.c)


def cover_params(L: int, p_k: float, N: int, d: int) -> CoverParams:
    """a = L^{-p_k/5}, b = L^{-4 p_k/5}, c = 3^{Nd/2} L^{-p_k/5}."""
    a = float(L) ** (-p_k / 5.0)
    return CoverParams(a=a, b=float(L) ** (-4.0 * p_k / 5.0), c=3.0 ** (N * d / 2.0) * a)


@dataclass(frozen=True, eq=False)
class CoverReport:
    params: CoverParams
    grid_step: float
    energies: np.ndarray = field(repr=False)
    boundary_green: np.ndarray = field(repr=False)
    bad: np.ndarray = field(repr=False)
    uncovered: np.ndarray = field(repr=False)
    condition_ok: bool = True
    measure_above_a: float = 0.0

    @property
    def exceptional(self) -> bool:
        """mes{E : F(E) >= a} > b."""
        return self.measure_above_a > self.params.b


def boundary_green_profile(
        spec: SpectralData,
        cube: MultiParticleCube,
        energies: np.ndarray,
        chunk: int = 2048,
) -> np.ndarray:
    """F_u(E) = max over the internal boundary of |G(u, v; E)| on an energy grid (inf on the spectrum)."""
    u = cube.index_of(cube.center)
    coeffs = spec.eigenvectors[cube.internal_indices()] * spec.eigenvectors[u]
    out = np.empty(len(energies))
    for start in range(0, len(energies), chunk):
        block = np.asarray(energies[start:start + chunk])
        gaps = spec.eigenvalues[:, None] - block[None, :]
        on_spectrum = np.min(np.abs(gaps), axis=0) <= RESONANCE_FLOOR
        gaps[np.abs(gaps) <= RESONANCE_FLOOR] = np.inf
        values = np.max(np.abs(coeffs @ (1.0 / gaps)), axis=0)
        values[on_spectrum] = np.inf
        out[start:start + chunk] = values
    return out


def energy_interval_cover(
        spec: SpectralData,
        params: MsaParams,
        k: int,
        interval: Interval,
        grid_step: float,
) -> CoverReport:
    """
    Scan F_u(E) over a grid of I and collect the bad energies F_u(E) >= 2a that
    lie farther than 2c from every eigenvalue. The side of the cube plays the role
    of L_k.

    Raises:
        ParameterError: grid_step > b / 4
    """
    cube = spec.cube
    if cube is None:
        raise ParameterError("energy_interval_cover needs spectral data attached to a cube")
    L = cube.L
    cp = cover_params(L, params.p_k(k), params.N, params.d)
    if grid_step > cp.b / 4.0:
        raise ParameterError(f"grid_step {grid_step:.3e} must be <= b/4 = {cp.b / 4.0:.3e}")
    energies = interval.grid(grid_step)
    F = boundary_green_profile(spec, cube, energies)
    bad = energies[F >= 2.0 * cp.a]
    if bad.size:
        pos = np.searchsorted(spec.eigenvalues, bad)
        left = np.abs(bad - spec.eigenvalues[np.clip(pos - 1, 0, spec.dimension - 1)])
        right = np.abs(bad - spec.eigenvalues[np.clip(pos, 0, spec.dimension - 1)])
        uncovered = bad[np.minimum(left, right) > 2.0 * cp.c]
    else:
        uncovered = bad
    return CoverReport(
        params=cp,
        grid_step=grid_step,
        energies=energies,
        boundary_green=F,
        bad=bad,
        uncovered=uncovered,
        condition_ok=cp.condition_holds(cube.cardinality),
        measure_above_a=float(np.count_nonzero(F >= cp.a)) * grid_step,
    )


# =========================
# Initial scale helpers
# =========================

def one_particle_localized(
        spec: SpectralData,
        L0: int,
        m: float,
        n: int,
        N: int,
) -> bool:
    """
    |psi_j(u) psi_j(v)| <= e^{-2 gamma(m, L0, n) L0} for every eigenvector of a
    one-particle cube of side L0 and every v on its internal boundary.
    """
    cube = spec.cube
    if cube is None or cube.n != 1:
        raise ParameterError("one_particle_localized needs spectral data of a one-particle cube")
    u = cube.index_of(cube.center)
    products = np.abs(spec.eigenvectors[cube.internal_indices()] * spec.eigenvectors[u])
    return bool(np.max(products) <= math.exp(-2.0 * gamma(m, L0, n, N) * L0))


def spectral_distance(a: SpectralData | np.ndarray, b: SpectralData | np.ndarray) -> float:
    """dist(sigma_a, sigma_b) = min |lambda - mu|."""
    va = np.sort(a.eigenvalues if isinstance(a, SpectralData) else np.asarray(a))
    vb = np.sort(b.eigenvalues if isinstance(b, SpectralData) else np.asarray(b))
    pos = np.searchsorted(vb, va)
    below = np.abs(va - vb[np.clip(pos - 1, 0, len(vb) - 1)])
    above = np.abs(va - vb[np.clip(pos, 0, len(vb) - 1)])
    return float(np.min(np.minimum(below, above)))

