from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from msalab.errors import ParameterError, PreconditionError, RegionError, ResonanceError
from msalab.estimates import (
    Proportion,
    bootstrap_slope,
    compare_to_target,
    linear_fit,
    mean_interval,
    wilson_interval,
)
from msalab.lattice import (
    Config,
    MultiParticleCube,
    exceptional_cubes,
    is_separable,
    iter_window,
    j_separable,
    sup_distance,
)
from msalab.model import (
    DisorderRealization,
    DisorderSpec,
    InteractionSpec,
    Interval,
    SiteBox,
    assemble,
    sample_disorder,
    spectrum_interval,
    window_probability,
)
from msalab.msa import (
    MsaParams,
    RecursionLedger,
    boundary_green_profile,
    cover_params,
    energy_interval_cover,
    is_cnr,
    m_star,
    one_particle_localized,
    recursion_step,
    resonant_energy_set,
    singular_subcubes,
    spectral_distance,
    verdict_from_spectrum,
)
from msalab.settings import max_dimension
from msalab.spectral import (
    RESONANCE_FLOOR,
    CubeSolver,
    SpectralData,
    combes_thomas_check,
    correlator_matrix,
    diagonalize,
    eigenvalue_clusters,
    pi_green_decomposition,
    resolvent,
    tensor_eigenpairs,
)

logger = logging.getLogger(__name__)

# eigenvector entries below this are numerical noise, not signal
NOISE_FLOOR = 1e-12

Curve = tuple[str, float, float]


# =========================
# Plans and reports
# =========================

@dataclass(frozen=True)
class TrialPlan:
    """
    Everything a probe needs to run its trials. Trial t samples its disorder from
    split(disorder.master_seed, t), so re-running a plan reproduces it bit for bit.
    """

    trials: int
    disorder: DisorderSpec
    interaction: InteractionSpec
    params: MsaParams
    energies: tuple[float, ...] = ()
    energy_step: Optional[float] = None
    workers: int = 1
    cnr_stride: int = 1
    scan_stride: int = 1
    cap: Optional[int] = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ParameterError(f"trials must be >= 1, got {self.trials}")
        if self.cnr_stride < 1 or self.scan_stride < 1:
            raise ParameterError("Scan strides must be >= 1")

    @property
    def master_seed(self) -> int:
        return self.disorder.master_seed

    @property
    def dimension_cap(self) -> int:
        return self.cap if self.cap is not None else max_dimension()

    def interaction_bound(self, n: Optional[int] = None) -> float:
        """Upper bound on ||U|| for n particles: every pair contributes at most max |Phi|."""
        n = self.params.N if n is None else n
        return n * (n - 1) / 2.0 * max(abs(v) for v in self.interaction.phi)

    def spectrum(self) -> Interval:
        """The interval I containing every restricted spectrum up to N particles."""
        return spectrum_interval(
            self.params.N,
            self.params.d,
            self.disorder.support_bound,
            self.interaction.h,
            self.interaction_bound(),
        )

    def energy_list(self) -> tuple[float, ...]:
        return self.energies or self.spectrum().interior_points(5)

    def reference_energy(self) -> float:
        energies = self.energy_list()
        return energies[len(energies) // 2]


@dataclass(frozen=True)
class EstimateReport:
    probe: str
    estimate: float
    ci_lo: float
    ci_hi: float
    trials: int
    seed: int
    L: Optional[int] = None
    n: Optional[int] = None
    h: float = 0.0
    energy: str = ""
    details: dict = field(default_factory=dict)

    @classmethod
    def proportion(cls, probe: str, successes: int, trials: int, seed: int, **kwargs: Any) -> "EstimateReport":
        lo, hi = wilson_interval(successes, trials)
        details = dict(kwargs.pop("details", {}))
        details["successes"] = successes
        return cls(
            probe=probe,
            estimate=successes / trials if trials else 0.0,
            ci_lo=lo,
            ci_hi=hi,
            trials=trials,
            seed=seed,
            details=details,
            **kwargs,
        )

    def summary_row(self) -> dict:
        return {
            "probe": self.probe,
            "L": "" if self.L is None else self.L,
            "n": "" if self.n is None else self.n,
            "h": self.h,
            "E_or_grid": self.energy,
            "estimate": self.estimate,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "trials": self.trials,
            "seed": self.seed,
        }


@dataclass
class ProbeResult:
    probe: str
    reports: list[EstimateReport] = field(default_factory=list)
    trial_records: list[dict] = field(default_factory=list)
    curves: list[Curve] = field(default_factory=list)
    ledger: Optional[RecursionLedger] = None
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def fail(self, message: str) -> None:
        logger.error("Hard assertion failed: probe=%s %s", self.probe, message)
        self.failures.append(message)


def energy_label(energy: float) -> str:
    return f"{energy:.6g}"


def grid_label(interval: Interval, step: float) -> str:
    return f"grid[{interval.lo:.6g},{interval.hi:.6g}]/{step:.3g}"


def interval_label(interval: Interval) -> str:
    return f"[{interval.lo:.6g},{interval.hi:.6g}]"


def map_trials(fn: Callable[[int], dict], trials: Iterable[int], workers: int = 1) -> list[dict]:
    """Apply fn to every trial index; results come back in trial order whatever the worker count."""
    items = list(trials)
    if workers <= 1 or len(items) < 2:
        return [fn(t) for t in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def origin_cube(n: int, d: int, L: int) -> MultiParticleCube:
    return MultiParticleCube.equal(Config.origin(n, d), L)


def _sample(plan: TrialPlan, cubes: Sequence[MultiParticleCube], trial: int) -> DisorderRealization:
    return sample_disorder(plan.disorder, SiteBox.covering(cubes), trial)


def _solver(plan: TrialPlan, cubes: Sequence[MultiParticleCube], trial: int,
            interaction: Optional[InteractionSpec] = None) -> CubeSolver:
    realization = _sample(plan, cubes, trial)
    return CubeSolver(realization, interaction or plan.interaction, plan.dimension_cap)


def _shifted_far(x: Config, L: int, N: int) -> Config:
    """x moved along the first axis far enough for the pair (C_L(x), C_L(y)) to be separable."""
    offset = (7 * N * L + 2 * L + 1,) + (0,) * (x.d - 1)
    return x.shifted(offset)


def _finish(result: ProbeResult, started: float) -> ProbeResult:
    logger.info(
        "Probe finished: probe=%s reports=%s failures=%s elapsed=%.2fs",
        result.probe, len(result.reports), len(result.failures), time.perf_counter() - started,
    )
    return result


# =========================
# Deterministic checks
# =========================

def _ct_trial(trial: int, plan: TrialPlan, L: int, n: int, etas: tuple[float, ...]) -> dict:
    cube = origin_cube(n, plan.params.d, L)
    spec = _solver(plan, [cube], trial).spectrum(cube)
    values = spec.eigenvalues
    energies = [values[0] - eta for eta in etas] + [values[-1] + eta for eta in etas]
    if len(values) > 1:
        j = int(np.argmax(np.diff(values)))
        half = (values[j + 1] - values[j]) / 2.0
        if RESONANCE_FLOOR < half <= 1.0:
            energies.append(values[j] + half)
    worst, worst_energy = 0.0, energies[0]
    for energy in energies:
        ratio = combes_thomas_check(spec, energy).max_violation_ratio
        if ratio > worst:
            worst, worst_energy = ratio, energy
    return {"trial": trial, "L": L, "n": n, "max_ratio": worst, "worst_energy": float(worst_energy)}


def combes_thomas_probe(
        plan: TrialPlan,
        L: int,
        n: int = 1,
        etas: tuple[float, ...] = (0.25, 0.5, 1.0),
) -> ProbeResult:
    """
    Combes-Thomas bound on random cubes: energies at distance eta in (0, 1] outside
    the spectrum and in the widest internal gap. Any ratio above 1 is a failure.
    """
    started = time.perf_counter()
    result = ProbeResult(probe="ct-check")
    records = map_trials(partial(_ct_trial, plan=plan, L=L, n=n, etas=etas), range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    ratios = np.asarray([r["max_ratio"] for r in records])
    violations = int(np.count_nonzero(ratios > 1.0))
    if violations:
        result.fail(f"{violations} Combes-Thomas violations, max ratio {ratios.max():.6g}")
    worst = float(ratios.max())
    result.reports.append(EstimateReport(
        probe="ct-check",
        estimate=worst,
        ci_lo=worst,
        ci_hi=worst,
        trials=plan.trials,
        seed=plan.master_seed,
        L=L,
        n=n,
        h=plan.interaction.h,
        energy="eta=" + ",".join(f"{e:g}" for e in etas),
        details={"max_violation_ratio": worst, "violations": violations},
    ))
    return _finish(result, started)


def _tensor_trial(trial: int, plan: TrialPlan, L: int, n: int) -> dict:
    cube = origin_cube(n, plan.params.d, L)
    free = plan.interaction.with_amplitude(0.0)
    solver = _solver(plan, [cube], trial, free)
    full = diagonalize(solver.hamiltonian(cube), cap=plan.dimension_cap)
    parts = [solver.one_particle(p, L) for p in cube.center.coords]
    product = tensor_eigenpairs(parts, cube=cube, cap=plan.dimension_cap)
    value_err = float(np.max(np.abs(full.eigenvalues - product.eigenvalues)))
    projector_err = 0.0
    for idx in eigenvalue_clusters(full.eigenvalues):
        a = full.eigenvectors[:, idx]
        b = product.eigenvectors[:, idx]
        projector_err = max(projector_err, float(np.max(np.abs(a @ a.T - b @ b.T))))
    return {"trial": trial, "eigenvalue_error": value_err, "projector_error": projector_err}


def tensor_equivalence_probe(plan: TrialPlan, L: int, n: int = 2) -> ProbeResult:
    """h = 0: tensor-product eigenpairs against a full eigensolve of the product cube."""
    started = time.perf_counter()
    result = ProbeResult(probe="tensor")
    records = map_trials(partial(_tensor_trial, plan=plan, L=L, n=n), range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    value_err = max(r["eigenvalue_error"] for r in records)
    projector_err = max(r["projector_error"] for r in records)
    if value_err > 1e-10:
        result.fail(f"eigenvalue mismatch {value_err:.3e} > 1e-10")
    if projector_err > 1e-8:
        result.fail(f"spectral projector mismatch {projector_err:.3e} > 1e-8")
    result.reports.append(EstimateReport(
        probe="tensor",
        estimate=value_err,
        ci_lo=value_err,
        ci_hi=value_err,
        trials=plan.trials,
        seed=plan.master_seed,
        L=L,
        n=n,
        h=0.0,
        details={"projector_error": projector_err},
    ))
    return _finish(result, started)


def pi_cube(n: int, d: int, L: int, r0: int, separation: Optional[int] = None) -> MultiParticleCube:
    """Particles on the first axis, spaced so neighbouring boxes are r0 + 2 apart by default."""
    step = 2 * L + r0 + 2 if separation is None else separation
    return MultiParticleCube.equal(Config.of(*((i * step,) + (0,) * (d - 1) for i in range(n))), L)


def _pi_trial(trial: int, plan: TrialPlan, L: int, n: int, separation: Optional[int]) -> dict:
    cube = pi_cube(n, plan.params.d, L, plan.interaction.r0, separation)
    realization = _sample(plan, [cube], trial)
    H = assemble(cube, realization, plan.interaction, plan.dimension_cap)
    worst, checked, skipped = 0.0, 0, 0
    for energy in plan.energy_list():
        try:
            report = pi_green_decomposition(H, realization, plan.interaction, energy)
        except ResonanceError:
            skipped += 1
            continue
        checked += 1
        worst = max(worst, report.max_relative_error)
    return {"trial": trial, "max_relative_error": worst, "energies": checked, "skipped": skipped}


def pi_decomposition_probe(plan: TrialPlan, L: int, n: int = 2, separation: Optional[int] = None) -> ProbeResult:
    """Both factor-wise reconstructions of G(u, .; E) on PI cubes against the direct resolvent."""
    started = time.perf_counter()
    result = ProbeResult(probe="pi-green")
    records = map_trials(partial(_pi_trial, plan=plan, L=L, n=n, separation=separation),
                         range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    worst = max(r["max_relative_error"] for r in records)
    if worst > 1e-8:
        result.fail(f"PI decomposition relative error {worst:.3e} > 1e-8")
    result.reports.append(EstimateReport(
        probe="pi-green",
        estimate=worst,
        ci_lo=worst,
        ci_hi=worst,
        trials=plan.trials,
        seed=plan.master_seed,
        L=L,
        n=n,
        h=plan.interaction.h,
        energy=",".join(energy_label(e) for e in plan.energy_list()),
        details={"skipped": sum(r["skipped"] for r in records)},
    ))
    return _finish(result, started)


@dataclass(frozen=True)
class SeparabilityScan:
    checked_far: int
    counterexamples_far: tuple[Config, ...]
    checked_distant: int
    counterexamples_distant: tuple[Config, ...]

    @property
    def clean(self) -> bool:
        return not self.counterexamples_far and not self.counterexamples_distant


def separability_scan(
        N: int,
        L: int,
        radius: int = 60,
        x: Optional[Config] = None,
        n: int = 2,
        d: int = 1,
) -> SeparabilityScan:
    """
    Exhaustive window scan around x:
    - every y with |y - x| > 7NL outside the exceptional cubes forms a separable pair;
    - every y with |y - x| > max_ij |x_i - x_j| + 5NL has C_L(y) J-separable from C_L(x).
    """
    x = x if x is not None else Config(tuple((3 * i,) + (0,) * (d - 1) for i in range(n)))
    cubes = exceptional_cubes(x, L)
    diameter = max(sup_distance(x.particles((i,)), x.particles((j,))) for i in range(x.n) for j in range(x.n))

    far, bad_far, distant, bad_distant = 0, [], 0, []
    for y in iter_window(x, radius):
        dist = sup_distance(x, y)
        if dist > 7 * N * L and not any(c.contains(y) for c in cubes):
            far += 1
            if not is_separable(x, y, L, N).separable:
                bad_far.append(y)
        if dist > diameter + 5 * N * L:
            distant += 1
            if j_separable(y, x, L) is None:
                bad_distant.append(y)
    return SeparabilityScan(far, tuple(bad_far), distant, tuple(bad_distant))


def separability_probe(plan: TrialPlan, L: int, radius: int = 60) -> ProbeResult:
    started = time.perf_counter()
    result = ProbeResult(probe="separability")
    scan = separability_scan(plan.params.N, L, radius, n=plan.params.n, d=plan.params.d)
    for label, checked, bad in (
            ("separability-far", scan.checked_far, scan.counterexamples_far),
            ("separability-distant", scan.checked_distant, scan.counterexamples_distant),
    ):
        if bad:
            result.fail(f"{label}: {len(bad)} counterexamples, first {bad[0].coords}")
        result.reports.append(EstimateReport.proportion(
            label, len(bad), checked, plan.master_seed, L=L, n=plan.params.n,
            energy=f"radius={radius}",
        ))
    return _finish(result, started)


# =========================
# Wegner
# =========================

def _wegner_trial(
        trial: int,
        plan: TrialPlan,
        L: int,
        n: int,
        energies: tuple[float, ...],
        check_cnr: bool,
        pair: bool,
) -> dict:
    params = plan.params
    x = origin_cube(n, params.d, L)
    solver = _solver(plan, [x], trial)
    values = solver.eigenvalues(x)
    width = params.resonance_threshold(L)
    record: dict = {
        "trial": trial,
        "L": L,
        "eta": [float(np.min(np.abs(values - e))) for e in energies],
    }
    record["resonant"] = [eta <= width for eta in record["eta"]]
    scannable = L ** (1.0 / params.alpha) >= 2.0 - 1e-9
    if check_cnr and scannable:
        rset = resonant_energy_set(x, params, solver, plan.cnr_stride)
        record["not_cnr"] = [rset.contains(e) for e in energies]
        if pair:
            y = MultiParticleCube.equal(_shifted_far(x.center, L, params.N), L)
            other = _solver(plan, [y], trial)
            rset_y = resonant_energy_set(y, params, other, plan.cnr_stride)
            record["pair"] = not rset.intersect(rset_y).clip(plan.spectrum()).is_empty
    return record


def wegner_probe(
        plan: TrialPlan,
        scales: Sequence[int],
        n: int = 1,
        check_cnr: bool = True,
        pair: bool = False,
) -> ProbeResult:
    """
    P(E-R) and P(not E-CNR) per scale and energy, the slope of log P(E-R) against
    sqrt(L) with a bootstrap interval, and optionally the pair event "some E in I
    makes neither of two separable cubes E-CNR".
    """
    started = time.perf_counter()
    result = ProbeResult(probe="wegner")
    energies = plan.energy_list()
    if pair:
        x = Config.origin(n, plan.params.d)
        for L in scales:
            if not is_separable(x, _shifted_far(x, L, plan.params.N), L, plan.params.N).separable:
                raise PreconditionError(f"Pair cubes at L={L} are not separable")

    resonant_counts: dict[float, list[int]] = {e: [] for e in energies}
    for L in scales:
        records = map_trials(
            partial(_wegner_trial, plan=plan, L=L, n=n, energies=energies, check_cnr=check_cnr, pair=pair),
            range(plan.trials),
            plan.workers,
        )
        result.trial_records.extend(records)
        for j, energy in enumerate(energies):
            hits = sum(r["resonant"][j] for r in records)
            resonant_counts[energy].append(hits)
            report = EstimateReport.proportion(
                "wegner-R", hits, plan.trials, plan.master_seed,
                L=L, n=n, h=plan.interaction.h, energy=energy_label(energy),
            )
            result.reports.append(report)
            result.curves.append((f"P_R E={energy_label(energy)}", float(L), report.estimate))
            if "not_cnr" in records[0]:
                misses = sum(r["not_cnr"][j] for r in records)
                result.reports.append(EstimateReport.proportion(
                    "wegner-CNR", misses, plan.trials, plan.master_seed,
                    L=L, n=n, h=plan.interaction.h, energy=energy_label(energy),
                ))
        if pair and "pair" in records[0]:
            result.reports.append(EstimateReport.proportion(
                "wegner-pair", sum(r["pair"] for r in records), plan.trials, plan.master_seed,
                L=L, n=n, h=plan.interaction.h, energy=interval_label(plan.spectrum()),
            ))

    if len(scales) >= 2:
        roots = [math.sqrt(L) for L in scales]
        for energy in energies:
            fit = bootstrap_slope(resonant_counts[energy], [plan.trials] * len(scales), roots, seed=plan.master_seed)
            result.reports.append(EstimateReport(
                probe="wegner-slope",
                estimate=fit.slope,
                ci_lo=fit.ci[0],
                ci_hi=fit.ci[1],
                trials=plan.trials,
                seed=plan.master_seed,
                n=n,
                h=plan.interaction.h,
                energy=energy_label(energy),
                details={"decreasing": fit.ci[1] < 0, "resamples": fit.resamples},
            ))
    return _finish(result, started)


def single_site_resonance(
        plan: TrialPlan,
        energy: Optional[float] = None,
        eps: Optional[float] = None,
) -> EstimateReport:
    """
    One-site cube H = 2d + V(0): resonance |H - E| <= eps happens exactly when V(0)
    falls in [E - 2d - eps, E - 2d + eps], whose probability is computed directly
    from the single-site law and compared with the Monte Carlo rate.
    """
    d = plan.params.d
    energy = 2.0 * d if energy is None else energy
    eps = plan.params.resonance_threshold(0) if eps is None else eps
    box = SiteBox((0,) * d, (0,) * d)
    hits = 0
    for trial in range(plan.trials):
        value = float(sample_disorder(plan.disorder, box, trial).values.ravel()[0])
        hits += abs(2.0 * d + value - energy) <= eps
    exact = float(window_probability(plan.disorder, energy - 2.0 * d - eps, energy - 2.0 * d + eps))
    report = EstimateReport.proportion(
        "wegner-1x1", int(hits), plan.trials, plan.master_seed,
        L=0, n=1, energy=energy_label(energy),
        details={"exact": exact, "eps": eps},
    )
    within = report.ci_lo <= exact <= report.ci_hi
    report.details["within_ci"] = within
    if not within:
        logger.warning("Single-site resonance outside Wilson interval: exact=%s ci=(%s, %s)",
                       exact, report.ci_lo, report.ci_hi)
    return report


# =========================
# Initial scale
# =========================

def _initial_trial(trial: int, plan: TrialPlan, params: MsaParams, L0: int, n: int,
                   interaction: InteractionSpec, energies: tuple[float, ...]) -> dict:
    cube = origin_cube(n, params.d, L0)
    solver = _solver(plan, [cube], trial, interaction)
    spec = solver.spectrum(cube)
    singular = [not verdict_from_spectrum(spec, e, params, interaction.h).ns for e in energies]
    points = sorted(set(cube.center.coords))
    localized = all(one_particle_localized(solver.one_particle(p, L0), L0, params.m, n, params.N) for p in points)
    return {"trial": trial, "singular": singular, "one_particle_localized": localized}


def initial_scale_probe(
        plan: TrialPlan,
        n: Optional[int] = None,
        L0: Optional[int] = None,
        h: Optional[float] = None,
        mu_tilde: Optional[float] = None,
) -> ProbeResult:
    """
    Singularity probability of C_{L0} at m = m*, against L0^{-2p 4^{N-n}}. mu_tilde
    (from the correlator probe) enters m* through its second branch.
    """
    started = time.perf_counter()
    result = ProbeResult(probe="initial")
    n = plan.params.n if n is None else n
    L0 = plan.params.L0 if L0 is None else L0
    interaction = plan.interaction if h is None else plan.interaction.with_amplitude(h)
    m = m_star(plan.params.N, plan.params.d, math.inf if mu_tilde is None else mu_tilde)
    params = replace(plan.params, m=m, n=n, enforce_strict=False)
    energies = plan.energy_list()
    records = map_trials(
        partial(_initial_trial, plan=plan, params=params, L0=L0, n=n, interaction=interaction, energies=energies),
        range(plan.trials),
        plan.workers,
    )
    result.trial_records.extend(records)
    target = float(L0) ** (-2.0 * plan.params.p * 4 ** (plan.params.N - n))
    for j, energy in enumerate(energies):
        hits = sum(r["singular"][j] for r in records)
        report = EstimateReport.proportion(
            "initial", hits, plan.trials, plan.master_seed,
            L=L0, n=n, h=interaction.h, energy=energy_label(energy),
            details={"m": m, "target": target},
        )
        report.details["verdict"] = compare_to_target(report.ci_lo, target, plan.trials)
        result.reports.append(report)
    delocalized = sum(not r["one_particle_localized"] for r in records)
    result.reports.append(EstimateReport.proportion(
        "initial-1p", delocalized, plan.trials, plan.master_seed,
        L=L0, n=n, h=interaction.h, details={"m": m},
    ))
    return _finish(result, started)


# =========================
# Weak interaction
# =========================

@dataclass(frozen=True)
class SecondResolventReport:
    h: float
    energy: float
    drift: float
    bound: float
    eta0: float
    eta_h: float

    @property
    def holds(self) -> bool:
        return self.drift <= self.bound * (1.0 + 1e-9) + 1e-12

    @property
    def ratio(self) -> float:
        if self.bound == 0.0:
            return 0.0 if self.drift <= 1e-12 else math.inf
        return self.drift / self.bound


def second_resolvent_check(
        H0: np.ndarray,
        U: np.ndarray,
        h: float,
        energy: float,
        spec0: Optional[SpectralData] = None,
        spec_h: Optional[SpectralData] = None,
) -> SecondResolventReport:
    """
    ||G_0(E) - G_h(E)|| against |h| ||U|| ||G_0(E)|| ||G_h(E)|| for H_h = H_0 + h diag(U).
    spec0 / spec_h are eigenpairs of H_0 / H_h when the caller already has them.

    Raises:
        ResonanceError: E on the spectrum of H_0 or H_h
    """
    H0 = np.atleast_2d(np.asarray(H0, dtype=float))
    U = np.asarray(U, dtype=float).ravel()
    if spec0 is None:
        spec0 = diagonalize(H0)
    if spec_h is None:
        spec_h = diagonalize(H0 + h * np.diag(U))
    g0 = resolvent(spec0, energy)
    gh = resolvent(spec_h, energy)
    drift = float(linalg.norm(g0.matrix - gh.matrix, 2))
    u_norm = float(np.max(np.abs(U))) if U.size else 0.0
    bound = abs(h) * u_norm * g0.norm * gh.norm
    return SecondResolventReport(h=float(h), energy=float(energy), drift=drift, bound=bound,
                                 eta0=g0.eta, eta_h=gh.eta)


def _stability_trial(trial: int, plan: TrialPlan, L: int, n: int, hs: tuple[float, ...],
                     energies: tuple[float, ...]) -> dict:
    cube = origin_cube(n, plan.params.d, L)
    realization = _sample(plan, [cube], trial)
    H0 = assemble(cube, realization, plan.interaction.with_amplitude(0.0), plan.dimension_cap)
    spec0 = diagonalize(H0.matrix, cube=cube, cap=plan.dimension_cap)
    record: dict = {"trial": trial, "singular": [], "max_ratio": [], "violations": [], "resonant": []}
    for h in hs:
        spec = spec0 if h == 0.0 else diagonalize(H0.matrix + h * np.diag(H0.interaction), cube=cube,
                                                  cap=plan.dimension_cap)
        record["singular"].append([not verdict_from_spectrum(spec, e, plan.params, h).ns for e in energies])
        worst, violations, resonant = 0.0, 0, 0
        for energy in energies:
            try:
                check = second_resolvent_check(H0.matrix, H0.interaction, h, energy, spec0=spec0, spec_h=spec)
            except ResonanceError:
                resonant += 1
                continue
            worst = max(worst, check.ratio)
            violations += not check.holds
        record["max_ratio"].append(worst)
        record["violations"].append(violations)
        record["resonant"].append(resonant)
    return record


def empirical_h_star(hs: Sequence[float], rates: Sequence[float], trials: int) -> float:
    """
    Largest |h| up to which the singularity rate stays within max(2 P_S(0), 1/trials).
    Amplitudes are walked in increasing |h|; the first one above the threshold ends the walk.
    """
    base = next(r for h, r in zip(hs, rates) if h == 0.0)
    allowed = max(2.0 * base, 1.0 / trials)
    h_star = 0.0
    for h, rate in sorted(zip(hs, rates), key=lambda pair: abs(pair[0])):
        if rate > allowed:
            break
        h_star = abs(h)
    return h_star


def weak_interaction_stability(
        plan: TrialPlan,
        h_list: Sequence[float],
        L: Optional[int] = None,
        n: Optional[int] = None,
) -> ProbeResult:
    """
    Coupled sampling over h: the same V for every amplitude. Checks the second
    resolvent inequality on every trial (hard) and estimates P_S(h) and h*.
    """
    started = time.perf_counter()
    result = ProbeResult(probe="stability")
    L = plan.params.L0 if L is None else L
    n = plan.params.n if n is None else n
    hs = tuple(sorted({0.0, *(float(h) for h in h_list)}, key=abs))
    energies = plan.energy_list()
    records = map_trials(partial(_stability_trial, plan=plan, L=L, n=n, hs=hs, energies=energies),
                         range(plan.trials), plan.workers)
    result.trial_records.extend(records)

    rates = []
    for i, h in enumerate(hs):
        hits = sum(any(r["singular"][i]) for r in records)
        report = EstimateReport.proportion(
            "stability-S", hits, plan.trials, plan.master_seed,
            L=L, n=n, h=h, energy=",".join(energy_label(e) for e in energies),
        )
        rates.append(report.estimate)
        result.reports.append(report)
        result.curves.append(("P_S", h, report.estimate))
        violations = sum(r["violations"][i] for r in records)
        worst = max(r["max_ratio"][i] for r in records)
        if violations:
            result.fail(f"second resolvent inequality violated {violations} times at h={h}")
        result.reports.append(EstimateReport(
            probe="stability-drift",
            estimate=worst,
            ci_lo=worst,
            ci_hi=worst,
            trials=plan.trials,
            seed=plan.master_seed,
            L=L,
            n=n,
            h=h,
            details={"violations": violations, "resonant": sum(r["resonant"][i] for r in records)},
        ))
    h_star = empirical_h_star(hs, rates, plan.trials)
    result.reports.append(EstimateReport(
        probe="stability-hstar",
        estimate=h_star,
        ci_lo=h_star,
        ci_hi=h_star,
        trials=plan.trials,
        seed=plan.master_seed,
        L=L,
        n=n,
    ))
    return _finish(result, started)


# =========================
# Variable energy
# =========================

def _pair_trial(trial: int, plan: TrialPlan, x: MultiParticleCube, y: MultiParticleCube, k: int,
                energies: np.ndarray) -> dict:
    params = plan.params
    cp = cover_params(x.L, params.p_k(k), params.N, params.d)
    spec_x = _solver(plan, [x], trial).spectrum(x)
    spec_y = _solver(plan, [y], trial).spectrum(y)
    fx = boundary_green_profile(spec_x, x, energies)
    fy = boundary_green_profile(spec_y, y, energies)
    both = np.minimum(fx, fy) >= 2.0 * cp.a
    return {
        "trial": trial,
        "event": bool(np.any(both)),
        "bad_energies": int(np.count_nonzero(both)),
        "spectra_close": spectral_distance(spec_x, spec_y) <= 4.0 * cp.c,
    }


def pair_singularity_probe(
        plan: TrialPlan,
        L_k: Optional[int] = None,
        k: int = 0,
        n: Optional[int] = None,
        grid_step: Optional[float] = None,
        x: Optional[Config] = None,
        y: Optional[Config] = None,
) -> ProbeResult:
    """
    P(some grid energy of I has min(F_x(E), F_y(E)) >= 2 a(L_k)) for a separable
    pair of cubes.

    Raises:
        PreconditionError: the pair is not separable
        ParameterError: grid_step > b(L_k) / 4
    """
    started = time.perf_counter()
    result = ProbeResult(probe="pair")
    params = plan.params
    L_k = params.scale(k) if L_k is None else L_k
    n = params.n if n is None else n
    x = x if x is not None else Config.origin(n, params.d)
    y = y if y is not None else _shifted_far(x, L_k, params.N)
    verdict = is_separable(x, y, L_k, params.N)
    if not verdict.separable:
        raise PreconditionError(f"Cubes at {x.coords} and {y.coords} are not separable at L={L_k}")
    cp = cover_params(L_k, params.p_k(k), params.N, params.d)
    step = cp.b / 4.0 if grid_step is None else grid_step
    if step > cp.b / 4.0:
        raise ParameterError(f"grid_step {step:.3e} must be <= b/4 = {cp.b / 4.0:.3e}")
    interval = plan.spectrum()
    energies = interval.grid(step)
    cx, cy = MultiParticleCube.equal(x, L_k), MultiParticleCube.equal(y, L_k)
    records = map_trials(partial(_pair_trial, plan=plan, x=cx, y=cy, k=k, energies=energies),
                         range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    report = EstimateReport.proportion(
        "pair", sum(r["event"] for r in records), plan.trials, plan.master_seed,
        L=L_k, n=n, h=plan.interaction.h, energy=grid_label(interval, step),
        details={"two_a": 2.0 * cp.a, "c": cp.c, "spectra_close": sum(r["spectra_close"] for r in records)},
    )
    result.reports.append(report)
    return _finish(result, started)


def _cover_trial(trial: int, plan: TrialPlan, L: int, n: int, k: int, step: float) -> dict:
    cube = origin_cube(n, plan.params.d, L)
    spec = _solver(plan, [cube], trial).spectrum(cube)
    report = energy_interval_cover(spec, plan.params, k, plan.spectrum(), step)
    return {
        "trial": trial,
        "bad": int(report.bad.size),
        "uncovered": int(report.uncovered.size),
        "exceptional": report.exceptional,
        "measure_above_a": report.measure_above_a,
        "condition_ok": report.condition_ok,
    }


def cover_probe(
        plan: TrialPlan,
        L: Optional[int] = None,
        k: int = 0,
        n: Optional[int] = None,
        grid_step: Optional[float] = None,
) -> ProbeResult:
    """Every bad energy (F >= 2a) of a non-exceptional realization lies within 2c of the spectrum."""
    started = time.perf_counter()
    result = ProbeResult(probe="cover")
    L = plan.params.scale(k) if L is None else L
    n = plan.params.n if n is None else n
    cp = cover_params(L, plan.params.p_k(k), plan.params.N, plan.params.d)
    step = cp.b / 4.0 if grid_step is None else grid_step
    records = map_trials(partial(_cover_trial, plan=plan, L=L, n=n, k=k, step=step),
                         range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    broken = [r["trial"] for r in records if r["uncovered"] and not r["exceptional"]]
    if broken:
        result.fail(f"uncovered bad energies on non-exceptional trials {broken[:10]}")
    result.reports.append(EstimateReport.proportion(
        "cover", sum(bool(r["uncovered"]) for r in records), plan.trials, plan.master_seed,
        L=L, n=n, h=plan.interaction.h, energy=grid_label(plan.spectrum(), step),
        details={
            "a": cp.a, "b": cp.b, "c": cp.c,
            "exceptional": sum(r["exceptional"] for r in records),
            "condition_ok": all(r["condition_ok"] for r in records),
        },
    ))
    return _finish(result, started)


# =========================
# Recursion
# =========================

def _recursion_trial(trial: int, plan: TrialPlan, L_k: int, L_next: int, energy: float) -> dict:
    params = plan.params
    small = origin_cube(params.n, params.d, L_k)
    big = origin_cube(params.n, params.d, L_next)
    solver = _solver(plan, [big], trial)
    h = plan.interaction.h
    singular_k = not verdict_from_spectrum(solver.spectrum(small), energy, params, h).ns
    singular_next = not verdict_from_spectrum(solver.spectrum(big), energy, params, h).ns
    not_cnr = not is_cnr(big, energy, params, solver, plan.cnr_stride).cnr
    pi_singular, _ = singular_subcubes(big, energy, params, L_k, solver, plan.scan_stride,
                                       kinds=("PI",), first_only=True)
    return {
        "trial": trial,
        "L_k": L_k,
        "L_next": L_next,
        "P_k": singular_k,
        "P_next": singular_next,
        "Q_next": not_cnr,
        "S_next": bool(pi_singular),
    }


def recursion_probe(plan: TrialPlan, scales: int = 2, energy: Optional[float] = None) -> ProbeResult:
    """
    Empirical P_k, P_{k+1}, Q_{k+1}, S_{k+1} on consecutive scales, the recursion
    rhs built from them, and a reference row with P_k = 1e-3, Q = S = 1e-5.
    """
    started = time.perf_counter()
    result = ProbeResult(probe="recursion")
    if scales < 2:
        raise ParameterError(f"recursion needs at least two scales, got {scales}")
    params = plan.params
    energy = plan.reference_energy() if energy is None else energy
    ledger = recursion_step(RecursionLedger(), 0, params, 1e-3, 1e-5, 1e-5, source="reference")

    for k in range(scales - 1):
        L_k, L_next = params.scale(k), params.scale(k + 1)
        records = map_trials(partial(_recursion_trial, plan=plan, L_k=L_k, L_next=L_next, energy=energy),
                             range(plan.trials), plan.workers)
        result.trial_records.extend(records)
        counts = {key: Proportion(sum(r[key] for r in records), plan.trials)
                  for key in ("P_k", "P_next", "Q_next", "S_next")}
        for key, scale in (("P_k", L_k), ("P_next", L_next), ("Q_next", L_next), ("S_next", L_next)):
            report = EstimateReport.proportion(
                f"recursion-{key}", counts[key].successes, plan.trials, plan.master_seed,
                L=scale, n=params.n, h=plan.interaction.h, energy=energy_label(energy),
            )
            if key == "P_k":
                target = params.target(k)
                report.details.update(target=target, verdict=compare_to_target(report.ci_lo, target, plan.trials))
            result.reports.append(report)
        ledger = recursion_step(
            ledger, k, params,
            counts["P_k"].estimate, counts["Q_next"].estimate, counts["S_next"].estimate,
            P_next=counts["P_next"].estimate, P_next_ci_lo=counts["P_next"].ci[0],
        )
        if ledger.records[-1].holds is False:
            result.fail(f"empirical P_{k + 1} above the recursion bound at L={L_next}")
    result.ledger = ledger
    return _finish(result, started)


# =========================
# Localization profiles
# =========================

@dataclass(frozen=True, eq=False)
class DecayProfile:
    eigenvalue: float
    center: tuple[int, ...]
    radii: np.ndarray = field(repr=False)
    profile: np.ndarray = field(repr=False)
    rate: Optional[float]
    rate_ci: Optional[tuple[float, float]]
    log_power: Optional[tuple[float, float]]
    better: str
    localized: bool


def _log_power(r: np.ndarray, log_c: float, a: float, c: float) -> np.ndarray:
    return log_c - a * np.log(r) ** (1.0 + c)


def decay_profile(spec: SpectralData, j: int) -> DecayProfile:
    """
    r -> max_{|x - center| = r} |psi_j(x)| around the localization center, with a
    pure exponential and an exp(-a (ln r)^{1+c}) fit of its logarithm.
    """
    cube = spec.cube
    sites = cube.site_array()
    psi = np.abs(spec.eigenvectors[:, j])
    center = int(np.argmax(psi))
    r = np.max(np.abs(sites - sites[center]), axis=1)
    profile = np.zeros(int(r.max()) + 1)
    np.maximum.at(profile, r, psi)
    radii = np.arange(len(profile))

    tail = profile[max(1, 2 * len(profile) // 3):]
    localized = bool(tail.size) and bool(np.median(tail) < 1e-3 * profile[0])

    keep = (radii >= 1) & (profile > NOISE_FLOOR)
    rate = rate_ci = log_power = None
    better = "none"
    if np.count_nonzero(keep) >= 3:
        xr, ly = radii[keep].astype(float), np.log(profile[keep])
        fit = linear_fit(xr, ly)
        rate, rate_ci = -fit.slope, (-fit.slope_ci[1], -fit.slope_ci[0])
        sse_exp = float(np.sum((ly - (fit.intercept + fit.slope * xr)) ** 2))
        try:
            popt, _ = optimize.curve_fit(
                _log_power, xr, ly, p0=(ly[0], 1.0, 0.5),
                bounds=([-np.inf, 0.0, 0.0], [np.inf, np.inf, 5.0]),
            )
            log_power = (float(popt[1]), float(popt[2]))
            sse_log = float(np.sum((ly - _log_power(xr, *popt)) ** 2))
            better = "exponential" if sse_exp <= sse_log else "log-power"
        except RuntimeError:
            logger.warning("Log-power fit did not converge: eigenvalue=%s", spec.eigenvalues[j])
            better = "exponential"
    return DecayProfile(
        eigenvalue=float(spec.eigenvalues[j]),
        center=tuple(int(c) for c in sites[center]),
        radii=radii,
        profile=profile,
        rate=rate,
        rate_ci=rate_ci,
        log_power=log_power,
        better=better,
        localized=localized,
    )


def eigenfunction_decay_probe(
        realization: DisorderRealization,
        cube: MultiParticleCube,
        interval: Interval,
        interaction: Optional[InteractionSpec] = None,
) -> list[DecayProfile]:
    """Decay profile of every eigenfunction of the cube with eigenvalue in I."""
    if cube.n > 2:
        raise ParameterError(f"eigenfunction profiles are limited to n <= 2, got n={cube.n}")
    spec = diagonalize(assemble(cube, realization, interaction or InteractionSpec()))
    return [decay_profile(spec, j) for j in np.flatnonzero(interval.mask(spec.eigenvalues))]


def _eigdecay_trial(trial: int, plan: TrialPlan, L: int, n: int) -> dict:
    cube = origin_cube(n, plan.params.d, L)
    realization = _sample(plan, [cube], trial)
    profiles = eigenfunction_decay_probe(realization, cube, plan.spectrum(), plan.interaction)
    rates = [p.rate for p in profiles if p.rate is not None]
    width = L + 1
    mean_profile = np.zeros(width)
    for p in profiles:
        head = p.profile[:width]
        mean_profile[:len(head)] += head / len(profiles)
    return {
        "trial": trial,
        "eigenfunctions": len(profiles),
        "localized": sum(p.localized for p in profiles),
        "exponential_better": sum(p.better == "exponential" for p in profiles),
        "mean_rate": float(np.mean(rates)) if rates else None,
        "mean_profile": mean_profile.tolist(),
    }


def eigdecay_probe(plan: TrialPlan, L: int, n: int = 1) -> ProbeResult:
    started = time.perf_counter()
    result = ProbeResult(probe="eigdecay")
    records = map_trials(partial(_eigdecay_trial, plan=plan, L=L, n=n), range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    total = sum(r["eigenfunctions"] for r in records)
    result.reports.append(EstimateReport.proportion(
        "eigdecay", sum(r["localized"] for r in records), total, plan.master_seed,
        L=L, n=n, h=plan.interaction.h,
        details={"exponential_better": sum(r["exponential_better"] for r in records)},
    ))
    profile = np.mean([r["mean_profile"] for r in records], axis=0)
    result.curves.extend(("profile", float(r), float(v)) for r, v in enumerate(profile))
    return _finish(result, started)


# =========================
# Correlators and moments
# =========================

def _correlator_trial(trial: int, plan: TrialPlan, L: int, interval: Interval, distances: tuple[int, ...]) -> dict:
    cube = origin_cube(1, 1, L)
    spec = _solver(plan, [cube], trial).spectrum(cube)
    center = cube.index_of(cube.center)
    cols = [cube.index_of(Config.of(r)) for r in distances]
    row = correlator_matrix(spec, interval, rows=[center], cols=cols)[0]
    return {"trial": trial, "upsilon": row.tolist()}


@dataclass(frozen=True)
class CorrelatorDecay:
    mu_tilde: float
    ci: tuple[float, float]
    r_squared: float
    points: int
    localized: bool


def fit_correlator_decay(distances: Sequence[int], means: Sequence[float]) -> Optional[CorrelatorDecay]:
    """Log-linear fit of E[Upsilon(0, r)] over the points above the noise floor."""
    r = np.asarray(distances, dtype=float)
    y = np.asarray(means, dtype=float)
    keep = y > NOISE_FLOOR
    if np.count_nonzero(keep) < 3:
        return None
    fit = linear_fit(r[keep], np.log(y[keep]))
    ci = (-fit.slope_ci[1], -fit.slope_ci[0])
    return CorrelatorDecay(
        mu_tilde=-fit.slope,
        ci=ci,
        r_squared=fit.r_squared,
        points=fit.points,
        localized=ci[0] > 0 and fit.r_squared >= 0.9,
    )


def correlator_decay_probe(
        plan: TrialPlan,
        L: int,
        interval: Optional[Interval] = None,
        distances: Optional[Sequence[int]] = None,
) -> ProbeResult:
    """
    E[Upsilon(0, r, I)] on a one-particle chain for r = 2, 4, ..., and the decay rate
    mu_tilde from a log-linear fit.

    Raises:
        PreconditionError: d != 1
    """
    started = time.perf_counter()
    result = ProbeResult(probe="correlator")
    if plan.params.d != 1:
        raise PreconditionError(f"correlator decay runs on a one-particle chain (d=1), got d={plan.params.d}")
    interval = interval or plan.spectrum()
    distances = tuple(distances or range(2, L + 1, 2))
    records = map_trials(partial(_correlator_trial, plan=plan, L=L, interval=interval, distances=distances),
                         range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    means = np.mean([r["upsilon"] for r in records], axis=0)
    result.curves.extend(("upsilon", float(r), float(v)) for r, v in zip(distances, means))
    decay = fit_correlator_decay(distances, means)
    if decay is None:
        logger.warning("Correlator fit skipped: fewer than three points above the noise floor")
        nan = float("nan")
        result.reports.append(EstimateReport("correlator", nan, nan, nan, plan.trials, plan.master_seed,
                                             L=L, n=1, energy=interval_label(interval)))
    else:
        result.reports.append(EstimateReport(
            probe="correlator",
            estimate=decay.mu_tilde,
            ci_lo=decay.ci[0],
            ci_hi=decay.ci[1],
            trials=plan.trials,
            seed=plan.master_seed,
            L=L,
            n=1,
            energy=interval_label(interval),
            details={"r_squared": decay.r_squared, "localized": decay.localized, "points": decay.points},
        ))
    return _finish(result, started)


def moment_from_spectrum(
        spec: SpectralData,
        region: Sequence[Config],
        interval: Interval,
        s: float,
) -> float:
    """
    sum_{x in cube} sum_{y in K} |x|^s Upsilon(x, y, I)^2, the finite-volume
    supremum over |f| <= 1 of || |X|^{s/2} f(H) P_I 1_K ||_HS^2.

    Raises:
        RegionError: some y in K is outside the cube
    """
    cube = spec.cube
    outside = [y for y in region if not cube.contains(y)]
    if outside:
        raise RegionError(f"Region sites {[y.coords for y in outside]} lie outside the cube")
    cols = [cube.index_of(y) for y in region]
    upsilon = correlator_matrix(spec, interval, cols=cols)
    weights = np.max(np.abs(cube.site_array()), axis=1).astype(float) ** s
    return float(np.sum(weights[:, None] * upsilon ** 2))


def dynamical_moment(
        realization: DisorderRealization,
        cube: MultiParticleCube,
        region: Sequence[Config],
        interval: Interval,
        s: float,
        interaction: Optional[InteractionSpec] = None,
) -> float:
    """
    Raises:
        RegionError: some y in K is outside the cube
    """
    spec = diagonalize(assemble(cube, realization, interaction or InteractionSpec()))
    return moment_from_spectrum(spec, region, interval, s)


def _moment_trial(trial: int, plan: TrialPlan, scales: tuple[int, ...], n: int, s: float,
                  interval: Interval) -> dict:
    cubes = [origin_cube(n, plan.params.d, L) for L in scales]
    solver = _solver(plan, cubes, trial)
    region = [Config.origin(n, plan.params.d)]
    return {"trial": trial, "moments": [moment_from_spectrum(solver.spectrum(c), region, interval, s) for c in cubes]}


def dynamical_moment_growth(
        plan: TrialPlan,
        scales: Sequence[int],
        s: float = 2.0,
        n: int = 1,
        interval: Optional[Interval] = None,
) -> ProbeResult:
    """
    Disorder-averaged moment with K = {0} on growing cubes. Every cube of a trial
    reads the same disorder, so the growth curve is coupled across L.
    """
    started = time.perf_counter()
    result = ProbeResult(probe="dynloc")
    interval = interval or plan.spectrum()
    scales = tuple(sorted(scales))
    records = map_trials(partial(_moment_trial, plan=plan, scales=scales, n=n, s=s, interval=interval),
                         range(plan.trials), plan.workers)
    result.trial_records.extend(records)
    means = []
    for i, L in enumerate(scales):
        est = mean_interval([r["moments"][i] for r in records])
        means.append(est.mean)
        result.curves.append(("moment", float(L), est.mean))
        result.reports.append(EstimateReport(
            probe="dynloc",
            estimate=est.mean,
            ci_lo=est.ci[0],
            ci_hi=est.ci[1],
            trials=plan.trials,
            seed=plan.master_seed,
            L=L,
            n=n,
            h=plan.interaction.h,
            energy=interval_label(interval),
            details={"s": s},
        ))
    if len(means) >= 2 and means[-2] > 0:
        change = abs(means[-1] - means[-2]) / means[-2]
        result.reports[-1].details.update(relative_change=change, saturated=change < 0.05)
    return _finish(result, started)
