from __future__ import annotations

import math

import numpy as np
import pytest

from msalab.errors import ParameterError, PreconditionError, RegionError, ResourceLimitError
from msalab.experiments import (
    EstimateReport,
    TrialPlan,
    combes_thomas_probe,
    correlator_decay_probe,
    cover_probe,
    dynamical_moment,
    dynamical_moment_growth,
    eigenfunction_decay_probe,
    empirical_h_star,
    fit_correlator_decay,
    initial_scale_probe,
    map_trials,
    origin_cube,
    pair_singularity_probe,
    pi_decomposition_probe,
    recursion_probe,
    second_resolvent_check,
    separability_scan,
    single_site_resonance,
    tensor_equivalence_probe,
    wegner_probe,
    weak_interaction_stability,
)
from msalab.lattice import Config
from msalab.model import DisorderSpec, InteractionSpec, Interval, SiteBox, assemble, sample_disorder
from msalab.msa import MsaParams, m_star
from msalab.spectral import correlator, diagonalize

EVERYTHING = Interval(-100.0, 100.0)


def _plan(trials: int = 4, N: int = 2, n: int = 2, d: int = 1, h: float = 0.0, M: float = 1.0,
          seed: int = 7, **kwargs) -> TrialPlan:
    return TrialPlan(
        trials=trials,
        disorder=DisorderSpec(support_bound=M, master_seed=seed),
        interaction=InteractionSpec.step(r0=1, h=h),
        params=MsaParams(N=N, n=n, d=d, **kwargs),
    )


def _square(t: int) -> dict:
    return {"trial": t, "value": t * t}


def test_plan_validation_and_energies():
    with pytest.raises(ParameterError):
        _plan(trials=0)
    plan = _plan()
    interval = plan.spectrum()
    assert (interval.lo, interval.hi) == (-11.0, 11.0)
    assert len(plan.energy_list()) == 5
    assert plan.reference_energy() == pytest.approx(0.0)
    assert _plan(h=1.0).spectrum().hi == pytest.approx(12.0)


def test_map_trials_keeps_trial_order():
    assert [r["trial"] for r in map_trials(_square, range(5))] == [0, 1, 2, 3, 4]


def _over_cap(t: int) -> dict:
    raise ResourceLimitError(10 ** 6, 4000, f"trial {t}")


def test_map_trials_returns_worker_errors_intact():
    with pytest.raises(ResourceLimitError) as info:
        map_trials(_over_cap, range(4), workers=2)
    assert info.value.cap == 4000
    assert info.value.dimension == 10 ** 6


def test_estimate_report_proportion_and_summary_row():
    report = EstimateReport.proportion("wegner-R", 3, 10, 7, L=8, n=1, energy="0")
    assert report.estimate == 0.3
    assert report.ci_lo < 0.3 < report.ci_hi
    assert report.details["successes"] == 3
    row = report.summary_row()
    assert list(row) == ["probe", "L", "n", "h", "E_or_grid", "estimate", "ci_lo", "ci_hi", "trials", "seed"]
    assert row["L"] == 8


def test_second_resolvent_scalar_case():
    report = second_resolvent_check(np.array([[1.0]]), np.array([1.0]), 0.1, 0.0)
    assert report.drift == pytest.approx(1.0 - 1.0 / 1.1)
    assert report.bound == pytest.approx(0.1 / 1.1)
    assert report.holds
    assert report.ratio == pytest.approx(1.0)


def test_second_resolvent_random_matrices():
    cube = origin_cube(2, 1, 2)
    realization = sample_disorder(DisorderSpec(support_bound=2.0, master_seed=1), SiteBox.around(cube), 0)
    H0 = assemble(cube, realization, InteractionSpec.step(r0=1))
    for h in (0.01, 0.1, 1.0):
        assert second_resolvent_check(H0.matrix, H0.interaction, h, 0.1234).holds


def test_second_resolvent_reuses_given_spectra():
    cube = origin_cube(2, 1, 2)
    realization = sample_disorder(DisorderSpec(support_bound=2.0, master_seed=4), SiteBox.around(cube), 0)
    H0 = assemble(cube, realization, InteractionSpec.step(r0=1))
    h = 0.3
    spec0 = diagonalize(H0.matrix)
    spec_h = diagonalize(H0.matrix + h * np.diag(H0.interaction))
    direct = second_resolvent_check(H0.matrix, H0.interaction, h, 0.1234)
    reused = second_resolvent_check(H0.matrix, H0.interaction, h, 0.1234, spec0=spec0, spec_h=spec_h)
    assert reused.drift == pytest.approx(direct.drift, rel=1e-10, abs=1e-14)
    assert reused.bound == pytest.approx(direct.bound, rel=1e-10)


def test_empirical_h_star():
    assert empirical_h_star((0.0, 0.1, 1.0), (0.1, 0.15, 0.5), 100) == pytest.approx(0.1)
    assert empirical_h_star((0.0, 0.5), (0.0, 0.0), 10) == pytest.approx(0.5)


def test_empirical_h_star_stops_at_the_first_failure():
    # the last amplitude passes again by noise; h* stays at the first one
    assert empirical_h_star((0.0, 0.1, 1.0), (0.1, 0.5, 0.1), 100) == pytest.approx(0.0)
    assert empirical_h_star((0.0, 0.1, 0.5, 1.0), (0.1, 0.15, 0.5, 0.1), 100) == pytest.approx(0.1)
    assert empirical_h_star((1.0, 0.0, 0.1), (0.1, 0.1, 0.1), 100) == pytest.approx(1.0)


def test_dynamical_moment_matches_brute_force():
    cube = origin_cube(1, 1, 3)
    realization = sample_disorder(DisorderSpec(support_bound=1.0, master_seed=2), SiteBox.around(cube), 0)
    region = [Config.of(0), Config.of(1)]
    value = dynamical_moment(realization, cube, region, EVERYTHING, 2.0)
    spec = diagonalize(assemble(cube, realization, InteractionSpec()))
    expected = 0.0
    for x in cube.configs():
        for y in region:
            expected += abs(x.coords[0][0]) ** 2 * correlator(spec, x, y, EVERYTHING) ** 2
    assert value == pytest.approx(expected, rel=1e-10)


def test_dynamical_moment_rejects_outside_regions():
    cube = origin_cube(1, 1, 2)
    realization = sample_disorder(DisorderSpec(), SiteBox.around(cube), 0)
    with pytest.raises(RegionError):
        dynamical_moment(realization, cube, [Config.of(10)], EVERYTHING, 2.0)


def test_fit_correlator_decay():
    r = np.arange(2, 21, 2)
    decay = fit_correlator_decay(r, np.exp(-0.5 * r))
    assert decay.mu_tilde == pytest.approx(0.5)
    assert decay.localized
    assert fit_correlator_decay([2, 4], [0.1, 0.01]) is None
    assert fit_correlator_decay(r, np.full(r.size, 1e-20)) is None


def test_combes_thomas_probe_passes():
    result = combes_thomas_probe(_plan(trials=3), L=3, n=1)
    assert result.passed
    report = result.reports[0]
    assert report.probe == "ct-check"
    assert report.estimate <= 1.0
    assert len(result.trial_records) == 3


def test_tensor_equivalence_probe_passes():
    result = tensor_equivalence_probe(_plan(trials=2), L=2, n=2)
    assert result.passed
    assert result.reports[0].estimate <= 1e-10


def test_pi_decomposition_probe_passes():
    result = pi_decomposition_probe(_plan(trials=2, h=1.0), L=1, n=2)
    assert result.passed
    assert result.reports[0].estimate <= 1e-8


def test_separability_scan_is_clean():
    scan = separability_scan(N=2, L=2, radius=30)
    assert scan.clean
    assert scan.checked_far > 0
    assert scan.checked_distant > 0


def test_wegner_probe_reports():
    result = wegner_probe(_plan(trials=10), [4, 9], n=1)
    probes = [r.probe for r in result.reports]
    assert probes.count("wegner-R") == 10
    assert probes.count("wegner-CNR") == 10
    assert probes.count("wegner-slope") == 5
    assert all(0.0 <= r.ci_lo <= r.estimate <= r.ci_hi <= 1.0 for r in result.reports if r.probe == "wegner-R")
    assert len(result.curves) == 10


def test_wegner_probe_is_deterministic():
    a = wegner_probe(_plan(trials=5), [4], n=1, check_cnr=False)
    b = wegner_probe(_plan(trials=5), [4], n=1, check_cnr=False)
    assert [r.estimate for r in a.reports] == [r.estimate for r in b.reports]
    assert a.trial_records == b.trial_records


def test_wegner_pair_event():
    result = wegner_probe(_plan(trials=3), [4], n=1, pair=True)
    pair = [r for r in result.reports if r.probe == "wegner-pair"]
    assert len(pair) == 1
    assert pair[0].energy == "[-11,11]"


def test_single_site_resonance_matches_the_law():
    report = single_site_resonance(_plan(trials=200), energy=2.0, eps=0.5)
    assert report.probe == "wegner-1x1"
    assert report.details["exact"] == pytest.approx(0.5)
    assert 0.35 < report.estimate < 0.65


def test_initial_scale_probe():
    plan = _plan(trials=5)
    result = initial_scale_probe(plan, n=1, L0=4)
    initial = [r for r in result.reports if r.probe == "initial"]
    assert len(initial) == 5
    assert initial[0].details["m"] == pytest.approx(m_star(2, 1))
    assert initial[0].details["target"] == pytest.approx(4.0 ** (-2.0 * 2.0 * 4))
    assert initial[0].details["verdict"] in {"consistent", "exceeds", "not-falsifiable"}
    assert [r.probe for r in result.reports][-1] == "initial-1p"


def test_weak_interaction_stability():
    result = weak_interaction_stability(_plan(trials=4), [0.1, 1.0], L=2, n=2)
    assert result.passed
    assert [r.probe for r in result.reports].count("stability-S") == 3
    assert [c[1] for c in result.curves] == [0.0, 0.1, 1.0]
    assert result.reports[-1].probe == "stability-hstar"


def test_pair_singularity_probe():
    result = pair_singularity_probe(_plan(trials=3), L_k=4, n=1)
    report = result.reports[0]
    assert report.probe == "pair"
    assert report.energy.startswith("grid[-11,11]")
    with pytest.raises(PreconditionError):
        pair_singularity_probe(_plan(trials=1), L_k=4, n=1, x=Config.of(0), y=Config.of(1))
    with pytest.raises(ParameterError):
        pair_singularity_probe(_plan(trials=1), L_k=4, n=1, grid_step=1.0)


def test_cover_probe_passes():
    result = cover_probe(_plan(trials=3), L=4, n=1)
    assert result.passed
    assert result.reports[0].estimate == 0.0


def test_recursion_probe_ledger():
    result = recursion_probe(_plan(trials=2, N=1, n=1), scales=2)
    ledger = result.ledger
    assert len(ledger.records) == 2
    reference = ledger.records[0]
    assert reference.source == "reference"
    assert reference.rhs_bound == pytest.approx(3.0 ** 2 / 2.0 * 22.0 ** 2 * 1e-6 + 2e-5)
    assert ledger.records[1].source == "empirical"
    assert {r.probe for r in result.reports} == {
        "recursion-P_k", "recursion-P_next", "recursion-Q_next", "recursion-S_next",
    }
    with pytest.raises(ParameterError):
        recursion_probe(_plan(trials=1, N=1, n=1), scales=1)


def test_eigenfunctions_localize_at_strong_disorder():
    cube = origin_cube(1, 1, 20)
    realization = sample_disorder(DisorderSpec(support_bound=20.0, master_seed=3), SiteBox.around(cube), 0)
    profiles = eigenfunction_decay_probe(realization, cube, EVERYTHING)
    assert len(profiles) == 41
    assert sum(p.localized for p in profiles) >= 0.9 * len(profiles)
    rates = [p.rate for p in profiles if p.rate is not None]
    assert np.median(rates) > 0.5
    with pytest.raises(ParameterError):
        eigenfunction_decay_probe(realization, origin_cube(3, 1, 1), EVERYTHING)


def test_correlator_probe_requires_a_chain():
    with pytest.raises(PreconditionError):
        correlator_decay_probe(_plan(d=2), L=10)


def test_correlator_probe_strong_disorder():
    result = correlator_decay_probe(_plan(trials=5, M=20.0), L=20, distances=[1, 2, 3, 4, 5, 6])
    report = result.reports[0]
    assert report.probe == "correlator"
    assert report.estimate > 0
    assert report.details["localized"]
    assert [c[1] for c in result.curves] == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


def test_dynamical_moment_growth():
    result = dynamical_moment_growth(_plan(trials=3, M=10.0), [3, 5], s=2.0)
    assert [r.L for r in result.reports] == [3, 5]
    assert "relative_change" in result.reports[-1].details
    assert all(not math.isnan(r.estimate) for r in result.reports)
    assert len(result.curves) == 2
