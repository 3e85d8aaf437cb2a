from __future__ import annotations

import math

import numpy as np
import pytest

from msalab.errors import ParameterError, PreconditionError
from msalab.lattice import Config, MultiParticleCube
from msalab.model import DisorderSpec, InteractionSpec, Interval, SiteBox, assemble, sample_disorder
from msalab.msa import (
    EnergySet,
    MsaParams,
    RecursionLedger,
    boundary_green_max,
    boundary_green_profile,
    classify_cube,
    count_singular_subcubes,
    cover_params,
    energy_interval_cover,
    gamma,
    is_cnr,
    m_star,
    max_separated_packing,
    next_scale,
    one_particle_localized,
    recursion_rhs,
    recursion_step,
    resonant_energy_set,
    spectral_distance,
    verdict_from_spectrum,
)
from msalab.spectral import CubeSolver, diagonalize


def _free_spec(L: int):
    cube = MultiParticleCube.equal(Config.of(0), L)
    realization = sample_disorder(DisorderSpec(family="constant", support_bound=0.0), SiteBox.around(cube), 0)
    return diagonalize(assemble(cube, realization, InteractionSpec()))


def _solver(*center: int, L: int, h: float = 0.0, margin: int = 0):
    cube = MultiParticleCube.equal(Config.of(*center), L)
    realization = sample_disorder(DisorderSpec(support_bound=1.0, master_seed=3), SiteBox.around(cube, margin), 0)
    return cube, CubeSolver(realization, InteractionSpec.step(r0=1, h=h))


def test_gamma():
    assert gamma(0.01, 1, 2, 2) == pytest.approx(0.02)
    assert gamma(0.01, 256, 1, 2) == pytest.approx(0.01 * 1.5 ** 2)
    with pytest.raises(ParameterError):
        gamma(0.0, 10, 1, 2)
    with pytest.raises(ParameterError):
        gamma(0.01, 10, 3, 2)


def test_m_star():
    assert m_star(2, 1) == pytest.approx(1.0 / 96.0)
    assert m_star(2, 1, mu_tilde=0.01) == pytest.approx(0.01 / 8.0)


def test_scale_sequence():
    assert next_scale(8, 1.5) == 22
    params = MsaParams(L0=8, alpha=1.5)
    assert params.scales(3) == [8, 22, 103]
    assert params.p_k(2) == pytest.approx(2.0 * 1.1 ** 2)
    assert params.cnr_min_side(22) == 8
    assert params.resonance_threshold(16) == pytest.approx(math.exp(-4.0))


def test_params_validation():
    with pytest.raises(ParameterError):
        MsaParams(theta=0.5)
    with pytest.raises(ParameterError):
        MsaParams(alpha=1.0)
    with pytest.raises(ParameterError):
        MsaParams(N=2, n=3)


def test_strict_constraints():
    params = MsaParams(N=2, d=1, theta=0.1)
    assert params.strict_p_min == pytest.approx(12.0 / 0.7)
    assert params.strict_m_max == pytest.approx(1.0 / 192.0)
    assert not params.is_strict
    assert len(params.strict_violations()) == 2
    strict = MsaParams(N=2, d=1, theta=0.1, p=18.0, m=1.0 / 192.0, enforce_strict=True)
    assert strict.is_strict
    with pytest.raises(ParameterError):
        MsaParams(N=2, d=1, theta=0.1, p=2.0, m=1.0 / 192.0, enforce_strict=True)


def test_target_probability():
    params = MsaParams(N=2, n=2, p=2.0, theta=0.1)
    assert params.target(0) == pytest.approx(8.0 ** -4.0)
    assert params.target(0, n=1) == pytest.approx(8.0 ** -16.0)
    assert params.target(1) == pytest.approx(22.0 ** (-4.0 * 1.1))


def test_far_energy_gives_a_non_singular_non_resonant_cube():
    spec = _free_spec(2)
    params = MsaParams(N=1, n=1, m=0.01)
    verdict = verdict_from_spectrum(spec, -50.0, params)
    assert verdict.ns
    assert not verdict.resonant
    assert verdict.max_boundary_green == pytest.approx(boundary_green_max(spec, spec.cube, -50.0))
    assert verdict.gamma_threshold == pytest.approx(math.exp(-gamma(0.01, 2, 1, 1) * 2))


def test_eigenvalue_energy_is_singular_and_resonant():
    spec = _free_spec(1)
    verdict = verdict_from_spectrum(spec, 2.0, MsaParams(N=1, n=1))
    assert not verdict.ns
    assert verdict.resonant
    assert verdict.max_boundary_green == math.inf
    record = verdict.to_record()
    assert record["cube"] == {"center": [0], "L": 1, "n": 1}
    assert record["ns"] is False


def test_classify_cube_matches_precomputed_spectrum():
    cube, solver = _solver(0, 1, L=2, h=0.5)
    H = solver.hamiltonian(cube)
    params = MsaParams(N=2, n=2)
    a = classify_cube(H, 0.37, params)
    b = classify_cube(H, 0.37, params, spec=diagonalize(H))
    assert a == b
    assert a.h == 0.5


def test_cnr_agrees_with_the_resonant_energy_set():
    cube, solver = _solver(0, 2, L=4)
    params = MsaParams(N=2, n=2)
    resonant = resonant_energy_set(cube, params, solver)
    assert not resonant.is_empty
    own = float(solver.eigenvalues(cube)[5])
    result = is_cnr(cube, own, params, solver)
    assert not result.cnr
    assert result.offender == (cube.center.flat, 4)
    assert is_cnr(cube, -50.0, params, solver).cnr
    for energy in np.linspace(-1.0, 8.0, 37):
        assert is_cnr(cube, float(energy), params, solver).cnr == (not resonant.contains(float(energy)))


def test_cnr_needs_room_for_subcubes():
    cube, solver = _solver(0, L=2)
    with pytest.raises(PreconditionError):
        is_cnr(cube, 0.0, MsaParams(N=1, n=1), solver)


def test_energy_set_operations():
    windows = EnergySet.from_windows(np.array([0.0, 0.15, 1.0]), np.array([0.1, 0.1, 0.1]))
    assert np.allclose(windows.intervals, [(-0.1, 0.25), (0.9, 1.1)])
    assert windows.measure == pytest.approx(0.55)
    assert windows.contains(0.2)
    assert not windows.contains(0.5)
    cut = windows.intersect(EnergySet(((0.2, 0.95),)))
    assert np.allclose(cut.intervals, [(0.2, 0.25), (0.9, 0.95)])
    assert windows.clip(Interval(2.0, 3.0)).is_empty
    assert EnergySet.from_windows(np.array([]), np.array([])).is_empty


def test_max_separated_packing():
    points = np.array([[0], [5], [10], [20]])
    assert max_separated_packing(points, 6) == [0, 2, 3]
    assert len(max_separated_packing(points, 6, limit=1)) == 2
    assert max_separated_packing(np.empty((0, 1)), 6) == []


def test_packing_matches_brute_force():
    rng = np.random.default_rng(5)
    points = rng.integers(0, 40, size=(9, 2))
    best = 0
    for mask in range(1 << len(points)):
        chosen = [i for i in range(len(points)) if mask >> i & 1]
        if all(np.max(np.abs(points[a] - points[b])) > 10 for a in chosen for b in chosen if a < b):
            best = max(best, len(chosen))
    assert len(max_separated_packing(points, 10)) == best


def test_count_singular_subcubes_on_a_free_chain():
    cube = MultiParticleCube.equal(Config.of(0), 8)
    realization = sample_disorder(DisorderSpec(family="constant", support_bound=0.0), SiteBox.around(cube), 0)
    solver = CubeSolver(realization, InteractionSpec())
    params = MsaParams(N=1, n=1)
    # 2 is an eigenvalue of every free 3-site chain
    count = count_singular_subcubes(cube, 2.0, params, 1, solver)
    assert count.scanned == 15
    assert count.M_PI == 0
    assert count.M_FI == 2
    assert not count.exceeds(params.J_threshold)
    with pytest.raises(ParameterError):
        count_singular_subcubes(MultiParticleCube.equal(Config.of(0), 7), 2.0, params, 1, solver)


def test_recursion_rhs():
    assert recursion_rhs(2, 1, 22, 1e-3, 1e-5, 1e-5) == pytest.approx(9.487388, rel=1e-6)


def test_recursion_ledger():
    params = MsaParams(N=2, n=2, p=2.0)
    ledger = recursion_step(RecursionLedger(), 0, params, 1e-3, 1e-5, 1e-5, P_next=0.0)
    record = ledger.records[0]
    assert (record.L_k, record.L_next) == (8, 22)
    assert record.target == pytest.approx(22.0 ** (-4.0 * 1.1))
    assert record.holds
    ledger = recursion_step(ledger, 1, params, 0.0, 0.0, 0.0, P_next=0.1, source="empirical")
    assert ledger.records[1].holds is False
    assert not ledger.all_hold
    pending = recursion_step(RecursionLedger(), 0, params, 0.5, 0.0, 0.0, source="reference")
    assert pending.records[0].holds is None
    assert pending.all_hold
    with pytest.raises(ParameterError):
        recursion_step(RecursionLedger(), 0, params, 1.5, 0.0, 0.0)


def test_cover_params():
    cp = cover_params(10, 10.0, 2, 1)
    assert 2 * cp.a == pytest.approx(0.02)
    assert cp.b == pytest.approx(1e-8)
    assert cp.c == pytest.approx(3.0 * 0.01)


def test_boundary_green_profile_matches_pointwise():
    spec = _free_spec(3)
    energies = np.array([-1.0, 0.3, 5.0, float(spec.eigenvalues[2])])
    profile = boundary_green_profile(spec, spec.cube, energies)
    for E, value in zip(energies[:3], profile[:3]):
        assert value == pytest.approx(boundary_green_max(spec, spec.cube, E))
    assert profile[3] == math.inf


def test_energy_interval_cover():
    cube, solver = _solver(0, L=10, margin=0)
    spec = solver.spectrum(cube)
    params = MsaParams(N=1, n=1, p=1.0)
    report = energy_interval_cover(spec, params, 0, Interval(-1.0, 7.0), 0.02)
    assert report.energies[0] == -1.0
    assert len(report.boundary_green) == len(report.energies)
    # |G| <= 1/eta forces bad energies next to the spectrum
    assert report.uncovered.size == 0
    with pytest.raises(ParameterError):
        energy_interval_cover(spec, MsaParams(N=1, n=1, p=10.0), 0, Interval(-1.0, 7.0), 0.01)


def test_one_particle_localized():
    spec = _free_spec(4)
    assert one_particle_localized(spec, 4, 0.01, 1, 1)
    assert not one_particle_localized(spec, 4, 5.0, 1, 1)
    _, solver = _solver(0, 1, L=1)
    with pytest.raises(ParameterError):
        one_particle_localized(solver.spectrum(MultiParticleCube.equal(Config.of(0, 1), 1)), 1, 0.01, 2, 2)


def test_spectral_distance():
    assert spectral_distance(np.array([0.0, 1.0, 3.0]), np.array([1.5, 10.0])) == pytest.approx(0.5)
