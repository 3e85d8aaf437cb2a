from __future__ import annotations

import itertools

import numpy as np
import pytest

from msalab.errors import ClassificationError, DimensionError, ParameterError, RegionError
from msalab.lattice import (
    Config,
    MultiParticleCube,
    boundaries,
    classify_interactivity,
    exceptional_cubes,
    in_exceptional_region,
    is_separable,
    j_separable,
    separability_collection,
    sup_distance,
)


def _cube(*center: int, L: int = 1) -> MultiParticleCube:
    return MultiParticleCube.equal(Config.of(*center), L)


def _boxes_meet(a: int, b: int, L: int) -> bool:
    return abs(a - b) <= 2 * L


def test_sup_distance_identity_and_max_coordinate():
    a = Config.of(0, 0)
    assert sup_distance(a, a) == 0
    assert sup_distance(a, Config.of(3, -5)) == 5


def test_sup_distance_matches_coordinate_scan():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = Config.of(*(tuple(p) for p in rng.integers(-9, 9, size=(3, 2))))
        b = Config.of(*(tuple(p) for p in rng.integers(-9, 9, size=(3, 2))))
        expected = max(abs(p - q) for p, q in zip(a.flat, b.flat))
        assert sup_distance(a, b) == expected


def test_sup_distance_shape_mismatch():
    with pytest.raises(DimensionError):
        sup_distance(Config.of(0), Config.of(0, 1))


def test_cube_cardinality_and_enumeration():
    cube = MultiParticleCube.equal(Config.of((0, 0), (1, 1)), 1)
    assert cube.cardinality == 3 ** 4
    sites = cube.site_array()
    assert sites.shape == (81, 4)
    # first coordinate varies slowest
    assert tuple(sites[0]) == (-1, -1, 0, 0)
    assert tuple(sites[1]) == (-1, -1, 0, 1)
    for k in (0, 17, 80):
        assert cube.index_of(Config.from_flat(sites[k], 2, 2)) == k


def test_index_of_outside_cube():
    with pytest.raises(RegionError):
        _cube(0, L=1).index_of(Config.of(5))


def test_zero_side_cube_is_a_single_site():
    cube = _cube(4, L=0)
    assert cube.cardinality == 1
    internal, external = boundaries(cube)
    assert internal == {Config.of(4)}
    assert external == {Config.of(3), Config.of(5)}


def test_boundaries_of_an_interval():
    internal, external = boundaries(_cube(0, L=2))
    assert internal == {Config.of(-2), Config.of(2)}
    assert external == {Config.of(-3), Config.of(3)}


def test_boundaries_of_two_particle_cube_partition_the_cube():
    cube = _cube(0, 0, L=1)
    internal, external = boundaries(cube)
    assert len(internal) == 8
    assert Config.of(0, 0) not in internal
    sites = set(cube.configs())
    assert internal <= sites
    assert not (external & sites)
    interior = sites - internal
    assert len(internal) + len(interior) == (2 * 1 + 1) ** 2


def test_subcube_centers_stay_inside():
    cube = _cube(0, 0, L=4)
    centers = cube.subcube_centers(2)
    assert len(centers) == 25
    for c in centers:
        sub = MultiParticleCube.equal(c, 2)
        assert all(lo >= -4 for lo in sub.lower)
        assert all(hi <= 4 for hi in sub.upper)
    assert len(cube.subcube_centers(2, stride=2)) == 9
    assert cube.subcube_centers(5) == []


def test_projection_of_a_product_cube():
    cube = MultiParticleCube(Config.of(0, 10), (1, 2))
    assert cube.projection() == {(-1,), (0,), (1,), (8,), (9,), (10,), (11,), (12,)}
    assert cube.projection_bounds() == ((-1,), (12,))


def test_separability_collection_sizes():
    assert len(separability_collection(Config.of(0), 2)) == 1
    centers = separability_collection(Config.of(0, 5), 2)
    assert len(centers) == 4
    assert set(centers) == {Config.of(0, 0), Config.of(0, 5), Config.of(5, 0), Config.of(5, 5)}
    assert all(c.L == 8 for c in exceptional_cubes(Config.of(0, 5), 2))


def test_separability_collection_rejects_small_L():
    with pytest.raises(ParameterError):
        separability_collection(Config.of(0, 1), 1)


def test_single_particle_far_pair_is_separable():
    verdict = is_separable(Config.of(0), Config.of(20), 2, N=1)
    assert verdict.separable
    assert verdict.distance_ok
    assert verdict.witness_J == (0,)


def test_identical_configs_are_not_separable():
    x = Config.of(0, 3)
    verdict = is_separable(x, x, 2, N=2)
    assert not verdict.separable
    assert not verdict.distance_ok


def test_j_witness_matches_set_arithmetic():
    rng = np.random.default_rng(3)
    L = 1
    for _ in range(200):
        x = tuple(int(v) for v in rng.integers(-8, 8, size=2))
        y = tuple(int(v) for v in rng.integers(-8, 8, size=2))
        expected = None
        for J in sorted(c for k in (1, 2) for c in itertools.combinations(range(2), k)):
            rest = [i for i in range(2) if i not in J]
            hits_y = any(_boxes_meet(x[j], yy, L) for j in J for yy in y)
            hits_rest = any(_boxes_meet(x[j], x[i], L) for j in J for i in rest)
            if not hits_y and not hits_rest:
                expected = J
                break
        assert j_separable(Config.of(*x), Config.of(*y), L) == expected


def test_distant_configs_outside_exceptional_region_are_separable():
    x = Config.of(0, 3)
    L, N = 2, 2
    for y in MultiParticleCube.equal(x, 40).configs():
        if sup_distance(x, y) > 7 * N * L and not in_exceptional_region(y, x, L):
            assert is_separable(x, y, L, N).separable, y


def test_far_from_a_compact_config_is_j_separable():
    y = Config.of(0, 2)
    L, N = 1, 2
    diameter = 2
    for x in MultiParticleCube.equal(y, 20).configs():
        if sup_distance(x, y) > diameter + 5 * N * L:
            assert j_separable(x, y, L) is not None, x


def test_classify_far_particles_is_pi():
    result = classify_interactivity(_cube(0, 100, L=2), r0=1)
    assert result.is_partial
    assert result.first == (0,)
    assert result.second == (1,)
    assert result.n_first == result.n_second == 1
    assert result.first_cube.center == Config.of(0)
    assert result.second_cube.center == Config.of(100)


def test_classify_overlapping_particles_is_fi():
    assert classify_interactivity(_cube(0, 1, L=2), r0=1).kind == "FI"


def test_classify_gap_boundary():
    L, r0 = 2, 1
    assert classify_interactivity(_cube(0, 2 * L + r0 + 2, L=L), r0).kind == "PI"
    assert classify_interactivity(_cube(0, 2 * L + r0, L=L), r0).kind == "FI"


def test_classify_prefers_the_widest_gap():
    result = classify_interactivity(_cube(0, 10, 40, L=1), r0=1)
    assert result.first == (0, 1)
    assert result.second == (2,)
    assert result.gap == 28


def test_classify_single_particle_raises():
    with pytest.raises(ClassificationError):
        classify_interactivity(_cube(0, L=1), r0=1)
