import numpy as np
import pytest
from hypothesis import given, strategies as st

from tagzrp.errors import (
    EmptySource,
    NegativeRate,
    NonzeroAtZero,
    NotNormalized,
    ReducibleSymmetrization,
    ZeroAtPositive,
    ZeroOffsetMass,
)
from tagzrp.model import (
    Configuration,
    LatticeSpec,
    format_kernel_text,
    minimum_side,
    move_particle,
    parse_kernel_text,
    shift_frame,
    tagged_jump,
    validate_kernel,
    validate_rate,
)


# ---------------------------------------------------------------- rates


def test_identity_rate():
    g = validate_rate("k", probe_max=64)
    assert g.lipschitz_bound == 1
    assert g.is_id
    assert g.gap_class == (1, 1.0)
    assert g.per_particle_constant


def test_constant_rate():
    g = validate_rate("ind(k>=1)")
    assert g.lipschitz_bound == 1
    assert g.is_id
    assert g.gap_class is None


def test_min3_is_id_by_enumeration():
    g = validate_rate("min(k,3)")
    vals = [min(k, 3) for k in range(65)]
    nondecreasing = all(b >= a for a, b in zip(vals, vals[1:]))
    per = [v / k for k, v in enumerate(vals) if k]
    nonincreasing = all(b <= a for a, b in zip(per, per[1:]))
    assert g.is_id == (nondecreasing and nonincreasing) is True


def test_non_id_rate():
    assert not validate_rate("k^2").is_id
    assert not validate_rate("max(3-k, 1)*ind(k>=1)").is_id


@pytest.mark.parametrize("spec,exc", [
    ("k + 1", NonzeroAtZero),
    ("ind(k>=2)", ZeroAtPositive),
    ("k - 2*k", NegativeRate),
    ([0, 1, -1], NegativeRate),
])
def test_rate_rejections(spec, exc):
    with pytest.raises(exc):
        validate_rate(spec)


def test_probe_max_floor():
    with pytest.raises(ValueError):
        validate_rate("k", probe_max=7)


def test_table_rate_extends_last_entry():
    g = validate_rate([0, 1, 2, 2.5], probe_max=8)
    assert g(100) == 2.5
    assert list(g.table(5)) == [0, 1, 2, 2.5, 2.5, 2.5]


@given(st.lists(st.floats(0.05, 5.0), min_size=8, max_size=40))
def test_rate_invariants(tail):
    g = validate_rate([0.0] + tail, probe_max=8 + len(tail))
    v = g.probe_values
    assert v[0] == 0 and np.all(v[1:] > 0)
    assert np.all(np.abs(np.diff(v)) <= g.lipschitz_bound + 1e-12)
    if g.is_id:
        assert np.all(np.diff(v) >= -1e-12)
        per = v[1:] / np.arange(1, v.size)
        assert np.all(np.diff(per) <= 1e-12)


# ---------------------------------------------------------------- kernels


def test_totally_asymmetric_kernel():
    p = validate_kernel({1: 1.0})
    assert p.drift[0] == 1.0
    assert p.range == 2
    assert p.is_totally_asymmetric_nn


def test_symmetric_kernel():
    p = validate_kernel({1: 0.5, -1: 0.5})
    assert p.drift[0] == 0.0
    assert p.second_moment_matrix[0, 0] == 1.0


@pytest.mark.parametrize("entries,dim,exc", [
    ({2: 1.0}, 1, ReducibleSymmetrization),
    ({1: 0.5}, 1, NotNormalized),
    ({0: 0.5, 1: 0.5}, 1, ZeroOffsetMass),
    ({(1, 0): 1.0}, 2, ReducibleSymmetrization),
    ({(1, 1): 0.5, (1, -1): 0.5}, 2, ReducibleSymmetrization),
])
def test_kernel_rejections(entries, dim, exc):
    with pytest.raises(exc):
        validate_kernel(entries, dim)


def test_two_dim_kernel_irreducible():
    p = validate_kernel({(1, 0): 0.25, (-1, 0): 0.25, (0, 1): 0.5}, 2)
    assert np.allclose(p.drift, [0.0, 0.5])
    assert p.mean_square == pytest.approx(1.0)


def test_kernel_text_round_trip():
    text = "1 0.7\n-1 0.3\n"
    p = parse_kernel_text(text)
    q = parse_kernel_text(format_kernel_text(p))
    assert p.entries() == q.entries()
    p2 = parse_kernel_text("1,0 0.5\n0,-1 0.5", dim=2)
    assert p2.dim == 2


def test_lattice_rule_and_side_heuristic():
    p = validate_kernel({1: 1.0})
    LatticeSpec(1, 3).check_kernel(p)
    with pytest.raises(ValueError):
        LatticeSpec(1, 2).check_kernel(p)
    assert minimum_side(p, 1.0, 0.0) == 4


# ---------------------------------------------------------------- configurations


def test_move_particle_examples():
    assert move_particle(Configuration([2, 0, 1]), 0, 1) == Configuration([1, 1, 1])
    assert move_particle(Configuration([1, 1]), 1, 1) == Configuration([2, 0])
    with pytest.raises(EmptySource):
        move_particle(Configuration([0, 3]), 0, 1)


def test_shift_frame_examples():
    assert shift_frame(Configuration([1, 2, 0]), 1) == Configuration([2, 0, 1])
    assert tagged_jump(Configuration([1, 0], True), 1) == Configuration([1, 0])
    assert tagged_jump(Configuration([2, 5, 0], True), 1) == Configuration([6, 0, 1])


def test_reference_frame_requires_origin():
    with pytest.raises(ValueError):
        Configuration([0, 2], reference_frame=True)


configs = st.lists(st.integers(0, 4), min_size=3, max_size=8)


@given(configs, st.integers(-3, 3))
def test_shift_inverse(occ, j):
    eta = Configuration(occ)
    assert shift_frame(shift_frame(eta, j), -j) == eta


@given(configs, st.sampled_from([-2, -1, 1, 2]))
def test_tagged_jump_delta_algebra(occ, j):
    occ[0] = max(occ[0], 1)
    if len(occ) <= 2 * abs(j):
        return
    eta = Configuration(occ, True)
    lhs = tagged_jump(eta, j)
    rhs = shift_frame(eta, j).occupancy.copy()
    rhs[0] += 1
    rhs[-j % len(occ)] -= 1
    assert np.array_equal(lhs.occupancy, rhs)
    assert lhs[0] >= 1


@given(configs, st.lists(st.tuples(st.integers(0, 7), st.integers(-2, 2)), max_size=30))
def test_conservation(occ, moves):
    eta = Configuration(occ)
    total = eta.total_particles
    for i, j in moves:
        if j == 0:
            eta = shift_frame(eta, i)
        elif eta[i % len(occ)] > 0:
            eta = move_particle(eta, i % len(occ), j)
        assert int(eta.occupancy.sum()) == total == eta.total_particles
