import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icl_align.covariance import (
    CovarianceSpec,
    build,
    diagonal_in_basis,
    from_matrix,
    make_isotropic,
    make_lowrank,
    make_powerlaw,
    make_spike,
    make_uniform_linear,
    project_onto_basis,
    random_rotation,
    reversed_order,
)
from icl_align.exceptions import InvalidArgumentError


def test_powerlaw_flat_is_identity():
    np.testing.assert_array_equal(make_powerlaw(4, 0, 1).spectrum, [1, 1, 1, 1])


def test_powerlaw_two_dims_by_hand():
    np.testing.assert_allclose(make_powerlaw(2, 1, 1).spectrum, [4 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_powerlaw_large_trace():
    c = make_powerlaw(120, 0.9, 1)
    assert abs(c.trace - 1) <= 1e-12
    assert abs(np.mean(c.spectrum) - 1) <= 1e-12


@pytest.mark.parametrize("p, tr", [(float("nan"), 1.0), (1.0, 0.0), (1.0, -1.0), (float("inf"), 1)])
def test_powerlaw_rejects_bad_args(p, tr):
    with pytest.raises(InvalidArgumentError):
        make_powerlaw(5, p, tr)


def test_uniform_linear_small():
    np.testing.assert_array_equal(make_uniform_linear(1).spectrum, [1.0])
    np.testing.assert_allclose(make_uniform_linear(3).spectrum, [1.5, 1.0, 0.5])
    assert abs(make_uniform_linear(120).trace - 1) <= 1e-12


def test_spike_matrices():
    np.testing.assert_array_equal(make_spike(2, 1).matrix(), np.diag([2.0, 0.0]))
    m = make_spike(4, 3).matrix()
    expected = np.zeros((4, 4))
    expected[2, 2] = 4
    np.testing.assert_array_equal(m, expected)
    weak = make_spike(120, 120)
    assert abs(weak.trace - 1) <= 1e-12
    assert weak.matrix()[119, 119] == 120


@pytest.mark.parametrize("idx", [0, 5, -1, 2.5])
def test_spike_out_of_range(idx):
    with pytest.raises(InvalidArgumentError):
        make_spike(4, idx)


def test_lowrank():
    np.testing.assert_array_equal(make_lowrank(4, 4).spectrum, [1, 1, 1, 1])
    np.testing.assert_array_equal(make_lowrank(4, 2).spectrum, [2, 2, 0, 0])
    half = make_lowrank(80, 40)
    np.testing.assert_array_equal(half.matrix(), np.diag([2.0] * 40 + [0.0] * 40))
    assert half.rank() == 40
    with pytest.raises(InvalidArgumentError):
        make_lowrank(4, 5)


def test_powerlaw_zero_equals_full_lowrank():
    for d in (1, 7, 30):
        np.testing.assert_array_equal(make_powerlaw(d, 0, 1).spectrum, make_lowrank(d, d).spectrum)


def test_invariants_checked_on_construction():
    with pytest.raises(InvalidArgumentError):
        CovarianceSpec([1.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        CovarianceSpec([1.0, -0.1])
    with pytest.raises(InvalidArgumentError):
        CovarianceSpec([1.0, 1.0], basis=[[1.0, 0.1], [0.0, 1.0]])


def test_spectrum_is_read_only():
    c = make_uniform_linear(5)
    with pytest.raises(ValueError):
        c.spectrum[0] = 3.0


def test_project_identity_basis():
    c = make_uniform_linear(5)
    np.testing.assert_array_equal(project_onto_basis(c, np.eye(5)), c.matrix())
    np.testing.assert_array_equal(project_onto_basis(c, None), c.matrix())


def test_project_permutation():
    c = CovarianceSpec([3.0, 1.0])
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(project_onto_basis(c, swap), np.diag([1.0, 3.0]))


def test_project_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        project_onto_basis(make_uniform_linear(3), np.eye(4))


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 12), seed=st.integers(0, 2 ** 32 - 1), p=st.floats(0, 3))
def test_project_preserves_trace_and_norm(d, seed, p):
    rng = np.random.default_rng(seed)
    c = random_rotation(make_powerlaw(d, p), rng)
    u = random_rotation(make_isotropic(d), rng).basis
    out = project_onto_basis(c, u)
    m = c.matrix()
    assert abs(np.trace(out) - np.trace(m)) <= 1e-10
    assert abs(np.linalg.norm(out) - np.linalg.norm(m)) <= 1e-10
    np.testing.assert_allclose(out, out.T, atol=0)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 15), p=st.floats(0, 4), trace=st.floats(0.01, 100))
def test_constructors_sorted_and_traced(d, p, trace):
    for c in (make_powerlaw(d, p, trace), make_uniform_linear(d), make_isotropic(d, trace)):
        assert np.all(np.diff(c.spectrum) <= 0)
        assert np.all(c.spectrum >= 0)
    assert abs(make_powerlaw(d, p, trace).trace - trace) <= 1e-12 * max(1.0, trace)
    for r in range(1, d + 1):
        assert abs(make_lowrank(d, r).trace - 1) <= 1e-12
    for i in range(1, d + 1):
        assert abs(make_spike(d, i).trace - 1) <= 1e-12


def test_reversed_order_is_antialigned():
    c = make_uniform_linear(4)
    r = reversed_order(c)
    np.testing.assert_allclose(np.diag(r.matrix()), c.spectrum[::-1])
    np.testing.assert_allclose(diagonal_in_basis(r, c), c.spectrum[::-1])


def test_diagonal_in_basis_matches_dense_projection():
    rng = np.random.default_rng(3)
    train = random_rotation(make_powerlaw(6, 1.1), rng)
    test = random_rotation(make_uniform_linear(6), rng)
    dense = np.diag(project_onto_basis(test, train.basis))
    np.testing.assert_allclose(diagonal_in_basis(test, train), dense, atol=1e-12)


def test_from_matrix_roundtrip():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    m = a @ a.T
    c = from_matrix(m)
    np.testing.assert_allclose(c.matrix(), m, atol=1e-10)
    with pytest.raises(InvalidArgumentError):
        from_matrix(-m)


def test_json_roundtrip():
    c = random_rotation(make_powerlaw(5, 0.9), 1)
    data = json.loads(json.dumps(c.to_dict()))
    back = CovarianceSpec.from_dict(data)
    np.testing.assert_array_equal(back.spectrum, c.spectrum)
    np.testing.assert_array_equal(back.basis, c.basis)
    assert back.kind == c.kind
    assert set(data) == {"dim", "spectrum", "basis", "kind"}


def test_build_tags():
    assert build({"name": "spike", "index": "last"}, 7).matrix()[6, 6] == 7
    assert build({"name": "lowrank", "fraction": 0.5}, 80).rank() == 40
    rot = build({"name": "powerlaw", "p": 0.9, "order": "rotated", "seed": 4}, 6)
    rot2 = build({"name": "powerlaw", "p": 0.9, "order": "rotated", "seed": 4}, 6)
    np.testing.assert_array_equal(rot.basis, rot2.basis)
    assert rot.label != build({"name": "powerlaw", "p": 0.9, "order": "reversed"}, 6).label
    with pytest.raises(InvalidArgumentError):
        build({"name": "nope"}, 3)
    with pytest.raises(InvalidArgumentError):
        build({"name": "isotropic", "order": "sideways"}, 3)
