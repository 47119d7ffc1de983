import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpnet.errors import ParameterError, ShapeError
from bpnet.tensor import (
    flatten,
    hadamard,
    kronecker,
    make_rng,
    matmul,
    normal_init,
    reshape_matrix,
)


def test_reshape_row_major():
    m = reshape_matrix(np.array([1, 2, 3, 4, 5, 6.0]), 2, 3)
    assert m.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_reshape_singleton():
    assert reshape_matrix(np.array([7.0]), 1, 1).tolist() == [[7]]


def test_reshape_mismatch_names_both_sides():
    with pytest.raises(ShapeError, match=r"length 6.*\(4, 2\)"):
        reshape_matrix(np.arange(6.0), 4, 2)


def test_flatten_examples():
    assert flatten(np.array([[1, 2], [3, 4]])).tolist() == [1, 2, 3, 4]
    assert flatten(np.array([[0]])).tolist() == [0]
    with pytest.raises(ShapeError):
        flatten(np.zeros(3))


def test_flatten_is_a_copy():
    m = np.zeros((2, 2))
    v = flatten(m)
    v[0] = 5
    assert m[0, 0] == 0


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_reshape_flatten_inverse(d1, d2, seed):
    v = make_rng(seed).normal(size=d1 * d2)
    assert np.array_equal(flatten(reshape_matrix(v, d1, d2)), v)
    m = v.reshape(d1, d2)
    assert np.array_equal(reshape_matrix(flatten(m), d1, d2), m)


def test_matmul_examples():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert matmul(a, np.array([[0.0], [1]])).tolist() == [[2], [4]]
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_matches_triple_loop_exactly(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            s = 0.0
            for k in range(4):
                s += a[i, k] * b[k, j]
            ref[i, j] = s
    assert np.array_equal(matmul(a, b), ref)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    r = make_rng(seed)
    a, b, c = r.normal(size=(3, 4)), r.normal(size=(4, 5)), r.normal(size=(5, 2))
    assert np.allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=0, atol=1e-12)


def test_hadamard_examples():
    a = np.array([1.0, 2, 3])
    assert hadamard(a, np.array([0.0, 1, 2])).tolist() == [0, 2, 6]
    assert np.array_equal(hadamard(a, np.ones(3)), a)
    assert np.array_equal(hadamard(a, np.zeros(3)), np.zeros(3))
    with pytest.raises(ShapeError):
        hadamard(a, np.ones(2))


def test_kronecker_examples():
    a = np.array([[1, 2], [3, 4]])
    b = np.array([[0, 1], [1, 0]])
    assert kronecker(a, b).tolist() == [[0, 1, 0, 2], [1, 0, 2, 0], [0, 3, 0, 4], [3, 0, 4, 0]]
    assert np.array_equal(kronecker(np.array([[1]]), b), b)
    assert np.array_equal(kronecker(a, np.array([[1]])), a)
    with pytest.raises(ShapeError):
        kronecker(np.ones(3), b)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_kronecker_mixed_product(seed):
    r = make_rng(seed)
    a, c = r.normal(size=(2, 3)), r.normal(size=(3, 2))
    b, d = r.normal(size=(3, 2)), r.normal(size=(2, 4))
    lhs = kronecker(a, b) @ kronecker(c, d)
    assert np.allclose(lhs, kronecker(a @ c, b @ d), rtol=0, atol=1e-12)


def test_normal_init_deterministic():
    assert np.array_equal(normal_init(make_rng(42), (2, 2)), normal_init(make_rng(42), (2, 2)))


def test_normal_init_golden():
    # pins the generator: PCG64 + numpy's ziggurat normal sampler
    got = normal_init(make_rng(42), (3,))
    assert got.tolist() == pytest.approx([0.030471707975443137, -0.10399841062404956, 0.07504511958064573], abs=0)


def test_normal_init_statistics():
    s = normal_init(make_rng(0), (10**6,), 0.1)
    assert abs(s.mean()) < 1e-3
    assert abs(s.std() - 0.1) < 2e-3


def test_normal_init_single_and_errors():
    v = normal_init(make_rng(0), (1,))
    assert v.shape == (1,) and np.isfinite(v).all()
    with pytest.raises(ParameterError):
        normal_init(make_rng(0), (2,), 0.0)
    with pytest.raises(ParameterError):
        normal_init(make_rng(0), (2,), -1.0)
