import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppanns.common import (
    DimensionError,
    Perm,
    derive_seeds,
    elementwise,
    gen_invertible_matrix,
    gen_permutation,
    read_mat,
    read_perm,
    read_vec,
    sq_dist,
    to_bytes,
    write_mat,
    write_perm,
    write_vec,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("p,q,expected", [
    ((1.0, 0.0), (0.0, 0.0), 1.0),
    ((3.0, 4.0), (0.0, 0.0), 25.0),
    ((2.5, -1.0), (2.5, -1.0), 0.0),
])
def test_sq_dist_examples(p, q, expected):
    assert sq_dist(p, q) == expected


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_sq_dist_symmetric_nonnegative(p, q):
    assert sq_dist(p, q) == sq_dist(q, p)
    assert sq_dist(p, q) >= 0


def test_sq_dist_dim_mismatch():
    with pytest.raises(DimensionError):
        sq_dist([1.0, 2.0], [1.0])


def test_elementwise_mul():
    np.testing.assert_array_equal(elementwise("mul", [2, 3], [4, 5]), [8, 15])


def test_elementwise_div_floor():
    with pytest.raises(ZeroDivisionError):
        elementwise("div", [1.0, 1.0], [1.0, 1e-8])
    with pytest.raises(DimensionError):
        elementwise("add", [1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        elementwise("pow", [1.0], [1.0])


@pytest.mark.parametrize("d", [2, 8, 64])
def test_eq6_eq7_identities(d, rng):
    a, b, c, e = rng.uniform(0.5, 2.0, size=(4, d))
    one = np.ones(d)
    lhs = elementwise("sub", elementwise("mul", a + one, b + one), elementwise("mul", a - one, b - one))
    np.testing.assert_allclose(lhs, 2 * a + 2 * b, rtol=1e-12)
    left = elementwise("div", elementwise("mul", a, b), elementwise("mul", c, e))
    right = elementwise("mul", elementwise("div", a, c), elementwise("div", b, e))
    np.testing.assert_allclose(left, right, rtol=1e-12)
    np.testing.assert_allclose(elementwise("mul", elementwise("div", a, b), b), a, rtol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 6, 24, 100])
def test_invertible_matrix(n, rng):
    m, m_inv = gen_invertible_matrix(n, rng)
    assert m.shape == (n, n)
    assert np.max(np.abs(m @ m_inv - np.eye(n))) <= 1e-9
    assert np.linalg.cond(m) <= 1e6
    assert np.all(np.abs(m) <= 1.0)
    if n == 1:
        assert abs(m[0, 0]) >= 0.1


def test_invertible_matrix_rejects_bad_size(rng):
    with pytest.raises(ValueError):
        gen_invertible_matrix(0, rng)


def test_permutation_basics():
    p = gen_permutation(1, np.random.default_rng(0))
    assert p.mapping.tolist() == [0]
    a = gen_permutation(50, np.random.default_rng(7))
    b = gen_permutation(50, np.random.default_rng(7))
    assert a == b and hash(a) == hash(b)
    v = np.arange(50.0)
    np.testing.assert_array_equal(a.inverse().apply(a.apply(v)), v)
    with pytest.raises(ValueError):
        Perm(np.array([0, 0, 1]))


def test_derive_seeds_distinct_and_stable():
    s = derive_seeds(3, 5)
    assert len(set(s)) == 5
    assert s == derive_seeds(3, 5)


@given(arrays(np.float64, st.integers(0, 20), elements=finite))
def test_vec_roundtrip(v):
    raw = to_bytes(lambda f: write_vec(f, v))
    assert raw[:4] == np.uint32(v.shape[0]).astype("<u4").tobytes()
    np.testing.assert_array_equal(read_vec(io.BytesIO(raw)), v)


def test_mat_and_perm_roundtrip(rng):
    m = rng.standard_normal((3, 5))
    raw = to_bytes(lambda f: write_mat(f, m))
    assert len(raw) == 8 + 8 * 15
    np.testing.assert_array_equal(read_mat(io.BytesIO(raw)), m)
    p = gen_permutation(9, rng)
    assert read_perm(io.BytesIO(to_bytes(lambda f: write_perm(f, p)))) == p


def test_truncated_read():
    with pytest.raises(EOFError):
        read_vec(io.BytesIO(b"\x03\x00\x00\x00" + b"\x00" * 8))
