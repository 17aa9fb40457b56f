import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust2bsde.spd import SpdError, SpdMatrix, as_spd, inv_sqrt, loewner_leq, sqrt


def test_sqrt_identity_and_diagonal():
    assert np.allclose(sqrt(SpdMatrix.identity(2)).entries, np.eye(2))
    assert np.allclose(sqrt(SpdMatrix.diag(4, 9)).entries, np.diag([2.0, 3.0]))


def test_sqrt_of_coupled_matrix():
    r = sqrt([[2, 1], [1, 2]]).entries
    assert np.allclose(r, [[1.36603, 0.36603], [0.36603, 1.36603]], atol=1e-5)


def test_inv_sqrt_examples():
    assert np.allclose(inv_sqrt(SpdMatrix.identity(1)).entries, [[1.0]])
    assert np.allclose(inv_sqrt(SpdMatrix.diag(4)).entries, [[0.5]])
    r = inv_sqrt([[2, 1], [1, 2]]).entries
    assert np.allclose(r, [[0.78868, -0.21132], [-0.21132, 0.78868]], atol=1e-5)


def test_loewner_examples():
    assert loewner_leq(SpdMatrix.diag(0.04), SpdMatrix.diag(0.09))
    a = as_spd([[0.05, 0.01], [0.01, 0.07]])
    assert loewner_leq(a, a)
    assert not loewner_leq(SpdMatrix.identity(2), SpdMatrix.diag(2, 0.5))


@pytest.mark.parametrize("bad", [[[1, 2], [0, 1]], [[1, 0], [0, -1]], [[0.0]], [[np.nan]]])
def test_rejects_non_spd(bad):
    with pytest.raises(SpdError):
        as_spd(bad)


def _random_spd(seed, d):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    w = 10.0 ** rng.uniform(-2, 1, d)
    return SpdMatrix((q * w) @ q.T)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_sqrt_round_trip(seed, d):
    a = _random_spd(seed, d)
    s = a.sqrt_array
    assert np.max(np.abs(s @ s - a.entries)) <= 1e-10 * max(1.0, np.abs(a.entries).max())
    assert np.allclose(a.inv_sqrt_array @ s, np.eye(d), atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
def test_loewner_matches_eigenvalue_oracle(seed, shift):
    a = _random_spd(seed, 2)
    b = SpdMatrix(a.entries + (shift - 0.5) * np.eye(2)) if np.min(a.eigenvalues) + shift - 0.5 > 1e-6 else a
    diff = np.linalg.eigvalsh(b.entries - a.entries)
    assert loewner_leq(a, b) == bool(diff.min() >= -1e-12)
