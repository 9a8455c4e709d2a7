import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridyn.quantum_core import (
    SIGMA_MINUS,
    SIGMA_X,
    SIGMA_Z,
    MeasurementChannel,
    dissipator,
    exp_antihermitian,
    hermitian_eigen,
    innovation,
    is_hermitian,
    kron,
    partial_trace,
    pure_state,
    purity,
    random_density_matrix,
    random_hermitian,
    random_matrix,
    validate_density_matrix,
)

I2 = np.eye(2)
seeds = st.integers(0, 2**32 - 1)
dims = st.integers(2, 6)


def test_dissipator_commuting_gives_zero():
    assert np.allclose(dissipator(SIGMA_Z, I2 / 2), 0)


def test_dissipator_lowering_operator():
    rho = np.diag([0, 1]).astype(complex)
    expected = np.diag([1, -1])
    assert np.allclose(dissipator(SIGMA_MINUS, rho), expected, atol=1e-15)


def test_dissipator_dimension_mismatch():
    with pytest.raises(ValueError):
        dissipator(SIGMA_Z, np.eye(3))


def test_innovation_eigenprojector_fixed_point():
    assert np.allclose(innovation(SIGMA_Z, pure_state([1, 0])), 0)


def test_innovation_plus_state():
    assert np.allclose(innovation(SIGMA_Z, pure_state([1, 1])), SIGMA_Z, atol=1e-15)


def test_innovation_dimension_mismatch():
    with pytest.raises(ValueError):
        innovation(np.eye(3), I2 / 2)


@given(seeds, dims)
def test_superoperators_traceless(seed, d):
    r = np.random.default_rng(seed)
    c, rho = random_matrix(d, r), random_density_matrix(d, r)
    assert abs(np.trace(dissipator(c, rho))) <= 1e-12 * max(1, np.abs(c).max() ** 2)
    assert abs(np.trace(innovation(c, rho))) <= 1e-12 * max(1, np.abs(c).max())


@given(seeds, dims)
def test_dissipator_hermitian_preserving(seed, d):
    r = np.random.default_rng(seed)
    c, h = random_matrix(d, r), random_hermitian(d, r)
    out = dissipator(c, h)
    assert np.abs(out - out.conj().T).max() <= 1e-12 * max(1, np.abs(c).max() ** 2 * np.abs(h).max())


@given(seeds, dims)
def test_dissipator_linear_innovation_not(seed, d):
    r = np.random.default_rng(seed)
    c = random_matrix(d, r)
    r1, r2 = random_density_matrix(d, r), random_density_matrix(d, r)
    mid = (r1 + r2) / 2
    assert np.allclose(dissipator(c, mid), (dissipator(c, r1) + dissipator(c, r2)) / 2, atol=1e-12)
    # innovation(mid) - mean = (m1 - m2)(r1 - r2)/4 with m_i = tr[(c + c^dag) r_i]
    gap = innovation(c, mid) - (innovation(c, r1) + innovation(c, r2)) / 2
    m1, m2 = (np.trace((c + c.conj().T) @ r).real for r in (r1, r2))
    assert np.allclose(gap, (m1 - m2) * (r1 - r2) / 4, atol=1e-12)


def test_hermitian_eigen_examples():
    w, v = hermitian_eigen(np.eye(3))
    assert np.allclose(w, 1) and np.allclose(v.conj().T @ v, np.eye(3))
    w, _ = hermitian_eigen(SIGMA_X)
    assert np.allclose(w, [-1, 1])
    w, v = hermitian_eigen(np.diag([3.0, -2.0]))
    assert np.allclose(w, [-2, 3]) and np.allclose(np.abs(v), [[0, 1], [1, 0]])


def test_hermitian_eigen_rejects_non_hermitian():
    with pytest.raises(ValueError):
        hermitian_eigen(SIGMA_MINUS)


@given(seeds, dims)
def test_hermitian_eigen_reconstruction(seed, d):
    m = random_hermitian(d, np.random.default_rng(seed))
    w, v = hermitian_eigen(m)
    assert np.all(np.diff(w) >= 0)
    assert np.abs(v @ np.diag(w) @ v.conj().T - m).max() <= 1e-10 * max(1, np.abs(m).max())


def test_exp_antihermitian_examples():
    assert np.allclose(exp_antihermitian(SIGMA_X, 0.0), I2)
    assert np.allclose(exp_antihermitian(SIGMA_Z, np.pi), -I2, atol=1e-15)
    with pytest.raises(ValueError):
        exp_antihermitian(SIGMA_MINUS, 1.0)


@given(seeds, dims, st.floats(-10, 10))
def test_exp_antihermitian_unitary_and_inverse(seed, d, s):
    h = random_hermitian(d, np.random.default_rng(seed))
    U = exp_antihermitian(h, s)
    assert np.abs(U.conj().T @ U - np.eye(d)).max() <= 1e-12
    assert np.abs(U @ exp_antihermitian(h, -s) - np.eye(d)).max() <= 1e-12


def test_exp_antihermitian_batched_phases():
    s = np.array([0.1, -0.7])
    U = exp_antihermitian(SIGMA_X, s)
    for k in range(2):
        assert np.allclose(U[k], exp_antihermitian(SIGMA_X, s[k]))


def test_kron_examples(rng):
    assert np.array_equal(kron(I2, I2), np.eye(4))
    a, b = random_matrix(2, rng), random_matrix(3, rng)
    assert np.trace(kron(a, b)) == pytest.approx(np.trace(a) * np.trace(b))
    assert np.array_equal(kron(SIGMA_Z, I2) @ kron(I2, SIGMA_X), kron(SIGMA_Z, SIGMA_X))


def test_partial_trace_product(rng):
    a, b = random_density_matrix(2, rng), random_density_matrix(3, rng)
    ab = kron(a, b)
    assert np.allclose(partial_trace(ab, (2, 3), 0), a)
    assert np.allclose(partial_trace(ab, (2, 3), 1), b)


def test_purity_and_validation():
    assert purity(pure_state([1, 1j])) == pytest.approx(1)
    assert purity(I2 / 2) == pytest.approx(0.5)
    validate_density_matrix(I2 / 2)
    with pytest.raises(ValueError):
        validate_density_matrix(np.diag([1.5, -0.5]))
    with pytest.raises(ValueError):
        validate_density_matrix(np.eye(2))
    assert is_hermitian(SIGMA_X) and not is_hermitian(SIGMA_MINUS)


def test_measurement_channel_checks():
    ch = MeasurementChannel(SIGMA_Z, 1)
    assert ch.eta == 1.0 and ch.c.dtype == complex
    with pytest.raises(ValueError):
        MeasurementChannel(SIGMA_Z, 1.5)
    with pytest.raises(ValueError):
        MeasurementChannel(np.ones((2, 3)), 0.5)
