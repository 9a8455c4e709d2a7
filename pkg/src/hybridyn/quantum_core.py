"""Dense linear algebra for small Hilbert spaces.

Every superoperator here broadcasts over leading axes, so ``rho`` may be a
single ``(d, d)`` matrix or a stack ``(..., d, d)`` of them. Operators such as
``c`` broadcast the same way, which is how the engine advances a whole batch
of trajectories in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERMITIAN_TOL = 1e-12

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|
IDENTITY_2 = np.eye(2, dtype=complex)


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def trace(a):
    """Trace over the last two axes."""
    return np.einsum("...ii->...", a)


def hermitize(a):
    return 0.5 * (a + dagger(a))


def _check_square(*mats):
    dims = set()
    for m in mats:
        m = np.asarray(m)
        if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
            raise ValueError(f"expected square matrices, got shape {m.shape}")
        dims.add(m.shape[-1])
    if len(dims) > 1:
        raise ValueError(f"dimension mismatch between operators: {sorted(dims)}")


def is_hermitian(m, tol=HERMITIAN_TOL):
    m = np.asarray(m)
    return bool(np.max(np.abs(m - dagger(m)), initial=0.0) <= tol)


def expect(op, rho):
    """``tr(op @ rho)`` without forming the product."""
    return np.einsum("...ij,...ji->...", op, rho)


def commutator(a, b):
    return a @ b - b @ a


def anticommutator(a, b):
    return a @ b + b @ a


def dissipator(c, rho):
    r"""Lindblad dissipator :math:`c\rho c^\dagger - \frac12\{c^\dagger c, \rho\}`.

    The result is traceless for any ``c`` and Hermitian whenever ``rho`` is.
    Linear in ``rho`` (unnormalized inputs are fine).
    """
    _check_square(c, rho)
    c = np.asarray(c)
    cd = dagger(c)
    cdc = cd @ c
    return c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)


def innovation(c, rho):
    r"""Measurement back-action :math:`c\rho + \rho c^\dagger - \mathrm{tr}[(c+c^\dagger)\rho]\rho`.

    Nonlinear in ``rho``; assumes unit trace. Output is traceless.
    """
    _check_square(c, rho)
    c = np.asarray(c)
    sym = c @ rho + rho @ dagger(c)
    mean = trace(sym).real
    return sym - mean[..., None, None] * rho


def hermitian_eigen(m, tol=1e-10):
    """Eigen-decomposition of a Hermitian matrix (or stack).

    Returns ascending eigenvalues and the unitary eigenvector matrix ``V`` with
    ``m = V diag(w) V^dagger``.
    """
    m = np.asarray(m)
    _check_square(m)
    if not is_hermitian(m, tol * max(1.0, float(np.max(np.abs(m), initial=0.0)))):
        raise ValueError("hermitian_eigen requires a Hermitian matrix")
    return np.linalg.eigh(m)


def exp_antihermitian(h, s=1.0):
    """Unitary ``exp(-i h s)`` for Hermitian ``h`` via eigendecomposition.

    ``s`` may be a scalar or an array broadcasting against the leading axes of
    ``h``; this is how per-trajectory feedback kicks are exponentiated.
    """
    w, v = hermitian_eigen(h, tol=HERMITIAN_TOL)
    s = np.asarray(s, dtype=float)
    phases = np.exp(-1j * w * s[..., None])
    return (v * phases[..., None, :]) @ dagger(v)


def kron(a, b):
    return np.kron(np.asarray(a), np.asarray(b))


def partial_trace(rho, dims, keep):
    """Reduced state of a bipartite ``rho`` on factor ``keep`` (0 or 1)."""
    da, db = dims
    r = np.asarray(rho).reshape(rho.shape[:-2] + (da, db, da, db))
    if keep == 0:
        return np.einsum("...ajbj->...ab", r)
    return np.einsum("...iaib->...ab", r)


def purity(rho):
    return np.einsum("...ij,...ji->...", rho, rho).real


def min_eigenvalue(rho):
    """Smallest eigenvalue of Hermitian stacks; closed form for qubits."""
    rho = np.asarray(rho)
    if rho.shape[-1] == 2:
        a = rho[..., 0, 0].real
        d = rho[..., 1, 1].real
        b = np.abs(rho[..., 0, 1])
        return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + b**2)
    return np.linalg.eigvalsh(hermitize(rho))[..., 0]


def validate_density_matrix(rho, herm_tol=1e-12, trace_tol=1e-10, pos_tol=-1e-8):
    """Raise ``ValueError`` unless ``rho`` is a valid density matrix."""
    rho = np.asarray(rho)
    _check_square(rho)
    if not np.all(np.isfinite(rho)):
        raise ValueError("density matrix has non-finite entries")
    herm_err = float(np.max(np.abs(rho - dagger(rho))))
    if herm_err > herm_tol:
        raise ValueError(f"density matrix not Hermitian (max deviation {herm_err:.3e})")
    tr_err = float(np.max(np.abs(trace(rho) - 1)))
    if tr_err > trace_tol:
        raise ValueError(f"density matrix trace deviates from 1 by {tr_err:.3e}")
    lam = float(np.min(min_eigenvalue(rho)))
    if lam < pos_tol:
        raise ValueError(f"density matrix not positive (lambda_min = {lam:.3e})")
    return rho


def pure_state(psi):
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def random_density_matrix(dim, rng, rank=None):
    """Random full-rank (or given-rank) density matrix from a Ginibre draw."""
    rank = dim if rank is None else rank
    a = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = a @ a.conj().T
    return hermitize(rho / np.trace(rho).real)


def random_matrix(dim, rng, scale=1.0):
    return scale * (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)))


def random_hermitian(dim, rng, scale=1.0):
    return hermitize(random_matrix(dim, rng, scale))


@dataclass(frozen=True)
class MeasurementChannel:
    """A detector: measured operator ``c`` (any square matrix) and efficiency ``eta``."""

    c: np.ndarray
    eta: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=complex)
        _check_square(c)
        if not np.all(np.isfinite(c)):
            raise ValueError("channel operator has non-finite entries")
        if not 0.0 <= float(self.eta) <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.eta}")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "eta", float(self.eta))
