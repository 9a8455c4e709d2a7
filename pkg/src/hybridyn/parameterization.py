"""Diagonal versus non-diagonal parameterization of hybrid dynamics.

The diagonal form specifies measured operators ``c_k = sum_a Gamma[a, k] L_a``
with efficiencies ``eta_k`` and a real coupling ``G``. The non-diagonal form
uses the matrices

* ``D0 = Gamma Gamma^dag`` (quantum decoherence, ``m x m``),
* ``sigma = G / 2`` (classical noise amplitude, ``d x n``),
* ``D1 = sigma diag(sqrt(eta)) Gamma^dag`` (quantum-to-classical drift, ``d x m``),
* ``D2 = sigma sigma^T / 2`` (classical diffusion, ``d x d``).

A non-diagonal parameter set is consistent only if the decoherence-diffusion
trade-off ``2 D2 >= D1 D0^-1 D1^dag`` holds. Starting from the diagonal form it
holds automatically, with equality exactly at unit efficiency.

Going back from (D0, D1, D2) to a diagonal form is not unique (``Gamma`` is
fixed only up to a right unitary), so no inverse map is provided. A valid
``Gamma`` can be obtained from any factorization ``D0 = Gamma Gamma^dag``
(Cholesky or eigendecomposition).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Channel, HybridModel, constant
from .quantum_core import dagger, dissipator, expect, innovation

PSD_TOL = 1e-10
SATURATION_TOL = 1e-10
PINV_CUTOFF = 1e-12


@dataclass(frozen=True)
class DiagonalParams:
    """``Gamma`` (m, n) complex, ``eta`` (n,), ``G`` (d, n) real, ``L`` list of m operators."""

    Gamma: np.ndarray
    eta: np.ndarray
    G: np.ndarray
    L: Sequence[np.ndarray] = field(default=())

    def __post_init__(self):
        Gamma = np.atleast_2d(np.asarray(self.Gamma, dtype=complex))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        m, n = Gamma.shape
        if eta.shape != (n,):
            raise ValueError(f"eta must have shape ({n},) to match Gamma {Gamma.shape}, got {eta.shape}")
        if G.shape[1] != n:
            raise ValueError(f"G must have {n} columns to match Gamma {Gamma.shape}, got {G.shape}")
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("efficiencies must lie in [0, 1]")
        L = tuple(np.asarray(op, dtype=complex) for op in self.L)
        if L:
            if len(L) != m:
                raise ValueError(f"need {m} basis operators L, got {len(L)}")
            shapes = {op.shape for op in L}
            if len(shapes) != 1 or any(len(s) != 2 or s[0] != s[1] for s in shapes):
                raise ValueError(f"basis operators must be square and equal-sized, got {sorted(shapes)}")
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "L", L)

    @property
    def dims(self):
        """``(m, n, d)``: basis size, channel count, classical dimension."""
        m, n = self.Gamma.shape
        return m, n, self.G.shape[0]

    def measured_operators(self):
        """``c_k = sum_a Gamma[a, k] L_a`` for every channel."""
        if not self.L:
            raise ValueError("basis operators L are required to form c_k")
        L = np.stack(self.L)
        return list(np.einsum("ak,aij->kij", self.Gamma, L))


@dataclass(frozen=True)
class NonDiagonalParams:
    D0: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        D0 = np.asarray(self.D0, dtype=complex)
        D2 = np.asarray(self.D2, dtype=float)
        if np.max(np.abs(D0 - dagger(D0)), initial=0.0) > PSD_TOL:
            raise ValueError("D0 must be Hermitian")
        if D0.size and np.linalg.eigvalsh(D0)[0] < -PSD_TOL:
            raise ValueError("D0 must be positive semidefinite")
        if np.max(np.abs(D2 - D2.T), initial=0.0) > PSD_TOL:
            raise ValueError("D2 must be symmetric")
        if D2.size and np.linalg.eigvalsh(D2)[0] < -PSD_TOL:
            raise ValueError("D2 must be positive semidefinite")


def to_nondiagonal(p: DiagonalParams) -> NonDiagonalParams:
    """Map diagonal parameters to (D0, D1, D2, sigma)."""
    sigma = p.G / 2
    D0 = p.Gamma @ dagger(p.Gamma)
    D1 = (sigma * np.sqrt(p.eta)) @ dagger(p.Gamma)
    D2 = sigma @ sigma.T / 2
    return NonDiagonalParams(D0=hermitian_part(D0), D1=D1, D2=0.5 * (D2 + D2.T), sigma=sigma)


def hermitian_part(a):
    return 0.5 * (a + dagger(a))


@dataclass
class TradeoffReport:
    """Outcome of the decoherence-diffusion trade-off check.

    ``gap`` is ``2 D2 - D1 D0^-1 D1^dag``; ``psd_margin`` its smallest
    eigenvalue. ``pseudo_inverse`` is set when ``D0`` was singular and a
    pseudo-inverse (cutoff ``1e-12 * lambda_max``) replaced the inverse.
    """

    psd_margin: float
    saturated: bool
    pseudo_inverse: bool
    gap: np.ndarray
    d0_min_eigenvalue: float

    @property
    def consistent(self):
        return self.psd_margin >= -PSD_TOL

    def as_dict(self):
        return {
            "psd_margin": self.psd_margin,
            "saturated": self.saturated,
            "consistent": self.consistent,
            "pseudo_inverse": self.pseudo_inverse,
            "d0_min_eigenvalue": self.d0_min_eigenvalue,
            "gap_max_abs": float(np.max(np.abs(self.gap), initial=0.0)),
        }


def _d0_inverse(D0):
    w, v = np.linalg.eigh(D0)
    lam_max = max(float(np.max(np.abs(w), initial=0.0)), 0.0)
    if w.size and w[0] > PSD_TOL:
        return np.linalg.inv(D0), False, float(w[0])
    keep = w > PINV_CUTOFF * lam_max
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (v * inv_w) @ dagger(v), True, float(w[0]) if w.size else 0.0


def tradeoff_margin(q: NonDiagonalParams) -> TradeoffReport:
    """Smallest eigenvalue of ``2 D2 - D1 D0^-1 D1^dag`` and saturation flag."""
    D0inv, pinv, lam0 = _d0_inverse(np.asarray(q.D0, dtype=complex))
    D1 = np.asarray(q.D1, dtype=complex)
    gap = hermitian_part(2 * np.asarray(q.D2, dtype=complex) - D1 @ D0inv @ dagger(D1))
    margin = float(np.linalg.eigvalsh(gap)[0]) if gap.size else 0.0
    saturated = bool(np.max(np.abs(gap), initial=0.0) <= SATURATION_TOL)
    return TradeoffReport(margin, saturated, pinv, gap, lam0)


def tradeoff_closed_form(p: DiagonalParams):
    """``G diag(eta) G^T / 4``, which equals ``D1 D0^-1 D1^dag`` for invertible ``Gamma Gamma^dag``."""
    return (p.G * p.eta) @ p.G.T / 4


def generalized_inverse(sigma):
    """Right inverse ``sigma^T (sigma sigma^T)^-1`` of a full-row-rank ``sigma``."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    gram = sigma @ sigma.T
    w = np.linalg.eigvalsh(gram)
    scale = float(w[-1]) if w.size else 0.0
    if not w.size or w[0] <= PINV_CUTOFF * max(scale, np.finfo(float).tiny):
        raise ValueError(
            f"sigma sigma^T is rank deficient (lambda_min = {w[0] if w.size else 0.0:.3e}); "
            "sigma needs full row rank"
        )
    return np.linalg.solve(gram, sigma).T


def model_from_params(p: DiagonalParams, H0=None, F=None, name="from_params") -> HybridModel:
    """z-independent :class:`HybridModel` with ``c_k = sum_a Gamma[a, k] L_a``."""
    cs = p.measured_operators()
    D = cs[0].shape[0]
    m, n, d = p.dims
    H = np.zeros((D, D), dtype=complex) if H0 is None else np.asarray(H0, dtype=complex)
    F_fn = None if F is None else (F if callable(F) else constant(np.asarray(F, dtype=float)))
    return HybridModel(
        hilbert_dim=D,
        classical_dim=d,
        H0=constant(H),
        channels=tuple(Channel(constant(c), float(e)) for c, e in zip(cs, p.eta)),
        F=F_fn,
        G=constant(p.G),
        name=name,
    )


@dataclass
class DriftEquivalenceReport:
    """Discrepancies between the diagonal and expanded forms at one point.

    ``quantum_drift``, ``quantum_noise`` and ``classical_drift`` compare the
    Gamma-expanded (D0, D1) forms with the diagonal form and together decide
    ``passed``. ``sigma_inverse_noise`` compares the noise written through
    ``sigma^-1 D1`` (with ``D1^*`` on the ``L rho`` side and ``D1`` on the
    ``rho L^dag`` side); it reproduces the diagonal noise only when
    ``sigma^-1 sigma = I``, so it is reported separately and never gates the
    result. It is ``None`` when ``sigma`` has no right inverse.
    """

    quantum_drift: float
    quantum_noise: float
    classical_drift: float
    classical_noise: float
    sigma_inverse_noise: Optional[float]
    sigma_inverse_exact: bool
    tol: float = 1e-10

    @property
    def max_discrepancy(self):
        return max(self.quantum_drift, self.quantum_noise, self.classical_drift, self.classical_noise)

    @property
    def passed(self):
        return self.max_discrepancy <= self.tol

    def as_dict(self):
        return {
            "quantum_drift": self.quantum_drift,
            "quantum_noise": self.quantum_noise,
            "classical_drift": self.classical_drift,
            "classical_noise": self.classical_noise,
            "sigma_inverse_noise": self.sigma_inverse_noise,
            "sigma_inverse_exact": self.sigma_inverse_exact,
            "max_discrepancy": self.max_discrepancy,
            "passed": self.passed,
        }


def _maxabs(a):
    return float(np.max(np.abs(a), initial=0.0))


def drift_equivalence_check(p: DiagonalParams, rho, z=None, H0=None, F=None) -> DriftEquivalenceReport:
    """Compare drift and noise coefficients of the two parameterizations at ``(rho, z)``.

    The diagonal side is evaluated from a :class:`HybridModel` built with
    ``c_k = sum_a Gamma[a, k] L_a``; the expanded side only ever touches
    ``L_a``, ``D0``, ``D1`` and ``sigma``.
    """
    model = model_from_params(p, H0=H0, F=F)
    m, n, d = p.dims
    z = np.zeros(d) if z is None else np.asarray(z, dtype=float).reshape(d)
    rho = np.asarray(rho, dtype=complex)
    q = to_nondiagonal(p)
    L = list(p.L)
    H = model.hamiltonian(z)
    cs = model.jump_operators(z)
    eta = model.efficiencies(z)
    Gz = model.coupling(z)

    # diagonal form
    comm = -1j * (H @ rho - rho @ H)
    drift_diag = comm + sum(dissipator(c, rho) for c in cs)
    noise_diag = [np.sqrt(eta[k]) * innovation(cs[k], rho) for k in range(n)]
    means = np.array([expect(c + dagger(c), rho).real for c in cs])
    cl_drift_diag = model.drift(z) + Gz @ (np.sqrt(eta) * means) / 2
    cl_noise_diag = Gz / 2

    # expanded form
    Ld = [dagger(op) for op in L]
    drift_exp = comm.copy()
    for a in range(m):
        for b in range(m):
            LdL = Ld[b] @ L[a]
            drift_exp = drift_exp + q.D0[a, b] * (L[a] @ rho @ Ld[b] - 0.5 * (LdL @ rho + rho @ LdL))
    mean_L = np.array([expect(op, rho) for op in L])
    centred = [L[a] - mean_L[a] * np.eye(L[a].shape[0]) for a in range(m)]
    noise_exp = []
    for k in range(n):
        s = np.sqrt(p.eta[k])
        term = sum(s * p.Gamma[a, k] * centred[a] @ rho + s * np.conj(p.Gamma[a, k]) * rho @ dagger(centred[a]) for a in range(m))
        noise_exp.append(term)
    cl_drift_exp = model.drift(z) + (np.conj(q.D1) @ mean_L + q.D1 @ np.conj(mean_L)).real
    cl_noise_exp = q.sigma

    sig_noise, sig_exact = None, False
    try:
        sinv = generalized_inverse(q.sigma)
    except ValueError:
        sinv = None
    if sinv is not None:
        sig_exact = _maxabs(sinv @ q.sigma - np.eye(n)) <= 1e-10
        left = sinv @ np.conj(q.D1)
        right = sinv @ q.D1
        sig_terms = [
            sum(left[k, a] * centred[a] @ rho + right[k, a] * rho @ dagger(centred[a]) for a in range(m))
            for k in range(n)
        ]
        sig_noise = max(_maxabs(x - y) for x, y in zip(sig_terms, noise_diag))

    return DriftEquivalenceReport(
        quantum_drift=_maxabs(drift_exp - drift_diag),
        quantum_noise=max((_maxabs(x - y) for x, y in zip(noise_exp, noise_diag)), default=0.0),
        classical_drift=_maxabs(cl_drift_exp - cl_drift_diag),
        classical_noise=_maxabs(cl_noise_exp - cl_noise_diag),
        sigma_inverse_noise=sig_noise,
        sigma_inverse_exact=sig_exact,
    )


def random_diagonal_params(rng, m, n, d, hilbert_dim=2, eta=None, square=False):
    """Random diagonal-form parameters (used by property checks and the CLI demo)."""
    if square:
        n = m
    Gamma = rng.normal(size=(m, n)) + 1j * rng.normal(size=(m, n))
    eta = rng.uniform(0, 1, size=n) if eta is None else np.broadcast_to(np.asarray(eta, float), (n,)).copy()
    G = rng.normal(size=(d, n))
    L = [rng.normal(size=(hilbert_dim,) * 2) + 1j * rng.normal(size=(hilbert_dim,) * 2) for _ in range(m)]
    return DiagonalParams(Gamma=Gamma, eta=eta, G=G, L=L)
