"""Deterministic master equations: measurement average and Markovian feedback.

Averaging the measurement SME over the noise gives the Lindbladian with
Hamiltonian ``H0`` and jump operators ``c_k``. Instantaneous feedback
``exp(-i b_k dr_k)`` applied after each measurement step averages to a
Lindbladian with effective potential

    V_eff = sum_k (b_k c_k + c_k^dag b_k) / (4 sqrt(eta_k))

and jump operators ``b_k / (2 sqrt(eta_k)) + i c_k`` (:func:`feedback_generator`).
The ``+ i c_k`` sign is the one fixed by the kick convention ``exp(-i b dr)``:
the combined jump equals ``c_k - i b_k / 2`` up to a phase at unit efficiency.
That closed form is the exact average of the stochastic feedback dynamics at
unit efficiency. For ``eta_k < 1`` the exact average of the engine's unraveling
is :func:`unraveling_average_generator`; the two coincide when every
``eta_k = 1``.

Superoperators use the row-major vectorization ``vec(A X B) = kron(A, B^T) vec(X)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .quantum_core import (
    HERMITIAN_TOL,
    MeasurementChannel,
    commutator,
    dagger,
    dissipator,
    hermitize,
    min_eigenvalue,
    trace,
)
from .sde_engine import IntegrationError

NULL_CUTOFF = 1e-10


@dataclass(frozen=True)
class LindbladGenerator:
    """``d rho/dt = -i[H_total, rho] + sum_j D[L_j](rho)``."""

    H_total: np.ndarray
    jump_ops: tuple = ()

    def __post_init__(self):
        H = np.asarray(self.H_total, dtype=complex)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"H_total must be square, got shape {H.shape}")
        if np.max(np.abs(H - dagger(H)), initial=0.0) > HERMITIAN_TOL:
            raise ValueError("H_total must be Hermitian")
        jumps = tuple(np.asarray(L, dtype=complex) for L in self.jump_ops)
        for L in jumps:
            if L.shape != H.shape:
                raise ValueError(f"jump operator shape {L.shape} does not match H_total {H.shape}")
        object.__setattr__(self, "H_total", H)
        object.__setattr__(self, "jump_ops", jumps)

    @property
    def dim(self):
        return self.H_total.shape[0]

    def apply(self, rho):
        rho = np.asarray(rho, dtype=complex)
        out = -1j * commutator(self.H_total, rho)
        for L in self.jump_ops:
            out = out + dissipator(L, rho)
        return out

    __call__ = apply

    def superoperator(self):
        """Dense ``D^2 x D^2`` matrix acting on row-major ``vec(rho)``."""
        D = self.dim
        eye = np.eye(D)
        H = self.H_total
        S = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
        for L in self.jump_ops:
            LdL = dagger(L) @ L
            S = S + np.kron(L, L.conj()) - 0.5 * (np.kron(LdL, eye) + np.kron(eye, LdL.T))
        return S

    def norm(self):
        """Spectral norm of the superoperator (sets the integration step heuristic)."""
        return float(np.linalg.norm(self.superoperator(), 2))

    def total_decoherence_rate(self):
        """Sum of Hilbert-Schmidt norms of the jump operators (diagnostic only)."""
        return float(sum(np.linalg.norm(L) for L in self.jump_ops))


def _as_channels(channels) -> list:
    out = []
    for ch in channels:
        if isinstance(ch, MeasurementChannel):
            out.append(ch)
        elif isinstance(ch, tuple) and len(ch) == 2:
            out.append(MeasurementChannel(*ch))
        else:
            out.append(MeasurementChannel(ch, 1.0))
    return out


def _feedback_pairs(channels, feedback_ops):
    chans = _as_channels(channels)
    bs = [np.asarray(b, dtype=complex) for b in feedback_ops]
    if len(bs) != len(chans):
        raise ValueError(f"need one feedback operator per channel ({len(chans)}), got {len(bs)}")
    pairs = []
    for k, (ch, b) in enumerate(zip(chans, bs)):
        if b.shape != ch.c.shape:
            raise ValueError(f"feedback operator {k} has shape {b.shape}, expected {ch.c.shape}")
        if np.max(np.abs(b - dagger(b)), initial=0.0) > HERMITIAN_TOL:
            raise ValueError(f"feedback operator {k} must be Hermitian")
        nonzero = bool(np.any(b != 0))
        if ch.eta == 0 and nonzero:
            raise ValueError(f"channel {k} has zero efficiency: there is no signal to feed back through b_{k}")
        pairs.append((ch.c, ch.eta, b, nonzero))
    return pairs


def averaged_measurement_generator(H0, channels) -> LindbladGenerator:
    """Noise average of the measurement SME: jump operators are the ``c_k``."""
    return LindbladGenerator(H0, tuple(ch.c for ch in _as_channels(channels)))


def effective_potential(channels, feedback_ops):
    """``sum_k (b_k c_k + c_k^dag b_k) / (4 sqrt(eta_k))``.

    Channels whose ``b_k`` vanishes contribute nothing (even at zero efficiency);
    a nonzero ``b_k`` with ``eta_k = 0`` raises ``ValueError``.
    """
    pairs = _feedback_pairs(channels, feedback_ops)
    D = pairs[0][0].shape[0] if pairs else 0
    V = np.zeros((D, D), dtype=complex)
    for c, eta, b, nonzero in pairs:
        if nonzero:
            V = V + (b @ c + dagger(c) @ b) / (4 * math.sqrt(eta))
    return hermitize(V)


def feedback_generator(H0, channels, feedback_ops) -> LindbladGenerator:
    """Markovian-feedback Lindbladian in manifest form.

    ``H_total = H0 + V_eff`` and jump operators ``b_k / (2 sqrt(eta_k)) + i c_k``.
    """
    H = np.asarray(H0, dtype=complex) + effective_potential(channels, feedback_ops)
    jumps = []
    for c, eta, b, nonzero in _feedback_pairs(channels, feedback_ops):
        jumps.append(b / (2 * math.sqrt(eta)) + 1j * c if nonzero else c)
    return LindbladGenerator(H, tuple(jumps))


def unraveling_average_generator(H0, channels, feedback_ops) -> LindbladGenerator:
    """Exact noise average of measurement plus instantaneous feedback at any efficiency.

    With the SME back-action ``sqrt(eta) M[c] dW`` and kicks ``exp(-i b dr)``,
    the averaged generator is ``-i[H0,.] - (i/2)[b, c . + . c^dag] + D[c] +
    D[b]/(4 eta)``. In Lindblad form this is ``H0 + (b c + c^dag b)/4`` with
    jump operators ``b/(2 sqrt(eta)) + i sqrt(eta) c`` and ``sqrt(1 - eta) c``.
    Identical to :func:`feedback_generator` when every ``eta_k = 1``.
    """
    H = np.asarray(H0, dtype=complex).copy()
    jumps = []
    for c, eta, b, nonzero in _feedback_pairs(channels, feedback_ops):
        if not nonzero:
            jumps.append(c)
            continue
        H = H + (b @ c + dagger(c) @ b) / 4
        jumps.append(b / (2 * math.sqrt(eta)) + 1j * math.sqrt(eta) * c)
        if eta < 1:
            jumps.append(math.sqrt(1 - eta) * c)
    return LindbladGenerator(hermitize(H), tuple(jumps))


def feedback_average_terms(channels, feedback_ops, rho):
    """Separated form ``-(i/(2 sqrt(eta)))[b, c rho + rho c^dag] + D[c] + D[b]/(4 eta)``, summed over k."""
    out = 0
    for c, eta, b, _ in _feedback_pairs(channels, feedback_ops):
        s = math.sqrt(eta)
        out = out - 1j / (2 * s) * commutator(b, c @ rho + rho @ dagger(c))
        out = out + dissipator(c, rho) + dissipator(b, rho) / (4 * eta)
    return out


def feedback_identity_discrepancy(channels, feedback_ops, rho):
    """Max entrywise gap between the separated and the manifest Lindblad forms.

    Left side: :func:`feedback_average_terms`. Right side:
    ``-i[V_eff, rho] + sum_k D[b_k/(2 sqrt(eta_k)) + i c_k](rho)``.
    """
    rho = np.asarray(rho, dtype=complex)
    lhs = feedback_average_terms(channels, feedback_ops, rho)
    V = effective_potential(channels, feedback_ops)
    rhs = -1j * commutator(V, rho)
    for c, eta, b, nonzero in _feedback_pairs(channels, feedback_ops):
        rhs = rhs + dissipator(b / (2 * math.sqrt(eta)) + 1j * c if nonzero else c, rho)
    return float(np.max(np.abs(lhs - rhs), initial=0.0))


def measurement_generator_for(model, z=None) -> LindbladGenerator:
    z = None if z is None else np.asarray(z, dtype=float)
    return averaged_measurement_generator(
        model.hamiltonian(z), [model.channel(k, z) for k in range(model.n_channels)]
    )


def feedback_generator_for(model, z=None, exact_average=False) -> LindbladGenerator:
    """Feedback Lindbladian of a registry model (``exact_average`` selects the any-efficiency form)."""
    if model.feedback_ops is None:
        raise ValueError(f"model {model.name!r} has no feedback operators")
    chans = [model.channel(k, z) for k in range(model.n_channels)]
    build = unraveling_average_generator if exact_average else feedback_generator
    return build(model.hamiltonian(z), chans, model.feedback(z))


@dataclass
class LindbladSolution:
    times: np.ndarray
    states: np.ndarray
    dt: float
    step_bound: float

    @property
    def within_step_heuristic(self):
        """Whether ``dt <= 1e-2 / ||generator||``."""
        return self.dt <= self.step_bound

    def at(self, t):
        """State at the stored time closest to ``t``."""
        return self.states[int(np.argmin(np.abs(self.times - t)))]


def _rk4_propagator(S, h):
    hS = h * S
    P = np.eye(S.shape[0], dtype=complex)
    term = P
    for j in range(1, 5):
        term = term @ hS / j
        P = P + term
    return P


def integrate_lindblad(
    gen: LindbladGenerator,
    rho0,
    dt: float,
    T: float,
    record_times: Optional[Sequence[float]] = None,
    positivity_tol: float = -1e-8,
) -> LindbladSolution:
    """Classical RK4 on the master equation.

    For a linear generator one RK4 step is the degree-4 Taylor polynomial of
    ``exp(dt S)``, applied here as a precomputed matrix. States are stored on
    every step unless ``record_times`` is given (nearest grid step is used).
    Raises :class:`IntegrationError` if a state leaves the set of density
    matrices (eigenvalue below ``positivity_tol`` or trace drift above 1e-10).
    """
    if dt <= 0 or T < 0:
        raise ValueError("dt must be positive and T non-negative")
    rho0 = np.asarray(rho0, dtype=complex)
    D = gen.dim
    S = gen.superoperator()
    norm = float(np.linalg.norm(S, 2))
    bound = 1e-2 / norm if norm > 0 else math.inf
    n_steps = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    if record_times is None:
        record = np.arange(n_steps + 1)
    else:
        record = np.clip(np.rint(np.asarray(record_times, float) / dt).astype(int), 0, n_steps)
    want = set(record.tolist())
    P = _rk4_propagator(S, dt)
    last_h = T - (n_steps - 1) * dt if n_steps else dt
    P_last = P if abs(last_h - dt) < 1e-15 else _rk4_propagator(S, last_h)
    v = rho0.reshape(D * D)
    stored = {0: rho0.copy()}
    for step in range(1, n_steps + 1):
        v = (P_last if step == n_steps else P) @ v
        if step in want:
            rho = v.reshape(D, D)
            t = min(step * dt, T)
            tr_err = abs(trace(rho) - trace(rho0))
            if tr_err > 1e-10:
                raise IntegrationError(f"trace drift {tr_err:.3e} at t={t:.6g}", t=t, step=step)
            lam = float(min_eigenvalue(hermitize(rho)))
            if lam < positivity_tol:
                raise IntegrationError(f"state lost positivity (lambda_min={lam:.3e}) at t={t:.6g}", t=t, step=step)
            stored[step] = rho.copy()
    steps = np.array(sorted(want))
    times = np.minimum(steps * dt, T)
    return LindbladSolution(times, np.stack([stored[s] for s in steps]), dt, bound)


@dataclass
class StationaryManifold:
    """Null space of the generator (singular-value cutoff ``1e-10``)."""

    basis: np.ndarray  # (k, D, D)
    singular_values: np.ndarray

    @property
    def dimension(self):
        return len(self.basis)

    def contains(self, rho, tol=1e-8):
        """True if ``rho`` lies in the span of the null space (residual <= tol)."""
        return self.residual(rho) <= tol

    def residual(self, rho):
        v = np.asarray(rho, dtype=complex).reshape(-1)
        B = self.basis.reshape(self.dimension, -1)
        coef = B.conj() @ v
        return float(np.linalg.norm(v - coef @ B))

    @property
    def state(self):
        """The unique stationary density matrix; raises if the manifold is degenerate."""
        if self.dimension != 1:
            raise ValueError(f"stationary manifold has dimension {self.dimension}; no unique state")
        rho = self.basis[0]
        rho = rho / trace(rho)
        return hermitize(rho)


def stationary_manifold(gen: LindbladGenerator, cutoff=NULL_CUTOFF) -> StationaryManifold:
    D = gen.dim
    _, s, vh = np.linalg.svd(gen.superoperator())
    null = vh[s <= cutoff].conj()
    return StationaryManifold(null.reshape(len(null), D, D), s)


def stationary_state(gen: LindbladGenerator, cutoff=NULL_CUTOFF):
    return stationary_manifold(gen, cutoff).state
