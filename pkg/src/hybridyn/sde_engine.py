"""Ito integration of the coupled measurement / classical-feedback system.

All step functions accept either one state (``rho`` of shape ``(D, D)``, ``z``
of shape ``(d,)``) or a batch (``(B, D, D)`` and ``(B, d)``). The ensemble
harness uses the batched form; :func:`run_trajectory` the single one.

Three quantum schemes are available:

* ``"kraus"`` (default): the normalized Kraus-form map
  ``M rho M^dag + sum_k (1 - eta_k) c_k rho c_k^dag dt`` whose ``M`` carries
  the second-order Ito terms. Positive by construction, pure states stay pure
  at unit efficiency, and it agrees with Milstein to first order.
* ``"milstein"``: Euler-Maruyama plus the diagonal Milstein correction
  ``1/2 B_k'(B_k)(dW_k^2 - dt)`` for each innovation ``B_k = sqrt(eta_k) M[c_k]``.
* ``"euler"``: plain Euler-Maruyama.

Each is followed by Hermitization and trace renormalization. The classical
update is Euler-Maruyama. Coefficients are always taken at the left end of
the step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import HybridModel
from .quantum_core import dagger, hermitize, min_eigenvalue, trace

SCHEMES = ("kraus", "milstein", "euler")
MODES = ("hybrid", "markovian_feedback", "linear")
DEFAULT_POSITIVITY_THRESHOLD = -1e-6
MAX_STEPS = 10**8


class IntegrationError(RuntimeError):
    """A step produced an invalid state (non-finite or non-positive).

    ``indices`` lists the offending trajectories within the batch, when known.
    """

    def __init__(self, message, t=None, step=None, suggested_dt=None, indices=None):
        super().__init__(message)
        self.t = t
        self.step = step
        self.suggested_dt = suggested_dt
        self.indices = None if indices is None else [int(i) for i in indices]


# --------------------------------------------------------------------------
# random streams


class RngStream:
    """Reproducible Gaussian stream keyed by ``(master_seed, stream_index)``.

    Streams with distinct indices are independent (``SeedSequence`` spawn
    keys); the same key always reproduces the same draws, regardless of how
    the draws are chunked.
    """

    def __init__(self, master_seed: int, stream_index: int = 0):
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        self._gen = np.random.Generator(np.random.PCG64(self._seed_sequence(0)))

    def _seed_sequence(self, tag):
        return np.random.SeedSequence(
            entropy=self.master_seed % 2**64, spawn_key=(self.stream_index, tag)
        )

    def standard_normal(self, size):
        return self._gen.standard_normal(size)

    def auxiliary(self, tag: int = 1) -> np.random.Generator:
        """An independent generator for side draws (e.g. initial conditions)."""
        if tag == 0:
            raise ValueError("tag 0 is reserved for the Wiener increments")
        return np.random.Generator(np.random.PCG64(self._seed_sequence(tag)))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"


def wiener_increments(rng: RngStream, n: int, dt: float):
    """``n`` independent N(0, dt) draws."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return rng.standard_normal(n) * math.sqrt(dt)


# --------------------------------------------------------------------------
# state containers


@dataclass
class HybridState:
    rho: np.ndarray
    z: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=complex)
        self.z = np.asarray(self.z, dtype=float)


@dataclass
class StepIncrements:
    """Wiener increments and signal increments; ``dr`` is NaN where unavailable."""

    dW: np.ndarray
    dr: np.ndarray
    available: np.ndarray


def _state_arrays(model, rho, z):
    rho = np.asarray(rho, dtype=complex)
    single = rho.ndim == 2
    rho_b = rho[None] if single else rho
    z = np.zeros(model.classical_dim) if z is None else np.asarray(z, dtype=float)
    return rho_b, z.reshape(rho_b.shape[0], model.classical_dim), single


def _noise_arrays(x, batch, n):
    x = np.asarray(x, dtype=float)
    return x.reshape(batch, n)


# --------------------------------------------------------------------------
# kernels (batched: rho (B, D, D), z (B, d), weights (B, n))


def _renormalize(rho):
    rho = hermitize(rho)
    return rho / trace(rho).real[:, None, None]


def _channel_means(cs, rho):
    """``tr[(c_k + c_k^dagger) rho]`` for every channel, shape (B, n)."""
    if not cs:
        return np.zeros((rho.shape[0], 0))
    return np.stack([2.0 * np.einsum("...ij,...ji->...", c, rho).real for c in cs], axis=-1)


def _measurement_update(H, cs, eta, rho, a, dt, scheme):
    """One quantum step driven by the signal weights ``a_k = 2 eta_k dr_k``.

    In terms of the Wiener increments ``a_k = eta_k <c_k + c_k^dag> dt +
    sqrt(eta_k) dW_k``; zero-efficiency channels have ``a_k = 0``. Returns the
    Hermitized, trace-normalized state.
    """
    if scheme == "kraus":
        return _kraus_update(H, cs, eta, rho, a, dt)
    hr = H @ rho
    drift = -1j * (hr - dagger(hr))
    out = rho.copy()
    for k, c in enumerate(cs):
        cd = dagger(c)
        crho = c @ rho
        cdc_rho = (cd @ c) @ rho
        drift = drift + crho @ cd - 0.5 * (cdc_rho + dagger(cdc_rho))
        s = crho + dagger(crho)
        e = trace(s).real
        w = a[:, k] - eta[:, k] * e * dt  # sqrt(eta) dW
        m = s - e[:, None, None] * rho
        out = out + m * w[:, None, None]
        if scheme == "milstein":
            cm = c @ m
            sm = cm + dagger(cm)
            bb = sm - trace(sm).real[:, None, None] * rho - e[:, None, None] * m
            corr = 0.5 * (w * w - eta[:, k] * dt)
            out = out + bb * corr[:, None, None]
    out = out + drift * dt
    return _renormalize(out)


def _kraus_update(H, cs, eta, rho, a, dt):
    """Normalized Kraus-form step ``M rho M^dag + sum_k (1 - eta_k) c_k rho c_k^dag dt``.

    ``M = I - (iH + 1/2 sum c^dag c) dt + sum_k c_k a_k
    + 1/2 sum_kl c_k c_l (a_k a_l - delta_kl eta_k dt)``. Agrees with the
    Milstein expansion to first order and is completely positive by
    construction: pure states stay pure at unit efficiency.
    """
    B, D = rho.shape[0], rho.shape[-1]
    gen = 1j * np.asarray(H) + 0.5 * sum((dagger(c) @ c for c in cs), np.zeros((D, D)))
    M = np.eye(D) - gen * dt
    M = np.broadcast_to(M, (B, D, D))
    for k, c in enumerate(cs):
        M = M + c * a[:, k, None, None]
        for l, c2 in enumerate(cs):
            coef = a[:, k] * a[:, l]
            if k == l:
                coef = coef - eta[:, k] * dt
            M = M + (c @ c2) * (0.5 * coef)[:, None, None]
    mr = M @ rho
    out = mr @ dagger(M)
    for k, c in enumerate(cs):
        lost = (1.0 - eta[:, k]) * dt
        if np.any(lost):
            out = out + (c @ rho @ dagger(c)) * lost[:, None, None]
    return _renormalize(out)


def _signal(means, eta, dW, dt):
    avail = eta > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        dr = np.where(avail, 0.5 * means * dt + dW / (2.0 * np.sqrt(np.where(avail, eta, 1.0))), np.nan)
    return dr, np.broadcast_to(avail, dr.shape)


def _classical_update(model, z, means, eta, dW, dt):
    if model.classical_dim == 0:
        return z
    F = model.drift(z)
    G = model.coupling(z)
    # uses sqrt(eta) dr = sqrt(eta)/2 <c+c^dag> dt + dW/2; never divides by sqrt(eta)
    forcing = 0.5 * np.sqrt(eta) * means * dt + 0.5 * dW
    return z + F * dt + np.einsum("...ak,...k->...a", G, forcing)


def _bad_indices(mask):
    mask = np.asarray(mask)
    return np.flatnonzero(mask.reshape(-1)) if mask.ndim else ([0] if mask else [])


def _check_finite(rho, t, dt, step=None):
    ok = np.isfinite(rho).all(axis=(-2, -1))
    if not np.all(ok):
        raise IntegrationError(
            f"non-finite state at t={t:.6g}; try a smaller dt (e.g. {dt / 10:.3g})",
            t=t,
            step=step,
            suggested_dt=dt / 10,
            indices=_bad_indices(~ok),
        )


def _check_positive(rho, threshold, t, dt, step=None):
    lams = min_eigenvalue(rho)
    lam = float(np.min(lams))
    if lam < threshold:
        raise IntegrationError(
            f"positivity violated at t={t:.6g}: lambda_min={lam:.3e} < {threshold:.1e}; "
            f"try a smaller dt (e.g. {dt / 10:.3g})",
            t=t,
            step=step,
            suggested_dt=dt / 10,
            indices=_bad_indices(lams < threshold),
        )


def _feedback_unitary(bs, dr):
    """``exp(-i sum_k b_k dr_k)`` for a batch; ``dr`` (B, n) finite."""
    if len(bs) == 1 and bs[0].ndim == 2:
        w, v = np.linalg.eigh(bs[0])
        phases = np.exp(-1j * w[None, :] * dr[:, :1])
        return (v[None] * phases[:, None, :]) @ dagger(v)[None]
    h = sum(b * dr[:, k, None, None] for k, b in enumerate(bs))
    h = np.broadcast_to(h, (dr.shape[0],) + np.shape(h)[-2:])
    w, v = np.linalg.eigh(hermitize(h))
    return (v * np.exp(-1j * w)[:, None, :]) @ dagger(v)


def _check_feedback(model, eta, bs):
    if bs is None:
        raise ValueError(f"model {model.name!r} has no feedback operators")
    for k, b in enumerate(bs):
        if np.any(eta[..., k] <= 0) and np.any(b != 0):
            raise ValueError(
                f"channel {k} has zero efficiency but a non-zero feedback operator: "
                "there is no signal to feed back"
            )


def _step_batch(model, rho, z, dW, dt, scheme, mode):
    """Advance a batch one step. Returns (rho', z', dr, available)."""
    H = model.hamiltonian(z)
    cs = model.jump_operators(z)
    eta = np.broadcast_to(model.efficiencies(z), dW.shape)
    means = _channel_means(cs, rho)
    dr, avail = _signal(means, eta, dW, dt)
    a = eta * means * dt + np.sqrt(eta) * dW
    new_rho = _measurement_update(H, cs, eta, rho, a, dt, scheme)
    if mode == "markovian_feedback":
        bs = model.feedback(z)
        _check_feedback(model, eta, bs)
        U = _feedback_unitary(bs, np.where(avail, dr, 0.0))
        new_rho = _renormalize(U @ new_rho @ dagger(U))
        new_z = z
    else:
        new_z = _classical_update(model, z, means, eta, dW, dt)
    return new_rho, new_z, dr, avail


def _linear_batch(model, rho_t, z, dr, dt, milstein=True):
    H = model.hamiltonian(z)
    cs = model.jump_operators(z)
    eta = np.broadcast_to(model.efficiencies(z), dr.shape)
    hr = H @ rho_t
    out = rho_t + (-1j * (hr - rho_t @ H)) * dt
    for k, c in enumerate(cs):
        cd = dagger(c)
        cdc = cd @ c
        out = out + (c @ rho_t @ cd - 0.5 * (cdc @ rho_t + rho_t @ cdc)) * dt
        ek = eta[:, k]
        if not np.any(ek > 0):
            continue
        drk = np.where(ek > 0, dr[:, k], 0.0)
        crt = c @ rho_t + rho_t @ cd
        out = out + crt * (2.0 * ek * drk)[:, None, None]
        if milstein:
            c2 = c @ crt + crt @ cd
            corr = 0.5 * (4.0 * ek**2 * drk**2 - ek * dt)
            out = out + c2 * corr[:, None, None]
    return out


class _ConstantKernel:
    """Kraus step and feedback kick precompiled as superoperators.

    Valid when H0, every c_k, eta_k and b_k are z-independent. The batch is
    held as ``R`` of shape ``(D*D, B)`` (row-major vec, trajectories last) and
    ``X rho Y^dag`` becomes ``kron(X, conj(Y)) @ R``. The Kraus map is a
    polynomial in the signal weights ``a_k``, so its terms are grouped by
    monomial and applied with one GEMM per step.
    """

    def __init__(self, model, dt):
        D = model.hilbert_dim
        self.D, self.dt = D, dt
        z0 = np.zeros(model.classical_dim)
        H = model.hamiltonian(z0)
        cs = model.jump_operators(z0)
        eta = np.asarray(model.efficiencies(z0), dtype=float)
        n = len(cs)
        self.n = n
        self.eta = eta[:, None]
        self.sqrt_eta = np.sqrt(eta)[:, None]
        zero = np.zeros((D, D), dtype=complex)
        self.mean_rows = (
            np.stack([(c + dagger(c)).T.reshape(D * D) for c in cs]) if n else np.zeros((0, D * D))
        )
        M0 = np.eye(D) - (1j * H + 0.5 * sum((dagger(c) @ c for c in cs), zero)) * dt
        M0 = M0 - 0.5 * dt * sum((eta[k] * cs[k] @ cs[k] for k in range(n)), zero)
        # M = sum_p coef_p * a^exp_p * X_p
        terms = [(np.zeros(n, int), 1.0, M0)]
        for k in range(n):
            terms.append((np.eye(n, dtype=int)[k], 1.0, cs[k]))
        for k in range(n):
            for l in range(n):
                terms.append((np.eye(n, dtype=int)[k] + np.eye(n, dtype=int)[l], 0.5, cs[k] @ cs[l]))
        groups = {}
        for ep, cp, X in terms:
            for eq, cq, Y in terms:
                key = tuple(ep + eq)
                groups[key] = groups.get(key, 0) + cp * cq * np.kron(X, Y.conj())
        zero_key = tuple([0] * n)
        for k in range(n):
            groups[zero_key] = groups[zero_key] + (1.0 - eta[k]) * dt * np.kron(cs[k], cs[k].conj())
        self.exponents = np.array(list(groups), dtype=int).reshape(len(groups), n)
        self.K = np.concatenate(list(groups.values()), axis=0)
        self.n_mono = len(groups)
        idx = np.arange(D * D).reshape(D, D)
        self.swap = idx.T.reshape(D * D)
        self.diag = np.diag(idx)
        self.feedback = None
        bs = model.feedback(z0)
        if bs is not None and len(bs) == 1:
            w, v = np.linalg.eigh(bs[0])
            vd = dagger(v)
            self.feedback = (np.kron(vd, vd.conj()), np.kron(v, v.conj()), w)

    def _linear_operators(self, model, milstein):
        D, dt = self.D, self.dt
        z0 = np.zeros(model.classical_dim)
        H = model.hamiltonian(z0)
        cs = model.jump_operators(z0)
        eye = np.eye(D)
        L = -1j * (np.kron(H, eye) - np.kron(eye, H.conj()))
        for c in cs:
            cdc = dagger(c) @ c
            L = L + np.kron(c, c.conj()) - 0.5 * (np.kron(cdc, eye) + np.kron(eye, cdc.conj()))
        blocks = [np.eye(D * D) + dt * L]
        self.linear_channels = [k for k in range(self.n) if self.eta[k, 0] > 0]
        Cs = [np.kron(cs[k], eye) + np.kron(eye, cs[k].conj()) for k in self.linear_channels]
        blocks += Cs
        if milstein:
            blocks += [C @ C for C in Cs]
        self.linear_K = np.concatenate(blocks, axis=0)
        self.linear_milstein = milstein

    def linear(self, Rt, dr):
        """Linear (unnormalized) update of the packed batch ``Rt`` driven by ``dr`` (n, B)."""
        D2, B = Rt.shape
        Y = (self.linear_K @ Rt).reshape(-1, D2, B)
        out = Y[0].copy()
        m = len(self.linear_channels)
        for j, k in enumerate(self.linear_channels):
            ek = self.eta[k, 0]
            out += Y[1 + j] * (2.0 * ek * dr[k])
            if self.linear_milstein:
                out += Y[1 + m + j] * (0.5 * (4.0 * ek**2 * dr[k] ** 2 - ek * self.dt))
        return out

    def pack(self, rho):
        return np.ascontiguousarray(rho.reshape(rho.shape[0], self.D * self.D).T)

    def unpack(self, R):
        return np.ascontiguousarray(R.T).reshape(R.shape[1], self.D, self.D)

    def means(self, R):
        return (self.mean_rows @ R).real

    def min_eigenvalue(self, R):
        if self.D == 2:
            a, d = R[0].real, R[3].real
            return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + np.abs(R[1]) ** 2)
        return min_eigenvalue(self.unpack(R))

    def _finish(self, R):
        R = 0.5 * (R + R[self.swap].conj())
        return R / R[self.diag].real.sum(axis=0)

    def kraus(self, R, a):
        D2, B = R.shape
        Y = (self.K @ R).reshape(self.n_mono, D2, B)
        powers = []
        for k in range(self.n):
            pk = [None, a[k]]
            for _ in range(3):
                pk.append(pk[-1] * a[k])
            powers.append(pk)
        out = Y[0].copy()
        for j in range(1, self.n_mono):
            mono = None
            for k, e in enumerate(self.exponents[j]):
                if e:
                    mono = powers[k][e] if mono is None else mono * powers[k][e]
            out += Y[j] * mono
        return self._finish(out)

    def kick(self, R, dr):
        to_eig, from_eig, w = self.feedback
        phase = np.exp(-1j * w[:, None] * dr[None, :])
        ph = (phase[:, None, :] * phase.conj()[None, :, :]).reshape(self.D * self.D, -1)
        return self._finish(from_eig @ ((to_eig @ R) * ph))

    def step(self, model, R, z, dW, dt, mode):
        """``dW`` has shape (B, n); returns (R', z', dr (B, n))."""
        dWt = dW.T
        means = self.means(R)
        eta = np.broadcast_to(self.eta, means.shape)
        a = eta * means * dt + self.sqrt_eta * dWt
        drT, avail = _signal(means, eta, dWt, dt)
        new_R = self.kraus(R, a)
        if mode == "markovian_feedback":
            bs = model.feedback(np.zeros(model.classical_dim))
            _check_feedback(model, self.eta.T, bs)
            drf = np.where(avail, drT, 0.0)
            if self.feedback is not None:
                new_R = self.kick(new_R, drf[0])
            else:
                rho = self.unpack(new_R)
                U = _feedback_unitary(bs, drf.T)
                new_R = self.pack(_renormalize(U @ rho @ dagger(U)))
            return new_R, z, drT.T
        new_z = _classical_update(model, z, means.T, eta.T, dW, dt)
        return new_R, new_z, drT.T


# --------------------------------------------------------------------------
# public single-step API


def _unbatch(x, single):
    return x[0] if single else x


def step_hybrid(model: HybridModel, state: HybridState, dW, dt: float, scheme="kraus"):
    """One Ito step of the measured system and its classical variables.

    Returns the new :class:`HybridState` and the :class:`StepIncrements`
    (``dr`` is emitted only for channels with non-zero efficiency).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rho, z, single = _state_arrays(model, state.rho, state.z)
    dW_b = _noise_arrays(dW, rho.shape[0], model.n_channels)
    new_rho, new_z, dr, avail = _step_batch(model, rho, z, dW_b, dt, scheme, "hybrid")
    t = state.t + dt
    _check_finite(new_rho, t, dt)
    return (
        HybridState(_unbatch(new_rho, single), _unbatch(new_z, single), t),
        StepIncrements(_unbatch(dW_b, single), _unbatch(dr, single), _unbatch(avail, single)),
    )


def step_markovian_feedback(model: HybridModel, state: HybridState, dW, dt: float, scheme="kraus"):
    """Measurement step followed by the unitary kick ``exp(-i sum_k b_k dr_k)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rho, z, single = _state_arrays(model, state.rho, state.z)
    dW_b = _noise_arrays(dW, rho.shape[0], model.n_channels)
    new_rho, new_z, dr, avail = _step_batch(model, rho, z, dW_b, dt, scheme, "markovian_feedback")
    t = state.t + dt
    _check_finite(new_rho, t, dt)
    return (
        HybridState(_unbatch(new_rho, single), _unbatch(new_z, single), t),
        StepIncrements(_unbatch(dW_b, single), _unbatch(dr, single), _unbatch(avail, single)),
    )


def step_linear(model: HybridModel, rho_tilde, z, dr, dt: float, milstein=True):
    """Linear (unnormalized) update of ``rho_tilde`` driven by the signal ``dr``.

    Taylor expansion in ``dr`` with the Milstein term
    ``1/2 (2 eta C)^2 rho_tilde (dr^2 - dt / (4 eta))``, ``C X = c X + X c^dag``;
    ``milstein=False`` gives plain Euler. Entries of ``dr`` for
    zero-efficiency channels are ignored (their weight ``2 eta_k`` vanishes).
    No renormalization is applied.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rho, z, single = _state_arrays(model, rho_tilde, z)
    dr_b = _noise_arrays(dr, rho.shape[0], model.n_channels)
    out = _linear_batch(model, rho, z, dr_b, dt, milstein)
    _check_finite(out, float("nan"), dt)
    return _unbatch(out, single)


def reconstruct_from_signal(model: HybridModel, rho, z, dr, dt: float, scheme="kraus"):
    """Filter update from a recorded signal: the quantum trajectory implied by ``dr``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rho_b, z_b, single = _state_arrays(model, rho, z)
    dr_b = _noise_arrays(dr, rho_b.shape[0], model.n_channels)
    H = model.hamiltonian(z_b)
    cs = model.jump_operators(z_b)
    eta = np.broadcast_to(model.efficiencies(z_b), dr_b.shape)
    missing = (eta > 0) & ~np.isfinite(dr_b)
    if np.any(missing):
        ks = sorted(set(np.nonzero(missing)[-1].tolist()))
        raise ValueError(f"signal missing for channel(s) {ks} with non-zero efficiency")
    means = _channel_means(cs, rho_b)
    a = np.where(eta > 0, 2.0 * eta * np.nan_to_num(dr_b), 0.0)
    out = _measurement_update(H, cs, eta, rho_b, a, dt, scheme)
    _check_finite(out, float("nan"), dt)
    return _unbatch(out, single)


# --------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    rho: np.ndarray  # (steps+1, D, D)
    z: np.ndarray  # (steps+1, d)
    dW: np.ndarray  # (steps, n)
    dr: np.ndarray  # (steps, n), NaN where unavailable
    seed: Optional[int] = None
    stream_index: Optional[int] = None
    mode: str = "hybrid"
    rho_tilde: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def states(self):
        return [HybridState(r, z, t) for r, z, t in zip(self.rho, self.z, self.times)]

    @property
    def increments(self):
        avail = np.isfinite(self.dr)
        return [StepIncrements(a, b, c) for a, b, c in zip(self.dW, self.dr, avail)]

    def __len__(self):
        return len(self.times)

    # CSV: one row per time; increments on row i are those that produced state i
    def columns(self):
        D = self.rho.shape[-1]
        cols = ["t"]
        for i in range(D):
            for j in range(i, D):
                cols += [f"rho_{i}{j}_re", f"rho_{i}{j}_im"]
        cols += [f"z_{a}" for a in range(self.z.shape[-1])]
        cols += [f"dr_{k}" for k in range(self.dW.shape[-1])]
        cols += [f"dW_{k}" for k in range(self.dW.shape[-1])]
        return cols

    def to_rows(self):
        D = self.rho.shape[-1]
        iu = np.triu_indices(D)
        upper = self.rho[:, iu[0], iu[1]]
        n = self.dW.shape[-1]
        pad = np.full((1, n), np.nan)
        dr = np.vstack([pad, self.dr])
        dW = np.vstack([pad, self.dW])
        parts = [self.times[:, None]]
        interleaved = np.empty((len(self.times), 2 * upper.shape[1]))
        interleaved[:, 0::2] = upper.real
        interleaved[:, 1::2] = upper.imag
        parts += [interleaved, self.z, dr, dW]
        return np.hstack(parts)

    def header(self):
        return {
            "format": "hybridyn-trajectory",
            "version": 1,
            "hilbert_dim": int(self.rho.shape[-1]),
            "classical_dim": int(self.z.shape[-1]),
            "n_channels": int(self.dW.shape[-1]),
            "dt": self.dt,
            "steps": int(len(self.times) - 1),
            "seed": self.seed,
            "stream_index": self.stream_index,
            "mode": self.mode,
            "columns": self.columns(),
            **self.meta,
        }

    def save_csv(self, path):
        """Write rows to ``path`` and the JSON header to ``path`` + ``.json``."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self.to_rows():
                w.writerow([repr(float(x)) for x in row])
        Path(str(path) + ".json").write_text(json.dumps(self.header(), indent=2))
        return path

    @classmethod
    def load_csv(cls, path):
        path = Path(path)
        header = json.loads(Path(str(path) + ".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        D, d, n = header["hilbert_dim"], header["classical_dim"], header["n_channels"]
        times = data[:, 0]
        iu = np.triu_indices(D)
        m = len(iu[0])
        vals = data[:, 1 : 1 + 2 * m]
        upper = vals[:, 0::2] + 1j * vals[:, 1::2]
        rho = np.zeros((len(times), D, D), dtype=complex)
        rho[:, iu[0], iu[1]] = upper
        rho[:, iu[1], iu[0]] = upper.conj()
        off = 1 + 2 * m
        z = data[:, off : off + d]
        dr = data[1:, off + d : off + d + n]
        dW = data[1:, off + d + n : off + d + 2 * n]
        meta = {k: v for k, v in header.items() if k not in _HEADER_KEYS}
        return cls(times, rho, z, dW, dr, header.get("seed"), header.get("stream_index"),
                   header.get("mode", "hybrid"), meta=meta)


_HEADER_KEYS = {
    "format", "version", "hilbert_dim", "classical_dim", "n_channels", "dt",
    "steps", "seed", "stream_index", "mode", "columns",
}


class NoiseSource:
    """Per-trajectory Wiener increments for a batch, drawn in time chunks.

    Each trajectory owns its stream, so the increments it sees do not depend
    on which batch it runs in.
    """

    def __init__(self, streams, n_channels, dt, chunk=1024):
        self.streams = list(streams)
        self.n = n_channels
        self.sqrt_dt = math.sqrt(dt)
        self.chunk = chunk
        self._buf = None
        self._pos = 0

    def __len__(self):
        return len(self.streams)

    def next(self):
        if self._buf is None or self._pos >= self._buf.shape[1]:
            self._buf = np.stack(
                [s.standard_normal((self.chunk, self.n)) for s in self.streams]
            ) * self.sqrt_dt
            self._pos = 0
        out = self._buf[:, self._pos]
        self._pos += 1
        return out


class ArrayNoise:
    """Increments supplied up front with shape (B, steps, n)."""

    def __init__(self, dW):
        self.dW = np.asarray(dW, dtype=float)
        self._pos = 0

    def __len__(self):
        return self.dW.shape[0]

    def next(self):
        out = self.dW[:, self._pos]
        self._pos += 1
        return out


def n_steps_for(T, dt):
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    n = math.ceil(T / dt - 1e-9)
    if n > MAX_STEPS:
        raise ValueError(f"T/dt = {n} exceeds the limit of {MAX_STEPS} steps")
    return max(n, 1)


def integrate_batch(
    model: HybridModel,
    rho0,
    z0,
    dt: float,
    n_steps: int,
    noise,
    mode: str = "hybrid",
    scheme: str = "kraus",
    record_steps=None,
    positivity_threshold: Optional[float] = DEFAULT_POSITIVITY_THRESHOLD,
    record_increments: bool = False,
    on_step=None,
    fast: bool = True,
):
    """Advance a batch of trajectories, storing states at ``record_steps``.

    ``rho0`` is ``(B, D, D)`` (or one matrix, broadcast), ``z0`` is ``(B, d)``.
    ``noise`` yields ``(B, n)`` increments per step (see :class:`NoiseSource`).
    ``on_step(step, rho, z, rho_tilde)`` is called after every step if given.
    With ``fast`` (default) z-independent models use precompiled
    superoperators for the Kraus scheme; results agree with the generic path
    to rounding. That path is positive by construction, so for ``D > 2`` it
    checks positivity every 10 steps and at every recorded step.
    Returns a dict with ``rho``/``z`` (and ``rho_tilde`` in linear mode) of
    shape ``(len(record_steps), B, ...)``; increments if requested.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    B = len(noise)
    D, d, n = model.hilbert_dim, model.classical_dim, model.n_channels
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (B, D, D)).copy()
    z = np.broadcast_to(np.asarray(z0, dtype=float), (B, d)).copy()
    if record_steps is None:
        record_steps = np.arange(n_steps + 1)
    record_steps = np.asarray(record_steps, dtype=int)
    slot = {int(s): i for i, s in enumerate(record_steps)}
    out_rho = np.empty((len(record_steps), B, D, D), dtype=complex)
    out_z = np.empty((len(record_steps), B, d))
    rho_t = rho.copy() if mode == "linear" else None
    out_rt = np.empty_like(out_rho) if mode == "linear" else None
    inc_dW = np.empty((n_steps, B, n)) if record_increments else None
    inc_dr = np.empty((n_steps, B, n)) if record_increments else None

    def store(step):
        i = slot.get(step)
        if i is not None:
            out_rho[i] = rho
            out_z[i] = z
            if rho_t is not None:
                out_rt[i] = rho_t

    store(0)
    step_mode = "hybrid" if mode == "linear" else mode
    kernel = None
    if scheme == "kraus" and fast and model.z_independent():
        kernel = _ConstantKernel(model, dt)
        R = kernel.pack(rho)
        if rho_t is not None:
            kernel._linear_operators(model, milstein=True)
            Rt = kernel.pack(rho_t)
    for step in range(1, n_steps + 1):
        dW = noise.next()
        t = step * dt
        try:
            if kernel is not None:
                R, new_z, dr = kernel.step(model, R, z, dW, dt, step_mode)
                if not np.all(np.isfinite(R)):
                    _check_finite(kernel.unpack(R), t, dt, step)
                if positivity_threshold is not None and (D == 2 or step % 10 == 0 or step in slot):
                    lam = float(np.min(kernel.min_eigenvalue(R)))
                    if lam < positivity_threshold:
                        _check_positive(kernel.unpack(R), positivity_threshold, t, dt, step)
                z = new_z
                need_rho = on_step is not None or step in slot
                if need_rho:
                    rho = kernel.unpack(R)
                if rho_t is not None:
                    Rt = kernel.linear(Rt, dr.T)
                    if need_rho:
                        rho_t = kernel.unpack(Rt)
            else:
                new_rho, new_z, dr, _ = _step_batch(model, rho, z, dW, dt, scheme, step_mode)
                if rho_t is not None:
                    rho_t = _linear_batch(model, rho_t, z, dr, dt, scheme != "euler")
                _check_finite(new_rho, t, dt, step)
                if positivity_threshold is not None:
                    _check_positive(new_rho, positivity_threshold, t, dt, step)
                rho, z = new_rho, new_z
        except np.linalg.LinAlgError as exc:
            raise IntegrationError(f"linear algebra failure at t={t:.6g}: {exc}", t=t, step=step) from exc
        if record_increments:
            inc_dW[step - 1] = dW
            inc_dr[step - 1] = dr
        if on_step is not None:
            on_step(step, rho, z, rho_t)
        store(step)
    result = {"rho": out_rho, "z": out_z, "steps": record_steps}
    if out_rt is not None:
        result["rho_tilde"] = out_rt
    if record_increments:
        result["dW"] = inc_dW
        result["dr"] = inc_dr
    return result


def run_trajectory(
    model: HybridModel,
    initial: HybridState,
    dt: float,
    T: float,
    rng: RngStream,
    mode: str = "hybrid",
    scheme: str = "kraus",
    positivity_threshold: Optional[float] = DEFAULT_POSITIVITY_THRESHOLD,
    dW=None,
):
    """Integrate one trajectory for ``ceil(T/dt)`` steps and record everything.

    ``dW`` may be supplied as an array ``(steps, n)`` to replay a given noise
    path; otherwise increments come from ``rng``.
    """
    n_steps = n_steps_for(T, dt)
    if dW is not None:
        noise = ArrayNoise(np.asarray(dW, dtype=float)[None])
    else:
        noise = NoiseSource([rng], model.n_channels, dt)
    try:
        res = integrate_batch(
            model, initial.rho, initial.z, dt, n_steps, noise, mode=mode, scheme=scheme,
            positivity_threshold=positivity_threshold, record_increments=True,
        )
    except IntegrationError as exc:
        raise IntegrationError(f"step {exc.step}: {exc}", exc.t, exc.step, exc.suggested_dt) from exc
    times = initial.t + dt * np.arange(n_steps + 1)
    return TrajectoryRecord(
        times=times,
        rho=res["rho"][:, 0],
        z=res["z"][:, 0],
        dW=res["dW"][:, 0],
        dr=res["dr"][:, 0],
        seed=None if rng is None else rng.master_seed,
        stream_index=None if rng is None else rng.stream_index,
        mode=mode,
        rho_tilde=res["rho_tilde"][:, 0] if "rho_tilde" in res else None,
        meta={"scenario": model.name, "params": dict(model.params), "scheme": scheme},
    )


# --------------------------------------------------------------------------
# Ito calculus self-test


@dataclass
class ItoSelfTestReport:
    dt: float
    T: float
    n_paths: int
    # W dW integral against its closed form
    discrete_identity_error: float
    pathwise_constant: float
    pathwise_bound: float
    mean_square_terminal: float
    mean_square_terminal_se: float
    # martingale property for f = sin(t)
    sin_integral_mean: float
    sin_integral_se: float
    # quadratic variation
    qv_mean: float
    qv_se: float

    @property
    def checks(self):
        return {
            "w_dw_closed_form": self.discrete_identity_error <= 1e-9
            and self.pathwise_constant <= self.pathwise_bound
            and abs(self.mean_square_terminal - self.T) <= 4 * self.mean_square_terminal_se,
            "martingale_sin": abs(self.sin_integral_mean) <= 4 * self.sin_integral_se,
            "quadratic_variation": abs(self.qv_mean - self.T) <= 4 * self.qv_se,
        }

    @property
    def passed(self):
        return all(self.checks.values())


def ito_selftest(rng: RngStream, dt: float, n_steps: int, n_paths: int, chunk_paths=1000):
    """Check the basic Ito rules on simulated Brownian paths."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    T = dt * n_steps
    t_left = dt * np.arange(n_steps)
    sin_weights = np.sin(t_left)
    ito_ww, closed, wT2, sin_int, qv = [], [], [], [], []
    done = 0
    while done < n_paths:
        m = min(chunk_paths, n_paths - done)
        dW = rng.standard_normal((m, n_steps)) * math.sqrt(dt)
        W = np.cumsum(dW, axis=1)
        W_left = np.hstack([np.zeros((m, 1)), W[:, :-1]])
        ito_ww.append(np.sum(W_left * dW, axis=1))
        q = np.sum(dW * dW, axis=1)
        qv.append(q)
        closed.append(0.5 * (W[:, -1] ** 2 - T))
        wT2.append(W[:, -1] ** 2)
        sin_int.append(dW @ sin_weights)
        done += m
    ito_ww, closed, wT2 = np.concatenate(ito_ww), np.concatenate(closed), np.concatenate(wT2)
    sin_int, qv = np.concatenate(sin_int), np.concatenate(qv)
    discrete = 0.5 * (wT2 - qv)
    dev = np.abs(ito_ww - closed)
    # |QV - T|/2 ~ sqrt(dt T / 2) |N(0,1)|: allow 7 sigma on the largest path
    bound = 7.0 / math.sqrt(2.0)
    return ItoSelfTestReport(
        dt=dt,
        T=T,
        n_paths=n_paths,
        discrete_identity_error=float(np.max(np.abs(ito_ww - discrete)) / max(T, 1e-300)),
        pathwise_constant=float(np.max(dev) / (math.sqrt(dt) * T)),
        pathwise_bound=bound,
        mean_square_terminal=float(np.mean(wT2)),
        mean_square_terminal_se=float(np.std(wT2, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("inf"),
        sin_integral_mean=float(np.mean(sin_int)),
        sin_integral_se=float(math.sqrt(np.sum(sin_weights**2) * dt / n_paths)),
        qv_mean=float(np.mean(qv)),
        qv_se=float(math.sqrt(2.0 * dt * T / n_paths)),
    )
