"""Grid solver for the hybrid Fokker-Planck equation in one classical dimension.

The state is an unnormalized matrix field ``rho(z)`` on cell centres. Its
trace is the probability density of ``z`` and ``rho(z) / tr rho(z)`` is the
quantum state conditioned on ``z``. One explicit Euler step applies

* the Lindblad part ``-i[H(z), rho] + sum_k D[c_k(z)] rho`` pointwise,
* advection ``-d/dz [A rho]`` with ``A rho = F rho + sum_k sqrt(eta_k) G_k/2
  (c_k rho + rho c_k^dag)``, through a Rusanov (local Lax-Friedrichs) flux,
* diffusion ``d^2/dz^2 [(sum_k G_k^2 / 8) rho]`` through central differences.

Everything is written as a flux difference with zero flux through the outer
walls, so the discrete mass ``sum_i tr rho_i dz`` is conserved to rounding.
Reflecting walls are a truncation of the real line; :func:`evolve` reports
how much mass reaches the outermost cells so the truncation can be judged.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import HybridModel
from .quantum_core import dagger, hermitize, min_eigenvalue

MIN_CELLS = 16
CFL_SAFETY = 0.9
HERMITIAN_TOL = 1e-10


class StabilityError(ValueError):
    """Raised when the time step exceeds the explicit stability bound."""

    def __init__(self, dt, bound):
        super().__init__(f"dt={dt:.3e} exceeds the explicit stability bound {bound:.3e}")
        self.dt = dt
        self.bound = bound


@dataclass(frozen=True)
class Grid1D:
    z_min: float
    z_max: float
    n_cells: int

    def __post_init__(self):
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")
        if int(self.n_cells) < MIN_CELLS:
            raise ValueError(f"n_cells must be at least {MIN_CELLS}, got {self.n_cells}")

    @classmethod
    def from_spacing(cls, z_min, z_max, dz):
        """Grid whose spacing is ``dz`` (``z_max`` is moved out to fit whole cells)."""
        n = int(math.ceil((z_max - z_min) / dz - 1e-9))
        return cls(z_min, z_min + n * dz, n)

    @property
    def dz(self):
        return (self.z_max - self.z_min) / self.n_cells

    @property
    def edges(self):
        return np.linspace(self.z_min, self.z_max, self.n_cells + 1)

    @property
    def centers(self):
        return self.z_min + (np.arange(self.n_cells) + 0.5) * self.dz

    def locate(self, z):
        """Cell index of each ``z`` (clipped to the grid)."""
        idx = np.floor((np.asarray(z) - self.z_min) / self.dz).astype(int)
        return np.clip(idx, 0, self.n_cells - 1)


@dataclass
class HybridDensityField:
    grid: Grid1D
    values: np.ndarray  # (n_cells, D, D)
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.ndim != 3 or self.values.shape[0] != self.grid.n_cells:
            raise ValueError(f"values must have shape ({self.grid.n_cells}, D, D), got {self.values.shape}")
        herm = float(np.max(np.abs(self.values - dagger(self.values)), initial=0.0))
        if herm > HERMITIAN_TOL:
            raise ValueError(f"cell matrices must be Hermitian (deviation {herm:.3e})")

    @property
    def hilbert_dim(self):
        return self.values.shape[-1]

    def copy(self):
        return HybridDensityField(self.grid, self.values.copy(), self.t)

    def scaled(self, factor):
        return HybridDensityField(self.grid, self.values * factor, self.t)


def product_field(grid: Grid1D, rho0, density: Callable[[np.ndarray], np.ndarray]) -> HybridDensityField:
    """Field ``p(z) rho0`` with ``p`` renormalized to unit discrete mass."""
    p = np.asarray(density(grid.centers), dtype=float)
    if np.any(p < 0) or not np.any(p > 0):
        raise ValueError("density must be non-negative and not identically zero")
    p = p / (p.sum() * grid.dz)
    return HybridDensityField(grid, p[:, None, None] * np.asarray(rho0, dtype=complex)[None], 0.0)


def gaussian_field(grid: Grid1D, rho0, mean=0.0, std=1.0) -> HybridDensityField:
    return product_field(grid, rho0, lambda z: np.exp(-0.5 * ((z - mean) / std) ** 2))


def total_mass(field: HybridDensityField) -> float:
    """Midpoint-rule integral of ``tr rho(z)``."""
    return float(np.einsum("nii->", field.values).real * field.grid.dz)


def marginal_distribution(field: HybridDensityField) -> np.ndarray:
    """Density ``p(z_i) = tr rho(z_i)`` at the cell centres."""
    return np.einsum("nii->n", field.values).real


def conditional_state(field: HybridDensityField, z_index: int) -> np.ndarray:
    """Normalized quantum state in cell ``z_index``."""
    cell = field.values[z_index]
    p = float(np.trace(cell).real)
    if p <= 1e-12 * max(total_mass(field), np.finfo(float).tiny):
        raise ValueError(f"cell {z_index} carries negligible mass ({p:.3e}); conditional state undefined")
    return hermitize(cell / p)


def expectation_against(field: HybridDensityField, f) -> np.ndarray:
    """Midpoint-rule ``integral f(z) rho(z) dz``; ``f`` is a callable or per-cell array."""
    w = f(field.grid.centers) if callable(f) else f
    w = np.broadcast_to(np.asarray(w, dtype=float), (field.grid.n_cells,))
    return np.einsum("n,nij->ij", w, field.values) * field.grid.dz


def _vec_left_right(X, Y):
    """Row-major superoperator of ``rho -> X rho Y^dag`` for stacks."""
    D = X.shape[-1]
    out = X[..., :, None, :, None] * Y.conj()[..., None, :, None, :]
    return out.reshape(X.shape[:-2] + (D * D, D * D))


class FPOperator:
    """Per-cell coefficients of the discretized generator for one model and grid.

    Built once and reused across steps; :func:`fp_step` builds a temporary one.
    """

    def __init__(self, model: HybridModel, grid: Grid1D):
        if model.classical_dim != 1:
            raise ValueError(f"the PDE solver supports one classical dimension, model has {model.classical_dim}")
        self.model, self.grid = model, grid
        N, D = grid.n_cells, model.hilbert_dim
        self.D = D
        z = grid.centers[:, None]
        eye = np.broadcast_to(np.eye(D, dtype=complex), (N, D, D))
        H = np.broadcast_to(model.hamiltonian(z), (N, D, D))
        cs = [np.broadcast_to(c, (N, D, D)) for c in model.jump_operators(z)]
        eta = np.broadcast_to(model.efficiencies(z), (N, model.n_channels))
        G = model.coupling(z)[:, 0, :]  # (N, n)
        F = model.drift(z)[:, 0]
        Q = -1j * (_vec_left_right(H, eye) - _vec_left_right(eye, H))
        A = F[:, None, None] * np.eye(D * D)
        speed = np.abs(F).copy()
        for k, c in enumerate(cs):
            cdc = dagger(c) @ c
            Q = Q + _vec_left_right(c, c) - 0.5 * (_vec_left_right(cdc, eye) + _vec_left_right(eye, cdc))
            s = np.sqrt(eta[:, k]) * G[:, k] / 2
            A = A + s[:, None, None] * (_vec_left_right(c, eye) + _vec_left_right(eye, c))
            speed = speed + 2 * np.abs(s) * np.linalg.norm(c, 2, axis=(-2, -1))
        self.Q, self.A = Q, A
        self.diff = np.sum(G**2, axis=1) / 8
        self.alpha = np.maximum(speed[:-1], speed[1:])
        dz = grid.dz
        rate = float(np.max(self.alpha, initial=0.0)) / dz + 2 * float(np.max(2 * self.diff, initial=0.0)) / dz**2
        self.max_dt = CFL_SAFETY / rate if rate > 0 else math.inf

    def rhs(self, values):
        N, D = values.shape[0], self.D
        v = values.reshape(N, D * D)
        dz = self.grid.dz
        adv = np.einsum("npq,nq->np", self.A, v)
        dif = self.diff[:, None] * v
        flux = 0.5 * (adv[:-1] + adv[1:]) - 0.5 * self.alpha[:, None] * (v[1:] - v[:-1])
        flux = flux - (dif[1:] - dif[:-1]) / dz
        div = np.zeros_like(v)
        div[:-1] += flux
        div[1:] -= flux
        out = np.einsum("npq,nq->np", self.Q, v) - div / dz
        return out.reshape(N, D, D)

    def step(self, field: HybridDensityField, dt: float) -> HybridDensityField:
        if dt > self.max_dt:
            raise StabilityError(dt, self.max_dt)
        values = field.values + dt * self.rhs(field.values)
        herm = float(np.max(np.abs(values - dagger(values)), initial=0.0))
        if herm > HERMITIAN_TOL:
            raise FloatingPointError(f"Hermiticity lost at t={field.t + dt:.6g} (deviation {herm:.3e})")
        return HybridDensityField(field.grid, hermitize(values), field.t + dt)


def stability_bound(model: HybridModel, grid: Grid1D) -> float:
    """Largest admissible explicit step: ``0.9 / (max|v|/dz + 2 max(sum G^2/4)/dz^2)``."""
    return FPOperator(model, grid).max_dt


def fp_step(model: HybridModel, field: HybridDensityField, dt: float, operator: Optional[FPOperator] = None):
    """One explicit Euler step of the hybrid PDE (raises :class:`StabilityError` if ``dt`` is too large)."""
    op = operator if operator is not None and operator.grid == field.grid else FPOperator(model, field.grid)
    return op.step(field, dt)


@dataclass
class FieldEvolution:
    """Snapshots of an evolved field plus conservation and truncation diagnostics."""

    snapshots: list
    dt: float
    mass_drift: float
    boundary_mass: float
    guard_cells: int
    min_conditional_eigenvalue: float = field(default=float("nan"))

    @property
    def times(self):
        return np.array([f.t for f in self.snapshots])

    def at(self, t):
        return self.snapshots[int(np.argmin(np.abs(self.times - t)))]

    def save_csv(self, path):
        """Columns ``t, z, tr, rho_ij_re, rho_ij_im`` (upper triangle) per cell and snapshot."""
        D = self.snapshots[0].hilbert_dim
        pairs = [(i, j) for i in range(D) for j in range(i, D)]
        header = ["t", "z", "tr"] + [f"rho_{i}{j}_{part}" for i, j in pairs for part in ("re", "im")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for snap in self.snapshots:
                tr = marginal_distribution(snap)
                for n, z in enumerate(snap.grid.centers):
                    row = [repr(float(snap.t)), repr(float(z)), repr(float(tr[n]))]
                    for i, j in pairs:
                        x = snap.values[n, i, j]
                        row += [repr(float(x.real)), repr(float(x.imag))]
                    w.writerow(row)

    def diagnostics(self):
        return {
            "dt": self.dt,
            "mass_drift": self.mass_drift,
            "boundary_mass": self.boundary_mass,
            "guard_cells": self.guard_cells,
            "min_conditional_eigenvalue": self.min_conditional_eigenvalue,
        }


def boundary_mass(field: HybridDensityField, guard_cells: int) -> float:
    p = marginal_distribution(field)
    return float((p[:guard_cells].sum() + p[-guard_cells:].sum()) * field.grid.dz)


def evolve(
    model: HybridModel,
    field: HybridDensityField,
    dt: float,
    T: float,
    snapshot_times: Sequence[float] = (),
    guard_cells: Optional[int] = None,
) -> FieldEvolution:
    """Step the field to ``T`` storing snapshots at the requested times (nearest step).

    Tracks the worst mass drift and the largest mass found in the outer
    ``guard_cells`` on each side (default: 2% of the grid, at least 2).
    """
    op = FPOperator(model, field.grid)
    if dt > op.max_dt:
        raise StabilityError(dt, op.max_dt)
    n_steps = int(math.ceil(T / dt - 1e-9))
    want = {int(round(t / dt)): t for t in snapshot_times}
    guard = guard_cells or max(2, field.grid.n_cells // 50)
    m0 = total_mass(field)
    snaps, drift, edge = [], 0.0, boundary_mass(field, guard)
    if 0 in want:
        snaps.append(field.copy())
    cur = field
    for step in range(1, n_steps + 1):
        cur = op.step(cur, dt)
        if step in want or step == n_steps:
            drift = max(drift, abs(total_mass(cur) - m0))
            edge = max(edge, boundary_mass(cur, guard))
            if step in want:
                snaps.append(cur)
        elif step % 100 == 0:
            edge = max(edge, boundary_mass(cur, guard))
    lam = _min_conditional_eigenvalue(snaps[-1]) if snaps else float("nan")
    return FieldEvolution(snaps, dt, drift, edge, guard, lam)


def _min_conditional_eigenvalue(field: HybridDensityField) -> float:
    p = marginal_distribution(field)
    ok = p > 1e-12 * max(p.max(), np.finfo(float).tiny)
    if not np.any(ok):
        return float("nan")
    return float(np.min(min_eigenvalue(field.values[ok] / p[ok, None, None])))


def sample_initial(field: HybridDensityField, rng: np.random.Generator):
    """Draw ``(z, rho)`` from a field: cell by mass, ``z`` uniform in the cell, ``rho`` conditional.

    Trajectories started this way have exactly the field as their joint law
    (the field being piecewise constant in ``z``).
    """
    p = marginal_distribution(field) * field.grid.dz
    if np.any(p < 0):
        raise ValueError("field marginal has negative cells; cannot sample")
    cdf = np.cumsum(p)
    i = int(np.searchsorted(cdf, rng.uniform(0, cdf[-1]), side="right"))
    i = min(i, field.grid.n_cells - 1)
    z = field.grid.edges[i] + rng.uniform() * field.grid.dz
    return np.array([z]), conditional_state(field, i)


def field_sampler(field: HybridDensityField):
    """Callable ``rng -> (z, rho)`` wrapping :func:`sample_initial` (picklable closure for workers)."""
    snapshot = field.copy()

    def draw(rng):
        return sample_initial(snapshot, rng)

    draw.field = snapshot
    return draw


def field_metadata(field: HybridDensityField):
    g = field.grid
    return json.dumps({"z_min": g.z_min, "z_max": g.z_max, "n_cells": g.n_cells, "t": field.t})
