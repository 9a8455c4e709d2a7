"""Hybrid model description and the registry of built-in scenarios.

Operators are plain callables of the classical variable ``z``. They receive
``z`` with shape ``(..., d)`` and must return arrays broadcastable to
``(..., D, D)`` (operators), ``(..., d)`` (drift ``F``), ``(..., d, n)``
(coupling ``G``) or ``(...)`` (efficiency). A z-independent operator may
simply return a fixed ``(D, D)`` matrix; broadcasting does the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .quantum_core import (
    IDENTITY_2,
    SIGMA_X,
    SIGMA_Z,
    MeasurementChannel,
    dagger,
    kron,
)

ArrayFn = Callable[[np.ndarray], np.ndarray]


def constant(value):
    """Wrap a fixed array (or number) as a z-independent callable."""
    value = np.asarray(value)

    def fn(z):
        return value

    fn.is_constant = True
    return fn


@dataclass(frozen=True)
class Channel:
    """One measurement channel: ``c(z)`` and efficiency ``eta`` (number or callable)."""

    c: ArrayFn
    eta: float | ArrayFn = 1.0
    label: str = ""

    def efficiency(self, z):
        if callable(self.eta):
            return np.asarray(self.eta(z), dtype=float)
        return np.asarray(float(self.eta))


@dataclass(frozen=True)
class HybridModel:
    hilbert_dim: int
    classical_dim: int
    H0: ArrayFn
    channels: tuple
    F: Optional[ArrayFn] = None
    G: Optional[ArrayFn] = None
    feedback_ops: Optional[tuple] = None
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.hilbert_dim < 1:
            raise ValueError("hilbert_dim must be positive")
        if self.classical_dim < 0:
            raise ValueError("classical_dim must be non-negative")
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.feedback_ops is not None:
            fb = tuple(self.feedback_ops)
            if len(fb) != len(self.channels):
                raise ValueError(
                    f"need one feedback operator per channel ({len(self.channels)}), got {len(fb)}"
                )
            object.__setattr__(self, "feedback_ops", fb)

    @property
    def n_channels(self):
        return len(self.channels)

    def _z(self, z):
        if z is None:
            return np.zeros(self.classical_dim)
        return np.asarray(z, dtype=float)

    def hamiltonian(self, z=None):
        return np.asarray(self.H0(self._z(z)), dtype=complex)

    def jump_operators(self, z=None):
        z = self._z(z)
        return [np.asarray(ch.c(z), dtype=complex) for ch in self.channels]

    def efficiencies(self, z=None):
        """Efficiencies with shape ``z.shape[:-1] + (n,)``."""
        z = self._z(z)
        lead = z.shape[:-1]
        if not self.channels:
            return np.zeros(lead + (0,))
        return np.stack([np.broadcast_to(ch.efficiency(z), lead) for ch in self.channels], axis=-1)

    def feedback(self, z=None):
        if self.feedback_ops is None:
            return None
        z = self._z(z)
        return [np.asarray(b(z), dtype=complex) for b in self.feedback_ops]

    def drift(self, z=None):
        z = self._z(z)
        if self.F is None:
            return np.zeros(z.shape)
        return np.broadcast_to(np.asarray(self.F(z), dtype=float), z.shape)

    def coupling(self, z=None):
        z = self._z(z)
        shape = z.shape + (self.n_channels,)
        if self.G is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(self.G(z), dtype=float), shape)

    def channel(self, k, z=None):
        """The ``k``-th channel evaluated at a single point ``z``."""
        z = self._z(z)
        return MeasurementChannel(self.channels[k].c(z), float(self.channels[k].efficiency(z)))

    def z_independent(self, samples=5, seed=0):
        """True if H0, every c_k, eta_k and b_k agree at random sample points."""
        if self.classical_dim == 0:
            return True
        rng = np.random.default_rng(seed)
        zs = rng.uniform(-5, 5, size=(samples, self.classical_dim))
        ref = self._snapshot(zs[0])
        return all(
            all(np.array_equal(a, b) for a, b in zip(ref, self._snapshot(z))) for z in zs[1:]
        )

    def _snapshot(self, z):
        ops = [self.hamiltonian(z), *self.jump_operators(z), self.efficiencies(z)]
        if self.feedback_ops is not None:
            ops.extend(self.feedback(z))
        return ops


# --------------------------------------------------------------------------
# scenario registry


@dataclass(frozen=True)
class ScenarioId:
    name: str
    parameters: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class _Scenario:
    builder: Callable[..., HybridModel]
    defaults: Mapping[str, float]
    description: str


_REGISTRY: dict[str, _Scenario] = {}


def _register(name, description, **defaults):
    def deco(fn):
        _REGISTRY[name] = _Scenario(fn, dict(defaults), description)
        return fn

    return deco


def _check_rate(name, value):
    if value < 0:
        raise ValueError(f"parameter {name!r} must be non-negative, got {value}")


def _check_eta(eta):
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"parameter 'eta' must lie in [0, 1], got {eta}")


@_register("dephasing_qubit", "H0 = 0, c = sqrt(gamma) sz, no classical sector", gamma=1.0, eta=1.0)
def _dephasing_qubit(gamma, eta):
    _check_rate("gamma", gamma)
    _check_eta(eta)
    return HybridModel(
        hilbert_dim=2,
        classical_dim=0,
        H0=constant(np.zeros((2, 2), dtype=complex)),
        channels=(Channel(constant(np.sqrt(gamma) * SIGMA_Z), eta, "sqrt(gamma) sz"),),
    )


@_register(
    "rabi_measured_qubit",
    "H0 = (omega/2) sx, c = sqrt(gamma) sz",
    omega=1.0,
    gamma=1.0,
    eta=1.0,
)
def _rabi_measured_qubit(omega, gamma, eta):
    _check_rate("gamma", gamma)
    _check_eta(eta)
    return HybridModel(
        hilbert_dim=2,
        classical_dim=0,
        H0=constant(0.5 * omega * SIGMA_X),
        channels=(Channel(constant(np.sqrt(gamma) * SIGMA_Z), eta, "sqrt(gamma) sz"),),
    )


@_register(
    "hybrid_linear",
    "d = 1, c = sqrt(gamma) sz, F = -kappa z, G = g, H0(z) = (omega/2) sx + lam z sz",
    gamma=1.0,
    eta=1.0,
    kappa=1.0,
    g=1.0,
    lam=0.5,
    omega=1.0,
)
def _hybrid_linear(gamma, eta, kappa, g, lam, omega):
    _check_rate("gamma", gamma)
    _check_eta(eta)
    hx = 0.5 * omega * SIGMA_X

    def H0(z):
        return hx + lam * z[..., 0, None, None] * SIGMA_Z

    return HybridModel(
        hilbert_dim=2,
        classical_dim=1,
        H0=H0,
        channels=(Channel(constant(np.sqrt(gamma) * SIGMA_Z), eta, "sqrt(gamma) sz"),),
        F=lambda z: -kappa * z,
        G=constant(np.full((1, 1), float(g))),
    )


@_register(
    "open_qbm",
    "d = 1, z is the integrated signal: F = 0, G = g, c = sqrt(gamma) sz, H0 = (omega/2) sx",
    gamma=1.0,
    eta=1.0,
    g=1.0,
    omega=1.0,
)
def _open_qbm(gamma, eta, g, omega):
    _check_rate("gamma", gamma)
    _check_eta(eta)
    return HybridModel(
        hilbert_dim=2,
        classical_dim=1,
        H0=constant(0.5 * omega * SIGMA_X),
        channels=(Channel(constant(np.sqrt(gamma) * SIGMA_Z), eta, "sqrt(gamma) sz"),),
        F=constant(np.zeros(1)),
        G=constant(np.full((1, 1), float(g))),
    )


@_register(
    "markovian_feedback_qubit",
    "c = sqrt(gamma) sz with feedback b = mu sx, H0 = (omega/2) sx",
    gamma=1.0,
    mu=0.5,
    eta=1.0,
    omega=0.0,
)
def _markovian_feedback_qubit(gamma, mu, eta, omega):
    _check_rate("gamma", gamma)
    _check_eta(eta)
    return HybridModel(
        hilbert_dim=2,
        classical_dim=0,
        H0=constant(0.5 * omega * SIGMA_X),
        channels=(Channel(constant(np.sqrt(gamma) * SIGMA_Z), eta, "sqrt(gamma) sz"),),
        feedback_ops=(constant(mu * SIGMA_X),),
    )


@_register(
    "two_qubit_product",
    "c = sqrt(gamma) sz (x) I measured, feedback b = mu I (x) sx on the other factor",
    gamma=1.0,
    mu=0.5,
    eta=1.0,
)
def _two_qubit_product(gamma, mu, eta):
    _check_rate("gamma", gamma)
    _check_eta(eta)
    return HybridModel(
        hilbert_dim=4,
        classical_dim=0,
        H0=constant(np.zeros((4, 4), dtype=complex)),
        channels=(Channel(constant(np.sqrt(gamma) * kron(SIGMA_Z, IDENTITY_2)), eta, "sz x I"),),
        feedback_ops=(constant(mu * kron(IDENTITY_2, SIGMA_X)),),
    )


def scenario_names():
    return sorted(_REGISTRY)


def scenario_defaults(name):
    if name not in _REGISTRY:
        raise KeyError(f"unknown scenario {name!r}; registry: {', '.join(scenario_names())}")
    return dict(_REGISTRY[name].defaults)


def scenario_description(name):
    return _REGISTRY[name].description


def build_scenario(scenario, **parameters):
    """Construct a registry model from a name (or :class:`ScenarioId`) and parameters.

    Missing parameters take their defaults; unknown names or parameter keys
    raise ``ValueError``.
    """
    if isinstance(scenario, ScenarioId):
        parameters = {**scenario.parameters, **parameters}
        scenario = scenario.name
    if scenario not in _REGISTRY:
        raise ValueError(
            f"unknown scenario {scenario!r}; available: {', '.join(scenario_names())}"
        )
    entry = _REGISTRY[scenario]
    unknown = set(parameters) - set(entry.defaults)
    if unknown:
        raise ValueError(
            f"unknown parameter(s) {sorted(unknown)} for scenario {scenario!r}; "
            f"accepted: {sorted(entry.defaults)}"
        )
    resolved = {k: float(parameters.get(k, v)) for k, v in entry.defaults.items()}
    for k, v in resolved.items():
        if not np.isfinite(v):
            raise ValueError(f"parameter {k!r} must be finite")
    return replace(entry.builder(**resolved), name=scenario, params=resolved)


def validate(model: HybridModel, sample_points: Optional[Sequence] = None, tol=1e-12):
    """Check a model at sample points; returns a list of violation messages."""
    d, D, n = model.classical_dim, model.hilbert_dim, model.n_channels
    if sample_points is None:
        sample_points = [np.zeros(d)]
    problems = []
    for z in sample_points:
        z = np.asarray(z, dtype=float).reshape(d)
        where = f"at z={z.tolist()}"
        H = model.hamiltonian(z)
        if H.shape != (D, D):
            problems.append(f"H0 has shape {H.shape}, expected {(D, D)} {where}")
        elif np.max(np.abs(H - dagger(H)), initial=0.0) > tol:
            problems.append(f"H0 is not Hermitian {where}")
        for k, ch in enumerate(model.channels):
            c = np.asarray(ch.c(z))
            if c.shape != (D, D):
                problems.append(f"channel {k} operator has shape {c.shape} {where}")
            elif not np.all(np.isfinite(c)):
                problems.append(f"channel {k} operator is not finite {where}")
            eta = float(ch.efficiency(z))
            if not 0.0 <= eta <= 1.0:
                problems.append(f"channel {k} efficiency {eta} outside [0, 1] {where}")
        if model.feedback_ops is not None:
            for k, b in enumerate(model.feedback(z)):
                if b.shape != (D, D):
                    problems.append(f"feedback operator {k} has shape {b.shape} {where}")
                elif np.max(np.abs(b - dagger(b)), initial=0.0) > tol:
                    problems.append(f"feedback operator {k} is not Hermitian {where}")
        if d > 0 or model.F is not None:
            Fz = np.asarray(model.F(z)) if model.F is not None else np.zeros(d)
            if np.broadcast_shapes(Fz.shape, (d,)) != (d,):
                problems.append(f"F has shape {Fz.shape}, expected {(d,)} {where}")
        if model.G is not None:
            Gz = np.asarray(model.G(z))
            try:
                ok = np.broadcast_shapes(Gz.shape, (d, n)) == (d, n)
            except ValueError:
                ok = False
            if not ok:
                problems.append(f"G has shape {Gz.shape}, expected {(d, n)} {where}")
    return problems
