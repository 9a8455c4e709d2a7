"""Monte Carlo ensembles and the cross-representation comparisons.

Trajectory ``i`` always draws its noise from stream ``(master_seed, i)`` and
its random initial condition (if any) from the auxiliary stream of the same
key. Trajectories are grouped into batches of fixed size; each batch returns
sums and sums of squares, and batches are merged in index order with
compensated summation. The statistics therefore do not depend on how many
workers ran the batches, or in which order they finished.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .fokker_planck import FieldEvolution, HybridDensityField, expectation_against
from .markovian_limit import LindbladGenerator, integrate_lindblad
from .model import HybridModel, build_scenario
from .quantum_core import hermitize, purity
from .sde_engine import (
    DEFAULT_POSITIVITY_THRESHOLD,
    IntegrationError,
    NoiseSource,
    RngStream,
    integrate_batch,
    n_steps_for,
)

DEFAULT_BATCH = 1024
INITIAL_TAG = 1


class EnsembleError(RuntimeError):
    """A trajectory failed; ``indices`` are global trajectory indices."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


def _first_coord(z):
    return z[:, 0]


def _first_coord_sq(z):
    return z[:, 0] ** 2


def default_test_functions(classical_dim):
    """``{"z": z_0, "z2": z_0^2}`` for models with a classical variable, else empty."""
    if classical_dim == 0:
        return {}
    return {"z": _first_coord, "z2": _first_coord_sq}


def worker_count(requested=None):
    """Explicit request, else ``HYBRIDYN_WORKERS``, else the available CPUs."""
    if requested is not None:
        n = int(requested)
    elif os.environ.get("HYBRIDYN_WORKERS"):
        n = int(os.environ["HYBRIDYN_WORKERS"])
    else:
        try:
            n = len(os.sched_getaffinity(0))
        except AttributeError:  # pragma: no cover - non-Linux
            n = os.cpu_count() or 1
    if n < 1:
        raise ValueError(f"worker count must be positive, got {n}")
    return n


@dataclass
class EnsembleSpec:
    """What to simulate and which statistics to collect.

    ``initial_sampler(rng) -> (z, rho)`` overrides the fixed ``rho0``/``z0``;
    it receives the trajectory's auxiliary generator. ``test_functions`` map a
    name to ``f(z) -> weights`` (shape ``(B,)`` from ``z`` of shape ``(B, d)``);
    the statistics then include ``E[rho f(z)]``. ``hist_edges`` bins the first
    classical coordinate; ``weighted_bins`` additionally accumulates
    ``E[rho 1{z in bin}]`` on those bins.
    """

    model: HybridModel
    n_traj: int
    dt: float
    T: float
    master_seed: int = 0
    rho0: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None
    initial_sampler: Optional[Callable] = None
    mode: str = "hybrid"
    scheme: str = "kraus"
    observables: Mapping[str, np.ndarray] = field(default_factory=dict)
    snapshot_times: Sequence[float] = ()
    test_functions: Optional[Mapping[str, Callable]] = None
    hist_edges: Optional[np.ndarray] = None
    weighted_bins: bool = False
    batch_size: int = DEFAULT_BATCH
    keep_final: bool = False
    positivity_threshold: Optional[float] = DEFAULT_POSITIVITY_THRESHOLD

    def __post_init__(self):
        if isinstance(self.model, str):
            self.model = build_scenario(self.model)
        if int(self.n_traj) < 1:
            raise ValueError("n_traj must be at least 1")
        self.n_traj = int(self.n_traj)
        self.n_steps = n_steps_for(self.T, self.dt)
        times = tuple(float(t) for t in self.snapshot_times) or (float(self.T),)
        for t in times:
            if t < 0 or t > self.T + 1e-12:
                raise ValueError(f"snapshot time {t} outside [0, T={self.T}]")
        self.snapshot_times = times
        self.record_steps = np.array([min(int(round(t / self.dt)), self.n_steps) for t in times], dtype=int)
        if self.initial_sampler is None and self.rho0 is None:
            raise ValueError("give either rho0 or an initial_sampler")
        if self.test_functions is None:
            self.test_functions = default_test_functions(self.model.classical_dim)
        if self.hist_edges is not None:
            self.hist_edges = np.asarray(self.hist_edges, dtype=float)
        if self.weighted_bins and self.hist_edges is None:
            raise ValueError("weighted_bins needs hist_edges")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be positive")

    @property
    def resolved_times(self):
        """Snapshot times after snapping to the step grid."""
        return self.record_steps * self.dt


# --------------------------------------------------------------------------
# per-batch work


def _initial_batch(spec: EnsembleSpec, start, stop):
    d, D = spec.model.classical_dim, spec.model.hilbert_dim
    B = stop - start
    if spec.initial_sampler is None:
        rho = np.broadcast_to(np.asarray(spec.rho0, dtype=complex), (B, D, D))
        z0 = np.zeros(d) if spec.z0 is None else np.asarray(spec.z0, dtype=float)
        return rho, np.broadcast_to(z0, (B, d))
    rhos, zs = np.empty((B, D, D), dtype=complex), np.empty((B, d))
    for j, i in enumerate(range(start, stop)):
        z, rho = spec.initial_sampler(RngStream(spec.master_seed, i).auxiliary(INITIAL_TAG))
        rhos[j], zs[j] = rho, np.asarray(z, dtype=float).reshape(d)
    return rhos, zs


def _features(spec: EnsembleSpec, rho, z):
    """Per-trajectory real features whose sums and squares are accumulated."""
    out = {"rho_re": rho.real, "rho_im": rho.imag, "z": z, "z2": z**2}
    for name, A in spec.observables.items():
        out["obs:" + name] = np.einsum("ij,bji->b", np.asarray(A, dtype=complex), rho).real
    for name, f in spec.test_functions.items():
        w = np.asarray(f(z), dtype=float).reshape(-1)[:, None, None]
        out["f_re:" + name] = w * rho.real
        out["f_im:" + name] = w * rho.imag
    return out


def _batch_sums(spec: EnsembleSpec, rho, z):
    sums = {}
    for key, x in _features(spec, rho, z).items():
        sums[key] = (x.sum(axis=0), (x * x).sum(axis=0))
    if spec.hist_edges is not None:
        zz = z[:, 0]
        edges = spec.hist_edges
        counts, _ = np.histogram(zz, bins=edges)
        sums["hist"] = (counts.astype(float), None)
        sums["under"] = (np.array(float(np.sum(zz < edges[0]))), None)
        sums["over"] = (np.array(float(np.sum(zz > edges[-1]))), None)
        if spec.weighted_bins:
            nb = len(edges) - 1
            idx = np.searchsorted(edges, zz, side="right") - 1
            idx = np.where(zz == edges[-1], nb - 1, idx)
            inside = (idx >= 0) & (idx < nb)
            D = rho.shape[-1]
            for part, vals in (("re", rho.real), ("im", rho.imag)):
                s1 = np.zeros((nb, D, D))
                s2 = np.zeros((nb, D, D))
                np.add.at(s1, idx[inside], vals[inside])
                np.add.at(s2, idx[inside], vals[inside] ** 2)
                sums["bins_" + part] = (s1, s2)
    return sums


def _run_batch(spec: EnsembleSpec, start: int, stop: int):
    rho0, z0 = _initial_batch(spec, start, stop)
    streams = [RngStream(spec.master_seed, i) for i in range(start, stop)]
    noise = NoiseSource(streams, spec.model.n_channels, spec.dt)
    try:
        res = integrate_batch(
            spec.model,
            rho0,
            z0,
            spec.dt,
            spec.n_steps,
            noise,
            mode=spec.mode,
            scheme=spec.scheme,
            record_steps=spec.record_steps,
            positivity_threshold=spec.positivity_threshold,
        )
    except IntegrationError as exc:
        idx = [start + i for i in exc.indices] if exc.indices is not None else list(range(start, stop))
        raise EnsembleError(f"trajectory {idx[0]} failed: {exc}", indices=idx) from exc
    per_snap = [_batch_sums(spec, res["rho"][s], res["z"][s]) for s in range(len(spec.record_steps))]
    final = res["rho"][-1] if spec.keep_final else None
    return stop - start, per_snap, final


# --------------------------------------------------------------------------
# reduction


class _Compensated:
    """Neumaier summation of equally shaped arrays, applied in call order."""

    def __init__(self):
        self.s = None
        self.c = None

    def add(self, x):
        x = np.asarray(x, dtype=float)
        if self.s is None:
            self.s, self.c = x.copy(), np.zeros_like(x)
            return
        t = self.s + x
        big = np.abs(self.s) >= np.abs(x)
        self.c += np.where(big, (self.s - t) + x, (x - t) + self.s)
        self.s = t

    @property
    def value(self):
        return self.s + self.c


def _reduce(batches):
    """Merge per-batch sums in index order."""
    acc = None
    for _, per_snap, _ in batches:
        if acc is None:
            acc = [{k: (_Compensated(), _Compensated() if v[1] is not None else None) for k, v in snap.items()} for snap in per_snap]
        for a, snap in zip(acc, per_snap):
            for k, (s1, s2) in snap.items():
                a[k][0].add(s1)
                if s2 is not None:
                    a[k][1].add(s2)
    return [{k: (v[0].value, None if v[1] is None else v[1].value) for k, v in a.items()} for a in acc]


def _mean_se(s1, s2, n):
    mean = s1 / n
    if n < 2:
        return mean, np.full_like(mean, np.nan)
    var = np.maximum(s2 - n * mean * mean, 0.0) / (n - 1)
    return mean, np.sqrt(var / n)


@dataclass
class EnsembleStats:
    """Ensemble means and standard errors at each snapshot time.

    Complex entries carry the standard error of the real part in ``.real`` and
    of the imaginary part in ``.imag``. With ``n == 1`` the standard errors are
    NaN and ``se_defined`` is False.
    """

    times: np.ndarray
    n: int
    mean_rho: np.ndarray
    se_rho: np.ndarray
    mean_z: np.ndarray
    se_z: np.ndarray
    mean_z2: np.ndarray
    se_z2: np.ndarray
    observables: dict
    test_functions: dict
    hist_edges: Optional[np.ndarray] = None
    hist_counts: Optional[np.ndarray] = None
    hist_under: Optional[np.ndarray] = None
    hist_over: Optional[np.ndarray] = None
    weighted_bins: Optional[tuple] = None
    final_rho: Optional[np.ndarray] = None
    dt: float = float("nan")

    @property
    def se_defined(self):
        return self.n > 1

    def frobenius_se(self, s):
        """Frobenius norm of the entrywise standard errors of ``mean_rho`` at snapshot ``s``."""
        se = self.se_rho[s]
        return float(np.sqrt(np.sum(se.real**2 + se.imag**2)))

    def snapshot_index(self, t):
        return int(np.argmin(np.abs(self.times - t)))

    def as_dict(self):
        def c(x):
            return {"re": np.asarray(x).real.tolist(), "im": np.asarray(x).imag.tolist()}

        out = {
            "times": self.times.tolist(),
            "n": self.n,
            "se_defined": self.se_defined,
            "mean_rho": c(self.mean_rho),
            "se_rho": c(self.se_rho),
            "mean_z": self.mean_z.tolist(),
            "se_z": self.se_z.tolist(),
            "mean_z2": self.mean_z2.tolist(),
            "se_z2": self.se_z2.tolist(),
            "observables": {k: {"mean": m.tolist(), "se": s.tolist()} for k, (m, s) in self.observables.items()},
            "test_functions": {k: {"mean": c(m), "se": c(s)} for k, (m, s) in self.test_functions.items()},
        }
        if self.hist_counts is not None:
            out["histogram"] = {
                "edges": self.hist_edges.tolist(),
                "counts": self.hist_counts.astype(int).tolist(),
                "under": self.hist_under.astype(int).tolist(),
                "over": self.hist_over.astype(int).tolist(),
            }
        return out

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(_json_safe(self.as_dict()), fh, indent=1)

    def save_histogram_csv(self, path):
        if self.hist_counts is None:
            raise ValueError("no histogram was collected")
        with open(path, "w") as fh:
            fh.write("t,bin_lo,bin_hi,count\n")
            for s, t in enumerate(self.times):
                for b in range(len(self.hist_edges) - 1):
                    fh.write(f"{t!r},{self.hist_edges[b]!r},{self.hist_edges[b + 1]!r},{int(self.hist_counts[s, b])}\n")


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _assemble(spec: EnsembleSpec, acc, finals):
    n = spec.n_traj
    S = len(acc)
    D, d = spec.model.hilbert_dim, spec.model.classical_dim

    def ms(snap, key):
        return _mean_se(snap[key][0], snap[key][1], n)

    def stack(key, shape):
        means, ses = [], []
        for snap in acc:
            m, s = ms(snap, key)
            means.append(np.reshape(m, shape))
            ses.append(np.reshape(s, shape))
        return np.stack(means), np.stack(ses)

    mr, sr = stack("rho_re", (D, D))
    mi, si = stack("rho_im", (D, D))
    mz, sz = stack("z", (d,))
    mz2, sz2 = stack("z2", (d,))
    obs = {name: stack("obs:" + name, ()) for name in spec.observables}
    tf = {}
    for name in spec.test_functions:
        a, b = stack("f_re:" + name, (D, D))
        c, e = stack("f_im:" + name, (D, D))
        tf[name] = (a + 1j * c, b + 1j * e)
    tf["1"] = (mr + 1j * mi, sr + 1j * si)
    stats = EnsembleStats(
        times=spec.resolved_times,
        n=n,
        mean_rho=mr + 1j * mi,
        se_rho=sr + 1j * si,
        mean_z=mz,
        se_z=sz,
        mean_z2=mz2,
        se_z2=sz2,
        observables=obs,
        test_functions=tf,
        dt=spec.dt,
    )
    if spec.hist_edges is not None:
        stats.hist_edges = spec.hist_edges
        stats.hist_counts = np.stack([snap["hist"][0] for snap in acc])
        stats.hist_under = np.array([float(snap["under"][0]) for snap in acc])
        stats.hist_over = np.array([float(snap["over"][0]) for snap in acc])
        if spec.weighted_bins:
            nb = len(spec.hist_edges) - 1
            m_re, s_re = stack("bins_re", (nb, D, D))
            m_im, s_im = stack("bins_im", (nb, D, D))
            stats.weighted_bins = (m_re + 1j * m_im, s_re + 1j * s_im)
    if spec.keep_final:
        stats.final_rho = np.concatenate(finals)
    return stats


def batch_ranges(n_traj, batch_size):
    return [(s, min(s + batch_size, n_traj)) for s in range(0, n_traj, batch_size)]


def run_ensemble(spec: EnsembleSpec, workers: Optional[int] = None) -> EnsembleStats:
    """Run ``spec.n_traj`` trajectories and reduce them to :class:`EnsembleStats`.

    The result is bit-identical for any ``workers`` value. A failing
    trajectory aborts the run with :class:`EnsembleError` (no reseeding).
    """
    ranges = batch_ranges(spec.n_traj, spec.batch_size)
    n_workers = min(worker_count(workers), len(ranges))
    if n_workers == 1:
        batches = [_run_batch(spec, a, b) for a, b in ranges]
    else:
        from joblib import Parallel, delayed

        batches = Parallel(n_jobs=n_workers, backend="loky")(delayed(_run_batch)(spec, a, b) for a, b in ranges)
    acc = _reduce(batches)
    return _assemble(spec, acc, [b[2] for b in batches])


# --------------------------------------------------------------------------
# comparisons


@dataclass
class ComparisonReport:
    """Rows of ``(label, discrepancy, threshold, passed)``; passes only if every row does."""

    name: str
    rows: list

    @property
    def passed(self):
        return bool(self.rows) and all(r["passed"] for r in self.rows)

    def as_dict(self):
        return {"name": self.name, "passed": self.passed, "rows": _json_safe(self.rows)}

    def table(self):
        lines = [f"{self.name}: {'PASS' if self.passed else 'FAIL'}"]
        for r in self.rows:
            lines.append(
                f"  {r['label']:<28} discrepancy={r['discrepancy']:.3e} threshold={r['threshold']:.3e} "
                f"{'ok' if r['passed'] else 'FAIL'}"
            )
        return "\n".join(lines)


def _row(label, discrepancy, threshold, **extra):
    ok = bool(np.isfinite(discrepancy) and np.isfinite(threshold) and discrepancy <= threshold)
    return {"label": label, "discrepancy": float(discrepancy), "threshold": float(threshold), "passed": ok, **extra}


def compare_mean_to_lindblad(
    spec: EnsembleSpec,
    gen: LindbladGenerator,
    stats: Optional[EnsembleStats] = None,
    workers: Optional[int] = None,
    rho0=None,
) -> ComparisonReport:
    """Frobenius distance between the ensemble mean and the master equation per snapshot.

    Threshold: ``4 * ||se||_F + 10 * dt``.
    """
    if stats is None:
        stats = run_ensemble(spec, workers)
    if rho0 is None:
        if spec.rho0 is None:
            raise ValueError("a fixed initial state is needed to integrate the master equation")
        rho0 = spec.rho0
    times = stats.times
    sol = integrate_lindblad(gen, rho0, spec.dt, float(times.max()) if times.max() > 0 else spec.dt, record_times=times)
    rows = []
    for s, t in enumerate(times):
        ref = sol.at(t)
        dist = float(np.linalg.norm(stats.mean_rho[s] - ref))
        stat = stats.frobenius_se(s)
        rows.append(_row(f"t={t:g}", dist, 4 * stat + 10 * spec.dt, stat_error=stat))
    return ComparisonReport("mean vs master equation", rows)


def _same_field(a: HybridDensityField, b: HybridDensityField):
    return a.grid == b.grid and a.values.shape == b.values.shape and np.allclose(a.values, b.values, rtol=0, atol=1e-12)


def compare_to_pde(
    spec: EnsembleSpec,
    evolution: FieldEvolution,
    test_functions: Sequence[str] = ("1", "z", "z2"),
    stats: Optional[EnsembleStats] = None,
    workers: Optional[int] = None,
    initial_field: Optional[HybridDensityField] = None,
) -> ComparisonReport:
    """Entrywise comparison of ``E[rho f(z)]`` with ``integral f(z) rho(z) dz``.

    ``test_functions`` names entries of ``spec.test_functions`` (``"1"`` is
    built in); ``"bins"`` compares the grid-cell indicators (requires
    ``spec.weighted_bins`` with the grid's edges). Trajectories must start
    from the PDE's initial field (``spec.initial_sampler.field``), otherwise
    ``ValueError`` is raised. Threshold per entry and part:
    ``4 * se + 10 * (dt + dz)``.
    """
    if spec.model.classical_dim != 1:
        raise ValueError("PDE comparison needs one classical dimension")
    start = initial_field if initial_field is not None else evolution.snapshots[0]
    sampled = getattr(spec.initial_sampler, "field", None)
    if sampled is None or not _same_field(sampled, start) or (initial_field is None and start.t != 0):
        raise ValueError("trajectory initial conditions do not match the PDE initial field")
    if stats is None:
        stats = run_ensemble(spec, workers)
    dz = start.grid.dz
    allowance = 10 * (spec.dt + dz)
    funcs = {"1": lambda z: np.ones_like(z)}
    funcs.update({k: (lambda f: (lambda z: f(z[:, None])))(f) for k, f in spec.test_functions.items()})
    rows = []
    for s, t in enumerate(stats.times):
        snap = evolution.at(t)
        if abs(snap.t - t) > 0.5 * evolution.dt + 1e-12:
            raise ValueError(f"no PDE snapshot at t={t:g}")
        for name in test_functions:
            if name == "bins":
                if stats.weighted_bins is None or not np.allclose(stats.hist_edges, snap.grid.edges):
                    raise ValueError("bins comparison needs weighted_bins on the PDE grid edges")
                mc, se = stats.weighted_bins[0][s], stats.weighted_bins[1][s]
                pde = snap.values * snap.grid.dz
            else:
                mc, se = stats.test_functions[name][0][s], stats.test_functions[name][1][s]
                pde = expectation_against(snap, funcs[name](snap.grid.centers))
            diff = np.concatenate([np.abs(mc.real - pde.real).ravel(), np.abs(mc.imag - pde.imag).ravel()])
            thr = np.concatenate([(4 * se.real + allowance).ravel(), (4 * se.imag + allowance).ravel()])
            with np.errstate(invalid="ignore"):
                ratio = diff / thr
            worst = int(np.nanargmax(ratio)) if np.any(np.isfinite(ratio)) else 0
            row = _row(f"t={t:g} f={name}", diff[worst], thr[worst], worst_ratio=float(ratio[worst]))
            row["passed"] = bool(np.all(np.isfinite(ratio)) and np.all(ratio <= 1.0))
            rows.append(row)
    return ComparisonReport("trajectories vs PDE", rows)


@dataclass
class BornReport:
    outcomes: list
    born_weights: np.ndarray
    frequencies: np.ndarray
    sigma: np.ndarray
    unresolved_fraction: float
    mean_purity: float
    n: int

    @property
    def within_3_sigma(self):
        dev = np.abs(self.frequencies - self.born_weights)
        return bool(np.all(dev <= 3 * self.sigma + 1e-15))

    @property
    def passed(self):
        return self.within_3_sigma and self.unresolved_fraction < 0.01

    def as_dict(self):
        return {
            "outcomes": self.outcomes,
            "born_weights": self.born_weights.tolist(),
            "frequencies": self.frequencies.tolist(),
            "sigma": self.sigma.tolist(),
            "unresolved_fraction": self.unresolved_fraction,
            "mean_purity": self.mean_purity,
            "n": self.n,
            "passed": self.passed,
        }


def eigenprojectors(c, tol=1e-9):
    """Projectors onto the eigenspaces of a Hermitian ``c`` (degenerate eigenvalues grouped)."""
    w, v = np.linalg.eigh(hermitize(np.asarray(c, dtype=complex)))
    groups, projs = [], []
    for i, lam in enumerate(w):
        if groups and abs(lam - groups[-1][0]) <= tol * max(1.0, abs(lam)):
            groups[-1][1].append(i)
        else:
            groups.append((lam, [i]))
    for lam, idx in groups:
        V = v[:, idx]
        projs.append((float(lam), V @ V.conj().T))
    return projs


def born_rule_histogram(spec: EnsembleSpec, workers: Optional[int] = None, fidelity=0.99) -> BornReport:
    """Collapse statistics for a single Hermitian unit-efficiency channel.

    Each final state is assigned to the eigenprojector with the largest
    weight if that weight exceeds ``fidelity``; otherwise it is unresolved.
    Frequencies are compared with the initial Born weights ``tr(P rho0)``
    at three binomial standard deviations.
    """
    model = spec.model
    if model.n_channels != 1:
        raise ValueError("Born-rule test needs exactly one channel")
    ch = model.channel(0)
    if np.max(np.abs(ch.c - ch.c.conj().T)) > 1e-12 or ch.eta != 1.0:
        raise ValueError("Born-rule test needs a Hermitian channel with unit efficiency")
    if spec.rho0 is None:
        raise ValueError("Born-rule test needs a fixed initial state")
    spec = replace(spec, keep_final=True)
    stats = run_ensemble(spec, workers)
    finals = stats.final_rho
    projs = eigenprojectors(ch.c)
    weights = np.array([np.einsum("ij,bji->b", P, finals).real for _, P in projs])  # (k, N)
    best = np.argmax(weights, axis=0)
    resolved = weights[best, np.arange(finals.shape[0])] > fidelity
    n = finals.shape[0]
    freq = np.array([np.sum(resolved & (best == j)) for j in range(len(projs))]) / n
    born = np.array([np.trace(P @ spec.rho0).real for _, P in projs])
    sigma = np.sqrt(born * (1 - born) / n)
    return BornReport(
        outcomes=[lam for lam, _ in projs],
        born_weights=born,
        frequencies=freq,
        sigma=sigma,
        unresolved_fraction=float(np.mean(~resolved)),
        mean_purity=float(np.mean(purity(finals))),
        n=n,
    )
