"""Command-line interface.

Every subcommand writes data files (CSV/JSON) into ``--out`` together with a
``manifest.json`` holding the fully resolved configuration, the tool version
and the seed. ``hybridyn replay manifest.json`` re-runs it bit-exactly.

Exit codes: 0 success, 1 a comparison or self-test failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__

MANIFEST_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SUBCOMMANDS = ("simulate", "ensemble", "pde", "lindblad", "validate-tradeoff", "ito-selftest", "born", "xcheck")

DEFAULTS = {
    "scenario": None,
    "params": {},
    "dt": 1e-4,
    "T": 1.0,
    "N": 1000,
    "seed": 0,
    "out": "hybridyn_out",
    "snapshots": None,
    "mode": None,
    "scheme": "kraus",
    "psi": None,
    "z0": None,
    "workers": None,
    "z_min": -5.0,
    "z_max": 5.0,
    "dz": 0.02,
    "pde_dt": None,
    "z0_mean": 0.0,
    "z0_std": 0.5,
    "generator": None,
    "input": None,
}

# keys a config file may set, per subcommand
_KEYS = {
    "simulate": {"scenario", "params", "dt", "T", "seed", "out", "mode", "scheme", "psi", "z0"},
    "ensemble": {"scenario", "params", "dt", "T", "N", "seed", "out", "snapshots", "mode", "scheme", "psi", "z0", "workers"},
    "pde": {"scenario", "params", "dt", "T", "out", "snapshots", "psi", "z_min", "z_max", "dz", "pde_dt", "z0_mean", "z0_std"},
    "lindblad": {"scenario", "params", "dt", "T", "out", "psi", "z0", "generator"},
    "validate-tradeoff": {"input", "out", "seed"},
    "ito-selftest": {"dt", "T", "N", "seed", "out"},
    "born": {"scenario", "params", "dt", "T", "N", "seed", "out", "psi", "workers"},
    "xcheck": {"scenario", "params", "dt", "T", "N", "seed", "out", "snapshots", "psi", "workers",
               "z_min", "z_max", "dz", "pde_dt", "z0_mean", "z0_std"},
}


class ConfigError(ValueError):
    """Invalid configuration (reported with exit code 2)."""


@dataclasses.dataclass
class RunConfig:
    subcommand: str
    values: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError as exc:
            raise AttributeError(name) from exc

    def as_dict(self):
        return {"subcommand": self.subcommand, **dict(sorted(self.values.items()))}


# --------------------------------------------------------------------------
# config handling


def _check_values(sub, values):
    for key in ("dt", "T", "dz", "pde_dt", "z0_std"):
        v = values.get(key)
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"field {key!r} must be a positive number, got {v!r}")
    for key in ("N", "workers"):
        v = values.get(key)
        if v is not None and not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
            raise ConfigError(f"field {key!r} must be a positive integer, got {v!r}")
    if not isinstance(values.get("seed", 0), int) or values.get("seed", 0) < 0:
        raise ConfigError(f"field 'seed' must be a non-negative integer, got {values.get('seed')!r}")
    if not isinstance(values.get("params", {}), dict):
        raise ConfigError("field 'params' must be an object of name: number")
    if values.get("z_min") is not None and values.get("z_max") is not None and values["z_max"] <= values["z_min"]:
        raise ConfigError("field 'z_max' must exceed 'z_min'")
    snaps = values.get("snapshots")
    if snaps is not None:
        if not isinstance(snaps, list) or not all(isinstance(t, (int, float)) and 0 <= t <= values["T"] for t in snaps):
            raise ConfigError(f"field 'snapshots' must list times within [0, T], got {snaps!r}")


def load_config(path, subcommand=None) -> RunConfig:
    """Parse a JSON config (or a run manifest) into a validated :class:`RunConfig`.

    Unknown keys and malformed JSON raise :class:`ConfigError` naming the
    offending key or line. Missing keys take the defaults
    (dt=1e-4, T=1, N=1000, seed=0).
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "manifest_version" in data:
        cfg = data.get("config")
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: manifest without a 'config' object")
        data = dict(cfg)
    sub = data.pop("subcommand", None) or subcommand
    if subcommand is not None and sub != subcommand:
        raise ConfigError(f"{path}: config is for {sub!r}, not {subcommand!r}")
    if sub not in SUBCOMMANDS:
        raise ConfigError(f"{path}: field 'subcommand' must be one of {', '.join(SUBCOMMANDS)}")
    allowed = _KEYS[sub]
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}: unknown key {key!r} for {sub!r} (allowed: {', '.join(sorted(allowed))})")
    values = {k: DEFAULTS[k] for k in allowed}
    values.update(data)
    _check_values(sub, values)
    return RunConfig(sub, values)


def _parse_params(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"--param {k}: {v!r} is not a number") from exc
    return out


def _parse_floats(text, what):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from exc


def _resolve(args) -> RunConfig:
    sub = args.command
    if args.config:
        cfg = load_config(args.config, sub)
        values = dict(cfg.values)
    else:
        values = {k: DEFAULTS[k] for k in _KEYS[sub]}
    flag_map = {
        "scenario": "scenario", "dt": "dt", "T": "T", "N": "N", "seed": "seed", "out": "out",
        "mode": "mode", "scheme": "scheme", "workers": "workers", "z_min": "z_min", "z_max": "z_max",
        "dz": "dz", "pde_dt": "pde_dt", "z0_mean": "z0_mean", "z0_std": "z0_std",
        "generator": "generator", "input": "input",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None and key in _KEYS[sub]:
            values[key] = v
    if getattr(args, "param", None) and "params" in _KEYS[sub]:
        values["params"] = {**values.get("params", {}), **_parse_params(args.param)}
    if getattr(args, "snapshots", None) and "snapshots" in _KEYS[sub]:
        values["snapshots"] = _parse_floats(args.snapshots, "--snapshots")
    if getattr(args, "psi", None) and "psi" in _KEYS[sub]:
        values["psi"] = _parse_floats(args.psi, "--psi")
    if getattr(args, "z0", None) and "z0" in _KEYS[sub]:
        values["z0"] = _parse_floats(args.z0, "--z0")
    _check_values(sub, values)
    return RunConfig(sub, values)


# --------------------------------------------------------------------------
# helpers


def _model(cfg, default=None):
    from .model import build_scenario

    name = cfg.scenario or default
    if name is None:
        raise ConfigError("a scenario is required (--scenario NAME)")
    try:
        return build_scenario(name, **cfg.params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _initial_rho(cfg, model):
    from .quantum_core import pure_state

    D = model.hilbert_dim
    psi = cfg.values.get("psi")
    if psi is None:
        return pure_state(np.ones(D))
    if len(psi) != D:
        raise ConfigError(f"psi must have {D} amplitudes for scenario {model.name!r}, got {len(psi)}")
    if not np.any(psi):
        raise ConfigError("psi must not be the zero vector")
    return pure_state(psi)


def _initial_z(cfg, model):
    z0 = cfg.values.get("z0")
    d = model.classical_dim
    if z0 is None:
        return np.zeros(d)
    if len(z0) != d:
        raise ConfigError(f"z0 must have {d} entries for scenario {model.name!r}, got {len(z0)}")
    return np.asarray(z0, dtype=float)


def _mode(cfg, model):
    mode = cfg.values.get("mode")
    if mode is None:
        return "markovian_feedback" if model.feedback_ops is not None else "hybrid"
    return mode


def _snapshots(cfg):
    snaps = cfg.values.get("snapshots")
    return tuple(snaps) if snaps else (cfg.T,)


def _write_json(path, obj):
    from .ensemble import _json_safe

    Path(path).write_text(json.dumps(_json_safe(obj), indent=1, default=_json_default))


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _write_manifest(cfg, out, outputs, status):
    _write_json(
        out / "manifest.json",
        {
            "manifest_version": MANIFEST_VERSION,
            "tool": "hybridyn",
            "version": __version__,
            "seed": cfg.values.get("seed"),
            "config": cfg.as_dict(),
            "outputs": sorted(outputs),
            "status": status,
        },
    )


def _quantum_z_independent(model):
    probe = dataclasses.replace(model, F=None, G=None)
    return probe.z_independent()


# --------------------------------------------------------------------------
# subcommands (each returns (exit_code, [output file names]))


def _cmd_simulate(cfg, out):
    from .sde_engine import HybridState, RngStream, run_trajectory

    model = _model(cfg)
    rec = run_trajectory(
        model, HybridState(_initial_rho(cfg, model), _initial_z(cfg, model)), cfg.dt, cfg.T,
        RngStream(cfg.seed, 0), mode=_mode(cfg, model), scheme=cfg.scheme,
    )
    rec.save_csv(out / "trajectory.csv")
    print(f"wrote {len(rec)} rows to {out / 'trajectory.csv'}")
    return EXIT_OK, ["trajectory.csv", "trajectory.csv.json"]


def _cmd_ensemble(cfg, out):
    from .ensemble import EnsembleSpec, compare_mean_to_lindblad, run_ensemble
    from .markovian_limit import feedback_generator_for, measurement_generator_for

    model = _model(cfg)
    mode = _mode(cfg, model)
    rho0 = _initial_rho(cfg, model)
    hist = np.linspace(-5, 5, 101) if model.classical_dim else None
    spec = EnsembleSpec(
        model, cfg.N, cfg.dt, cfg.T, master_seed=cfg.seed, rho0=rho0, z0=_initial_z(cfg, model),
        mode=mode, scheme=cfg.scheme, snapshot_times=_snapshots(cfg), hist_edges=hist,
    )
    stats = run_ensemble(spec, cfg.workers)
    stats.save_json(out / "stats.json")
    files = ["stats.json"]
    if hist is not None:
        stats.save_histogram_csv(out / "histogram.csv")
        files.append("histogram.csv")
    code = EXIT_OK
    if _quantum_z_independent(model):
        gen = feedback_generator_for(model) if mode == "markovian_feedback" else measurement_generator_for(model)
        report = compare_mean_to_lindblad(spec, gen, stats=stats)
        _write_json(out / "comparison.json", report.as_dict())
        files.append("comparison.json")
        print(report.table())
        code = EXIT_OK if report.passed else EXIT_FAIL
    else:
        print("mean vs master equation: skipped (quantum operators depend on z)")
    return code, files


def _grid(cfg):
    from .fokker_planck import Grid1D

    try:
        return Grid1D.from_spacing(cfg.z_min, cfg.z_max, cfg.dz)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _pde_dt(cfg, model, grid):
    """Explicit PDE step: ``--pde-dt`` if given, else ``dt/k`` with the smallest ``k`` that is stable."""
    import math

    from .fokker_planck import stability_bound

    given = cfg.values.get("pde_dt")
    if given:
        return given
    return cfg.dt / max(1, math.ceil(cfg.dt / stability_bound(model, grid)))


def _initial_field(cfg, model, grid):
    from .fokker_planck import gaussian_field

    return gaussian_field(grid, _initial_rho(cfg, model), cfg.z0_mean, cfg.z0_std)


def _cmd_pde(cfg, out):
    from .fokker_planck import StabilityError, evolve

    model = _model(cfg, "hybrid_linear")
    if model.classical_dim != 1:
        raise ConfigError(f"pde needs a scenario with one classical variable; {model.name!r} has {model.classical_dim}")
    grid = _grid(cfg)
    field = _initial_field(cfg, model, grid)
    dt = _pde_dt(cfg, model, grid)
    snaps = sorted(set((0.0,) + _snapshots(cfg)))
    try:
        ev = evolve(model, field, dt, cfg.T, snaps)
    except StabilityError as exc:
        raise ConfigError(str(exc)) from exc
    ev.save_csv(out / "field.csv")
    _write_json(out / "pde_diagnostics.json", ev.diagnostics())
    print(json.dumps(ev.diagnostics(), indent=1))
    return EXIT_OK, ["field.csv", "pde_diagnostics.json"]


def _cmd_lindblad(cfg, out):
    from .markovian_limit import feedback_generator_for, integrate_lindblad, measurement_generator_for
    from .quantum_core import SIGMA_X, SIGMA_Y, SIGMA_Z, expect, purity

    model = _model(cfg)
    z = _initial_z(cfg, model)
    kind = cfg.values.get("generator") or ("feedback" if model.feedback_ops is not None else "measurement")
    if kind == "measurement":
        gen = measurement_generator_for(model, z)
    elif kind in ("feedback", "exact-average"):
        try:
            gen = feedback_generator_for(model, z, exact_average=kind == "exact-average")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"generator must be measurement, feedback or exact-average, got {kind!r}")
    sol = integrate_lindblad(gen, _initial_rho(cfg, model), cfg.dt, cfg.T)
    D = gen.dim
    iu = np.triu_indices(D)
    cols = ["t"] + [f"rho_{i}{j}_{p}" for i, j in zip(*iu) for p in ("re", "im")] + ["purity"]
    if D == 2:
        cols += ["sx", "sy", "sz"]
    with open(out / "lindblad.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t, rho in zip(sol.times, sol.states):
            row = [t]
            for i, j in zip(*iu):
                row += [rho[i, j].real, rho[i, j].imag]
            row.append(purity(rho))
            if D == 2:
                row += [expect(P, rho).real for P in (SIGMA_X, SIGMA_Y, SIGMA_Z)]
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    print(f"wrote {len(sol.times)} rows to {out / 'lindblad.csv'} (generator: {kind}, "
          f"step heuristic {'met' if sol.within_step_heuristic else 'NOT met'})")
    return EXIT_OK, ["lindblad.csv"]


def _matrix(obj, what):
    if isinstance(obj, dict):
        if set(obj) - {"re", "im"}:
            raise ConfigError(f"{what}: complex matrices use keys 're' and 'im'")
        re = np.asarray(obj.get("re", 0.0), dtype=float)
        im = np.asarray(obj.get("im", 0.0), dtype=float)
        return re + 1j * im
    try:
        return np.asarray(obj, dtype=complex)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: not a numeric matrix") from exc


def _cmd_validate_tradeoff(cfg, out):
    from .parameterization import DiagonalParams, drift_equivalence_check, to_nondiagonal, tradeoff_margin
    from .quantum_core import random_density_matrix

    if not cfg.input:
        raise ConfigError("validate-tradeoff needs --input params.json")
    try:
        data = json.loads(Path(cfg.input).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{cfg.input}: {exc}") from exc
    unknown = set(data) - {"Gamma", "eta", "G", "L"}
    if unknown:
        raise ConfigError(f"{cfg.input}: unknown key(s) {sorted(unknown)}")
    try:
        p = DiagonalParams(
            Gamma=_matrix(data["Gamma"], "Gamma"),
            eta=np.asarray(data["eta"], dtype=float),
            G=np.asarray(data["G"], dtype=float),
            L=[_matrix(m, f"L[{i}]") for i, m in enumerate(data.get("L", []))],
        )
    except KeyError as exc:
        raise ConfigError(f"{cfg.input}: missing field {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise ConfigError(f"{cfg.input}: {exc}") from exc
    rep = tradeoff_margin(to_nondiagonal(p))
    result = {"tradeoff": rep.as_dict()}
    print(f"psd_margin: {rep.psd_margin:.6e}")
    print(f"saturated: {'true' if rep.saturated else 'false'}")
    print(f"consistent: {'true' if rep.consistent else 'false'}")
    if rep.pseudo_inverse:
        print("note: D0 is singular; a pseudo-inverse was used")
    if p.L:
        rng = np.random.default_rng(cfg.seed)
        D = p.L[0].shape[0]
        eq = drift_equivalence_check(p, random_density_matrix(D, rng), rng.normal(size=p.dims[2]))
        result["drift_equivalence"] = eq.as_dict()
        print(f"drift equivalence max discrepancy: {eq.max_discrepancy:.3e} ({'ok' if eq.passed else 'FAIL'})")
    _write_json(out / "tradeoff.json", result)
    ok = rep.consistent and result.get("drift_equivalence", {}).get("passed", True)
    return (EXIT_OK if ok else EXIT_FAIL), ["tradeoff.json"]


def _cmd_ito_selftest(cfg, out):
    from .sde_engine import RngStream, ito_selftest, n_steps_for

    rep = ito_selftest(RngStream(cfg.seed, 0), cfg.dt, n_steps_for(cfg.T, cfg.dt), cfg.N)
    result = {**dataclasses.asdict(rep), "checks": rep.checks, "passed": rep.passed}
    _write_json(out / "ito_selftest.json", result)
    for name, ok in rep.checks.items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    return (EXIT_OK if rep.passed else EXIT_FAIL), ["ito_selftest.json"]


def _cmd_born(cfg, out):
    from .ensemble import EnsembleSpec, born_rule_histogram

    model = _model(cfg, "dephasing_qubit")
    spec = EnsembleSpec(model, cfg.N, cfg.dt, cfg.T, master_seed=cfg.seed, rho0=_initial_rho(cfg, model))
    try:
        rep = born_rule_histogram(spec, cfg.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_json(out / "born.json", rep.as_dict())
    for lam, w, f, s in zip(rep.outcomes, rep.born_weights, rep.frequencies, rep.sigma):
        print(f"outcome {lam:+.4g}: born={w:.4f} observed={f:.4f} (3 sigma = {3 * s:.4f})")
    print(f"unresolved: {rep.unresolved_fraction:.4f}  mean purity: {rep.mean_purity:.6f}")
    return (EXIT_OK if rep.passed else EXIT_FAIL), ["born.json"]


def _cmd_xcheck(cfg, out):
    from .ensemble import EnsembleSpec, compare_mean_to_lindblad, compare_to_pde, run_ensemble
    from .fokker_planck import StabilityError, evolve, expectation_against, field_sampler
    from .markovian_limit import integrate_lindblad, measurement_generator_for

    model = _model(cfg, "hybrid_linear")
    if model.classical_dim != 1:
        raise ConfigError(f"xcheck needs a scenario with one classical variable; {model.name!r} has {model.classical_dim}")
    grid = _grid(cfg)
    field0 = _initial_field(cfg, model, grid)
    snaps = tuple(sorted(set((0.0,) + _snapshots(cfg))))
    dt_pde = _pde_dt(cfg, model, grid)
    try:
        ev = evolve(model, field0, dt_pde, cfg.T, snaps)
    except StabilityError as exc:
        raise ConfigError(str(exc)) from exc
    spec = EnsembleSpec(
        model, cfg.N, cfg.dt, cfg.T, master_seed=cfg.seed, initial_sampler=field_sampler(field0),
        snapshot_times=snaps, hist_edges=grid.edges,
    )
    stats = run_ensemble(spec, cfg.workers)
    reports = [compare_to_pde(spec, ev, stats=stats)]
    combined = {"pde_diagnostics": ev.diagnostics()}
    if _quantum_z_independent(model):
        gen = measurement_generator_for(model)
        rho_bar0 = expectation_against(field0, 1.0)
        reports.append(compare_mean_to_lindblad(spec, gen, stats=stats, rho0=rho_bar0))
        sol = integrate_lindblad(gen, rho_bar0, dt_pde, cfg.T, record_times=snaps)
        rows = []
        for t in snaps:
            dist = float(np.linalg.norm(expectation_against(ev.at(t), 1.0) - sol.at(t)))
            tol = 10 * (dt_pde + grid.dz)
            rows.append({"label": f"t={t:g}", "discrepancy": dist, "threshold": tol, "passed": dist <= tol})
        from .ensemble import ComparisonReport

        reports.append(ComparisonReport("PDE marginal vs master equation", rows))
    else:
        combined["master_equation"] = "skipped: quantum operators depend on z"
        print("master equation comparisons: skipped (quantum operators depend on z)")
    combined["reports"] = [r.as_dict() for r in reports]
    combined["passed"] = all(r.passed for r in reports)
    for r in reports:
        print(r.table())
    print(f"xcheck: {'PASS' if combined['passed'] else 'FAIL'}")
    _write_json(out / "xcheck.json", combined)
    ev.save_csv(out / "field.csv")
    return (EXIT_OK if combined["passed"] else EXIT_FAIL), ["xcheck.json", "field.csv"]


_HANDLERS = {
    "simulate": _cmd_simulate,
    "ensemble": _cmd_ensemble,
    "pde": _cmd_pde,
    "lindblad": _cmd_lindblad,
    "validate-tradeoff": _cmd_validate_tradeoff,
    "ito-selftest": _cmd_ito_selftest,
    "born": _cmd_born,
    "xcheck": _cmd_xcheck,
}


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    from .model import scenario_names

    parser = argparse.ArgumentParser(
        prog="hybridyn",
        description="Hybrid quantum-classical dynamics: trajectories, Fokker-Planck field and master equations.",
        epilog="Scenarios: " + ", ".join(scenario_names()),
    )
    parser.add_argument("--version", action="version", version=f"hybridyn {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, keys):
        p.add_argument("--config", help="JSON config file (or a manifest); flags override it")
        p.add_argument("--out", help="output directory (default: hybridyn_out)")
        if "scenario" in keys:
            p.add_argument("--scenario", help="registry scenario name")
            p.add_argument("--param", action="append", metavar="NAME=VALUE", help="scenario parameter (repeatable)")
        if "dt" in keys:
            p.add_argument("--dt", type=float, help="time step (default 1e-4)")
        if "T" in keys:
            p.add_argument("--T", type=float, help="final time (default 1)")
        if "N" in keys:
            p.add_argument("--N", type=int, help="number of trajectories or paths (default 1000)")
        if "seed" in keys:
            p.add_argument("--seed", type=int, help="master seed (default 0)")
        if "snapshots" in keys:
            p.add_argument("--snapshots", help="comma-separated snapshot times (default: T)")
        if "mode" in keys:
            p.add_argument("--mode", choices=("hybrid", "markovian_feedback", "linear"))
        if "scheme" in keys:
            p.add_argument("--scheme", choices=("kraus", "milstein", "euler"))
        if "psi" in keys:
            p.add_argument("--psi", help="initial pure state amplitudes, comma-separated (default: uniform)")
        if "z0" in keys:
            p.add_argument("--z0", help="initial classical variables, comma-separated (default: zeros)")
        if "workers" in keys:
            p.add_argument("--workers", type=int, help="worker processes (default: HYBRIDYN_WORKERS or CPU count)")
        if "dz" in keys:
            p.add_argument("--z-min", dest="z_min", type=float, help="grid lower edge (default -5)")
            p.add_argument("--z-max", dest="z_max", type=float, help="grid upper edge (default 5)")
            p.add_argument("--dz", type=float, help="grid spacing (default 0.02)")
            p.add_argument("--pde-dt", dest="pde_dt", type=float, help="PDE time step (default: --dt, subdivided until stable)")
            p.add_argument("--z0-mean", dest="z0_mean", type=float, help="initial Gaussian mean (default 0)")
            p.add_argument("--z0-std", dest="z0_std", type=float, help="initial Gaussian width (default 0.5)")
        if "generator" in keys:
            p.add_argument("--generator", choices=("measurement", "feedback", "exact-average"))
        if "input" in keys:
            p.add_argument("--input", help="JSON file with Gamma, eta, G and optional L")

    helps = {
        "simulate": "single trajectory to CSV",
        "ensemble": "ensemble statistics and the master-equation comparison",
        "pde": "evolve the hybrid density field",
        "lindblad": "integrate the deterministic master equation",
        "validate-tradeoff": "decoherence-diffusion trade-off report",
        "ito-selftest": "Ito-calculus self-test on Brownian paths",
        "born": "collapse statistics against the Born rule",
        "xcheck": "trajectories, PDE and master equation on one scenario",
    }
    for name in SUBCOMMANDS:
        common(sub.add_parser(name, help=helps[name]), _KEYS[name])
    rp = sub.add_parser("replay", help="re-run a manifest written by an earlier run")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="output directory (default: the manifest's)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "replay":
            cfg = load_config(args.manifest)
            if args.out:
                cfg.values["out"] = args.out
        else:
            cfg = _resolve(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        code, files = _HANDLERS[cfg.subcommand](cfg, out)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"hybridyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write_manifest(cfg, out, files + ["manifest.json"], "pass" if code == EXIT_OK else "fail")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
