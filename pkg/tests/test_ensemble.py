import json
import math

import numpy as np
import pytest

from hybridyn.ensemble import (
    ComparisonReport,
    EnsembleError,
    EnsembleSpec,
    born_rule_histogram,
    compare_mean_to_lindblad,
    compare_to_pde,
    eigenprojectors,
    run_ensemble,
    worker_count,
)
from hybridyn.fokker_planck import Grid1D, evolve, field_sampler, gaussian_field
from hybridyn.markovian_limit import averaged_measurement_generator, measurement_generator_for
from hybridyn.model import build_scenario
from hybridyn.quantum_core import SIGMA_X, SIGMA_Z, pure_state
from hybridyn.sde_engine import HybridState, RngStream, run_trajectory

PLUS = pure_state([1, 1])


def dephasing_spec(n=500, dt=1e-3, T=1.0, seed=0, **kw):
    return EnsembleSpec(build_scenario("dephasing_qubit"), n, dt, T, master_seed=seed, rho0=PLUS, **kw)


def test_single_trajectory_ensemble():
    m = build_scenario("rabi_measured_qubit")
    spec = EnsembleSpec(m, 1, 1e-3, 0.2, master_seed=4, rho0=PLUS)
    st = run_ensemble(spec, workers=1)
    rec = run_trajectory(m, HybridState(PLUS, []), 1e-3, 0.2, RngStream(4, 0))
    assert np.allclose(st.mean_rho[-1], rec.rho[-1], atol=1e-14)
    assert not st.se_defined and np.all(np.isnan(st.se_rho.real))
    report = compare_mean_to_lindblad(spec, measurement_generator_for(m), stats=st)
    assert not report.passed  # NaN thresholds never pass


@pytest.mark.parametrize("workers", [2, 8])
def test_bit_identical_across_worker_counts(workers):
    m = build_scenario("hybrid_linear")
    spec = EnsembleSpec(m, 2100, 1e-3, 0.1, master_seed=17, rho0=PLUS, z0=[0.3],
                        snapshot_times=[0.05, 0.1], hist_edges=np.linspace(-2, 2, 21))
    a = run_ensemble(spec, workers=1)
    b = run_ensemble(spec, workers=workers)
    for key in ("mean_rho", "se_rho", "mean_z", "se_z", "mean_z2", "hist_counts"):
        assert np.array_equal(getattr(a, key), getattr(b, key), equal_nan=True), key
    for name in a.test_functions:
        assert all(np.array_equal(x, y) for x, y in zip(a.test_functions[name], b.test_functions[name]))


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("HYBRIDYN_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
    with pytest.raises(ValueError):
        worker_count(0)


def test_dephasing_sigma_x_mean():
    spec = dephasing_spec(n=10_000, observables={"sx": SIGMA_X})
    st = run_ensemble(spec, workers=1)
    mean, se = st.observables["sx"]
    assert abs(mean[-1] - math.exp(-2)) <= 3 * se[-1]


def test_standard_error_scaling():
    a = run_ensemble(dephasing_spec(n=2000, seed=1, T=0.5), workers=1)
    b = run_ensemble(dephasing_spec(n=4000, seed=2, T=0.5), workers=1)
    ratio = a.se_rho[-1, 0, 1].real / b.se_rho[-1, 0, 1].real
    assert ratio == pytest.approx(math.sqrt(2), rel=0.2)


def test_histogram_counts_sum_to_n():
    m = build_scenario("open_qbm")
    spec = EnsembleSpec(m, 700, 1e-3, 0.5, rho0=PLUS, hist_edges=np.linspace(-0.5, 0.5, 11))
    st = run_ensemble(spec, workers=1)
    total = st.hist_counts[-1].sum() + st.hist_under[-1] + st.hist_over[-1]
    assert total == 700


def test_mean_matches_lindblad_and_detects_wrong_generator():
    spec = dephasing_spec(n=2000, snapshot_times=[0.25, 0.5, 1.0])
    st = run_ensemble(spec, workers=1)
    good = compare_mean_to_lindblad(spec, averaged_measurement_generator(np.zeros((2, 2)), [SIGMA_Z]), stats=st)
    assert good.passed, good.table()
    bad = compare_mean_to_lindblad(spec, averaged_measurement_generator(np.zeros((2, 2)), [math.sqrt(2) * SIGMA_Z]), stats=st)
    assert not bad.passed
    assert not bad.rows[-1]["passed"]
    assert all({"discrepancy", "threshold"} <= set(r) for r in good.rows)


def test_small_ensemble_wider_threshold_still_passes():
    spec = dephasing_spec(n=100, seed=5)
    big = dephasing_spec(n=2000, seed=5)
    gen = averaged_measurement_generator(np.zeros((2, 2)), [SIGMA_Z])
    small_rep = compare_mean_to_lindblad(spec, gen)
    big_rep = compare_mean_to_lindblad(big, gen)
    assert small_rep.passed
    assert small_rep.rows[-1]["threshold"] > big_rep.rows[-1]["threshold"]


def test_report_never_passes_on_nan():
    rep = ComparisonReport("x", [{"label": "a", "discrepancy": float("nan"), "threshold": 1.0, "passed": False}])
    assert not rep.passed
    assert not ComparisonReport("empty", []).passed


def _pde_setup(n=400, T=0.2, snaps=(0.0, 0.1, 0.2), **kw):
    m = build_scenario("hybrid_linear")
    grid = Grid1D.from_spacing(-5, 5, 0.05)
    f0 = gaussian_field(grid, PLUS, 0.0, 0.5)
    ev = evolve(m, f0, 1e-3, T, list(snaps))
    spec = EnsembleSpec(m, n, 1e-3, T, master_seed=2, initial_sampler=field_sampler(f0), snapshot_times=snaps, **kw)
    return m, grid, f0, ev, spec


def test_pde_comparison_small():
    m, grid, f0, ev, spec = _pde_setup(hist_edges=Grid1D.from_spacing(-5, 5, 0.05).edges, weighted_bins=True)
    rep = compare_to_pde(spec, ev, test_functions=("1", "z", "z2", "bins"), workers=1)
    assert rep.passed, rep.table()
    assert rep.rows[0]["discrepancy"] <= 1e-12  # t = 0, f = 1: both sides are the initial state mean


def test_pde_comparison_rejects_mismatched_initial_field():
    m, grid, f0, ev, spec = _pde_setup()
    other = gaussian_field(grid, PLUS, 1.0, 0.5)
    spec_bad = EnsembleSpec(m, 10, 1e-3, 0.2, initial_sampler=field_sampler(other), snapshot_times=(0.0, 0.2))
    with pytest.raises(ValueError, match="initial"):
        compare_to_pde(spec_bad, ev, workers=1)
    spec_fixed = EnsembleSpec(m, 10, 1e-3, 0.2, rho0=PLUS, snapshot_times=(0.0, 0.2))
    with pytest.raises(ValueError):
        compare_to_pde(spec_fixed, ev, workers=1)


def test_pde_parity_first_moment():
    m = build_scenario("open_qbm", omega=0.0)
    grid = Grid1D.from_spacing(-5, 5, 0.05)
    f0 = gaussian_field(grid, PLUS, 0.0, 0.5)
    ev = evolve(m, f0, 1e-3, 0.3, [0.3])
    spec = EnsembleSpec(m, 600, 1e-3, 0.3, initial_sampler=field_sampler(f0), snapshot_times=(0.3,))
    st = run_ensemble(spec, workers=1)
    rep = compare_to_pde(spec, ev, test_functions=("z",), stats=st, initial_field=f0)
    assert rep.passed, rep.table()


def test_born_plus_state():
    rep = born_rule_histogram(dephasing_spec(n=1000, T=5.0), workers=1)
    assert rep.passed, rep.as_dict()
    assert rep.outcomes == [-1.0, 1.0]


def test_born_already_collapsed():
    spec = EnsembleSpec(build_scenario("dephasing_qubit"), 200, 1e-3, 1.0, rho0=pure_state([1, 0]))
    rep = born_rule_histogram(spec, workers=1)
    assert rep.frequencies.tolist() == [0.0, 1.0] and rep.born_weights.tolist() == [0.0, 1.0]
    assert rep.passed and not spec.keep_final


def test_born_preconditions():
    with pytest.raises(ValueError):
        born_rule_histogram(EnsembleSpec(build_scenario("dephasing_qubit", eta=0.5), 5, 1e-3, 0.1, rho0=PLUS))


def test_eigenprojectors_group_degenerate():
    projs = eigenprojectors(np.diag([1.0, 1.0, -2.0]))
    assert [lam for lam, _ in projs] == [-2.0, 1.0]
    assert np.allclose(projs[1][1], np.diag([1, 1, 0]))


def test_failures_carry_trajectory_index():
    m = build_scenario("rabi_measured_qubit", gamma=50.0)
    spec = EnsembleSpec(m, 20, 0.05, 1.0, rho0=PLUS, scheme="euler")
    with pytest.raises(EnsembleError) as err:
        run_ensemble(spec, workers=1)
    assert err.value.indices and all(0 <= i < 20 for i in err.value.indices)


def test_spec_validation():
    with pytest.raises(ValueError):
        dephasing_spec(n=0)
    with pytest.raises(ValueError):
        dephasing_spec(snapshot_times=[2.0])
    with pytest.raises(ValueError):
        EnsembleSpec(build_scenario("dephasing_qubit"), 5, 1e-3, 1.0)


def test_outputs(tmp_path):
    m = build_scenario("open_qbm")
    spec = EnsembleSpec(m, 50, 1e-3, 0.1, rho0=PLUS, hist_edges=np.linspace(-1, 1, 5))
    st = run_ensemble(spec, workers=1)
    st.save_json(tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["n"] == 50
    st.save_histogram_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0].startswith("t")
