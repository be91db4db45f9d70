"""Driver loop: observables, output formats, ensembles, reproducibility."""

import io
import math

import numpy as np
import pytest

from qtraj import (
    FIELD,
    SPIN,
    FreedomSpec,
    IntegratorConfig,
    ModelOperators,
    MovingBasisParams,
    OutputSpec,
    RunConfig,
    StateVector,
    Unraveling,
    basis_state,
    coherent_state,
    create,
    destroy,
    expectation,
    number,
    product_state,
    run_ensemble,
    run_single,
    sigma_minus,
    sigma_plus,
    variance,
)


def damped_cavity(dim=6, gamma=0.5):
    model = ModelOperators(number(0), [math.sqrt(2 * gamma) * destroy(0)])
    return model, basis_state(dim, 1)


def decaying_atom(kappa=0.1):
    model = ModelOperators(None, [math.sqrt(2 * kappa) * sigma_minus(0)])
    return model, basis_state(2, 1, SPIN)


def quiet(**kw):
    kw.setdefault("stream", io.StringIO())
    return kw


# --- observables -------------------------------------------------------------


def test_expectation_and_variance_coherent():
    # Poisson photon statistics: <n> = var n = |alpha|^2
    psi = coherent_state(25, 0.6 - 0.2j)
    n = number(0)
    assert expectation(n, psi) == pytest.approx(0.4, abs=1e-12)
    assert variance(n, psi) == pytest.approx(0.4, abs=1e-10)


def test_variance_superposition():
    # (|0> + |2>)/sqrt(2): <n> = 1, <n^2> = 2, var = 1
    psi = (basis_state(6, 0) + basis_state(6, 2)).normalize()
    assert expectation(number(0), psi) == pytest.approx(1.0, abs=1e-12)
    assert variance(number(0), psi) == pytest.approx(1.0, abs=1e-12)


def test_variance_spin_eigenstate_is_zero():
    from qtraj import sigma_z
    psi = basis_state(2, 1, SPIN)
    assert variance(sigma_z(0), psi) == pytest.approx(0.0, abs=1e-14)


# --- config validation -------------------------------------------------------


def test_runconfig_validation():
    with pytest.raises(ValueError):
        RunConfig(dt=0.0, numdts=1, numsteps=1)
    with pytest.raises(ValueError):
        RunConfig(dt=0.1, numdts=0, numsteps=1)
    with pytest.raises(ValueError):
        RunConfig(dt=0.1, numdts=1, numsteps=-1)
    with pytest.raises(ValueError):
        RunConfig(dt=0.1, numdts=1, numsteps=1, n_trajectories=0)


def test_outputspec_validation():
    n = number(0)
    with pytest.raises(ValueError):
        OutputSpec(operators=())
    with pytest.raises(TypeError):
        OutputSpec(operators=(n, "n"))
    with pytest.raises(ValueError):
        OutputSpec(operators=(n,), file_names=("a.out", "b.out"))
    with pytest.raises(ValueError):
        OutputSpec(operators=(n,), pipe=(1, 2, 3))
    with pytest.raises(ValueError):
        OutputSpec(operators=(n,), pipe=(1, 2, 3, 5))
    with pytest.raises(ValueError):
        OutputSpec(operators=(n,), pipe=(0, 1, 2, 3))


def test_unnormalized_initial_state_rejected():
    model, psi = damped_cavity()
    psi = psi * 2.0
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=1)
    spec = OutputSpec(operators=(number(0),))
    with pytest.raises(ValueError, match="normalized"):
        run_single(psi, model, cfg, spec, **quiet())


def test_lockstep_mode_requires_rk4_and_fixed_basis():
    model, psi = damped_cavity()
    spec = OutputSpec(operators=(number(0),))
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=1, n_trajectories=2,
                    integrator=IntegratorConfig("adaptive", 1e-6))
    with pytest.raises(ValueError, match="lockstep"):
        run_ensemble(psi, model, cfg, spec, mode="lockstep", **quiet())
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=1, n_trajectories=2,
                    moving=MovingBasisParams(n_moving=1))
    with pytest.raises(ValueError, match="lockstep"):
        run_ensemble(psi, model, cfg, spec, mode="lockstep", **quiet())
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=1)
    with pytest.raises(ValueError, match="mode"):
        run_ensemble(psi, model, cfg, spec, mode="batched", **quiet())


# --- shapes, times, formats ---------------------------------------------------


def test_numsteps_zero_records_initial_point_only():
    model, psi = damped_cavity()
    cfg = RunConfig(dt=0.01, numdts=5, numsteps=0)
    spec = OutputSpec(operators=(number(0),))
    res = run_single(psi, model, cfg, spec, **quiet())
    assert res.times.shape == (1,)
    assert res.times[0] == 0.0
    assert res.expectations[0, 0] == pytest.approx(1.0)
    assert len(res.stdout_lines) == 1


def test_times_and_substep_columns():
    model, psi = damped_cavity()
    cfg = RunConfig(dt=0.01, numdts=4, numsteps=3)
    spec = OutputSpec(operators=(number(0),))
    res = run_single(psi, model, cfg, spec, **quiet())
    want = np.array([i * 4 * 0.01 for i in range(4)])
    assert np.array_equal(res.times, want)
    assert res.substeps[0] == 0
    assert np.all(res.substeps[1:] == 4)  # rk4: one substep per dt


def test_stdout_line_shape_and_pipe_mapping():
    model, psi = damped_cavity()
    spec = OutputSpec(operators=(number(0), destroy(0)), pipe=(5, 6, 7, 8))
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=2)
    res = run_single(psi, model, cfg, spec, **quiet())
    assert len(res.stdout_lines) == 3
    for k, line in enumerate(res.stdout_lines):
        toks = line.split()
        assert len(toks) == 7
        assert float(toks[0]) == res.times[k]
        # pipe 5..8 selects the quad of the second operator
        assert float(toks[1]) == res.expectations[1, k].real
        assert float(toks[2]) == res.expectations[1, k].imag
        assert float(toks[3]) == res.variances[1, k].real
        assert float(toks[4]) == res.variances[1, k].imag
        assert int(toks[5]) == res.basis_sizes[k]
        assert int(toks[6]) == res.substeps[k]


def test_file_round_trip_single_and_ensemble(tmp_path):
    model, psi = damped_cavity()
    names = (str(tmp_path / "n.out"), str(tmp_path / "a.out"))
    spec = OutputSpec(operators=(number(0), destroy(0)), file_names=names)
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=3, unraveling=Unraveling.QSD)
    res = run_single(psi, model, cfg, spec, **quiet())
    for i, name in enumerate(names):
        data = np.loadtxt(name)
        assert data.shape == (4, 5)
        # repr round-trips float64 exactly
        assert np.array_equal(data[:, 0], res.times)
        assert np.array_equal(data[:, 1], res.expectations[i].real)
        assert np.array_equal(data[:, 2], res.expectations[i].imag)
        assert np.array_equal(data[:, 3], res.variances[i].real)
        assert np.array_equal(data[:, 4], res.variances[i].imag)

    cfg = RunConfig(dt=0.01, numdts=2, numsteps=3, n_trajectories=3)
    ens = run_ensemble(psi, model, cfg, spec, **quiet())
    for i, name in enumerate(names):
        data = np.loadtxt(name)
        assert data.shape == (4, 7)
        assert np.array_equal(data[:, 1], ens.mean_expectations[i].real)
        assert np.array_equal(data[:, 5], ens.se_re[i])
        assert np.array_equal(data[:, 6], ens.se_im[i])


def test_emitted_stdout_matches_result_lines():
    model, psi = damped_cavity()
    spec = OutputSpec(operators=(number(0),))
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=2)
    buf = io.StringIO()
    res = run_single(psi, model, cfg, spec, stream=buf)
    assert buf.getvalue() == "\n".join(res.stdout_lines) + "\n"


# --- reproducibility and equivalences -----------------------------------------


def test_rerun_is_bitwise_identical():
    model, psi = damped_cavity()
    spec = OutputSpec(operators=(number(0),))
    cfg = RunConfig(dt=0.01, numdts=5, numsteps=4, seed=42)
    a = run_single(psi, model, cfg, spec, **quiet())
    b = run_single(psi, model, cfg, spec, **quiet())
    assert a.stdout_lines == b.stdout_lines
    assert np.array_equal(a.expectations, b.expectations)
    assert np.array_equal(a.variances, b.variances)


def test_ensemble_of_one_equals_single():
    model, psi = damped_cavity()
    spec = OutputSpec(operators=(number(0),))
    cfg = RunConfig(dt=0.01, numdts=5, numsteps=4, seed=7, n_trajectories=1)
    one = run_ensemble(psi, model, cfg, spec, **quiet())
    single = run_single(psi, model, cfg, spec, **quiet())
    assert np.array_equal(one.mean_expectations, single.expectations)
    assert np.array_equal(one.mean_variances, single.variances)
    assert np.all(one.se_re == 0.0) and np.all(one.se_im == 0.0)


@pytest.mark.parametrize("unr", list(Unraveling))
def test_lockstep_equals_serial_exactly(unr):
    model, psi = damped_cavity(dim=5, gamma=0.4)
    spec = OutputSpec(operators=(number(0), destroy(0)))
    cfg = RunConfig(dt=0.02, numdts=5, numsteps=4, seed=11, n_trajectories=6,
                    unraveling=unr)
    lock = run_ensemble(psi, model, cfg, spec, mode="lockstep", **quiet())
    ser = run_ensemble(psi, model, cfg, spec, mode="serial", **quiet())
    assert np.array_equal(lock.mean_expectations, ser.mean_expectations)
    assert np.array_equal(lock.mean_variances, ser.mean_variances)
    assert np.array_equal(lock.se_re, ser.se_re)
    assert np.array_equal(lock.se_im, ser.se_im)
    assert np.array_equal(lock.jumps_per_trajectory, ser.jumps_per_trajectory)
    assert lock.stdout_lines == ser.stdout_lines


def test_auto_mode_picks_lockstep_result():
    model, psi = damped_cavity()
    spec = OutputSpec(operators=(number(0),))
    cfg = RunConfig(dt=0.02, numdts=5, numsteps=2, seed=3, n_trajectories=4)
    auto = run_ensemble(psi, model, cfg, spec, mode="auto", **quiet())
    lock = run_ensemble(psi, model, cfg, spec, mode="lockstep", **quiet())
    assert np.array_equal(auto.mean_expectations, lock.mean_expectations)


# --- statistics ----------------------------------------------------------------


def test_standard_error_shrinks_with_ensemble_size():
    model, psi = damped_cavity(dim=6, gamma=0.5)
    spec = OutputSpec(operators=(number(0),))
    mid = 3
    ses = []
    for n in (100, 400):
        cfg = RunConfig(dt=0.01, numdts=10, numsteps=5, seed=2, n_trajectories=n)
        res = run_ensemble(psi, model, cfg, spec, **quiet())
        ses.append(res.se_re[0, mid])
    ratio = ses[0] / ses[1]
    assert 1.4 < ratio < 2.8  # ~2 expected, wide statistical margin


def test_jump_ensemble_tracks_exponential_decay():
    kappa = 0.1
    model, psi = decaying_atom(kappa)
    spec = OutputSpec(operators=(sigma_plus(0) * sigma_minus(0),))
    cfg = RunConfig(dt=0.005, numdts=40, numsteps=10, seed=5,
                    n_trajectories=400, unraveling=Unraveling.JUMP)
    res = run_ensemble(psi, model, cfg, spec, **quiet())
    for k, t in enumerate(res.times):
        want = math.exp(-2 * kappa * t)
        tol = 4 * res.se_re[0, k] + 2e-3
        assert abs(res.mean_expectations[0, k].real - want) < tol

    # a two-level emitter decays at most once
    assert np.all(res.jumps_per_trajectory <= 1)
    # mean jump count ~ 1 - exp(-2 kappa T)
    want_jumps = 1 - math.exp(-2 * kappa * res.times[-1])
    mean_jumps = res.jumps_per_trajectory.mean()
    se = res.jumps_per_trajectory.std(ddof=1) / math.sqrt(len(res.jumps_per_trajectory))
    assert abs(mean_jumps - want_jumps) < 3 * se + 1e-3


def test_moving_basis_run_matches_fixed_basis():
    # driven leaky cavity; the moving frame needs only a handful of levels
    e_amp, gamma = 1.0, 1.0
    h = 1j * e_amp * (create(0) - destroy(0))
    model = ModelOperators(h, [math.sqrt(2 * gamma) * destroy(0)])
    spec = OutputSpec(operators=(number(0),))
    moving = MovingBasisParams(n_moving=1, cutoff_epsilon=1e-10, pad_size=2,
                               shift_accuracy=1e-8)
    cfg_mov = RunConfig(dt=0.01, numdts=10, numsteps=5, seed=9, moving=moving)
    cfg_fix = RunConfig(dt=0.01, numdts=10, numsteps=5, seed=9)
    res_mov = run_single(basis_state(16, 0), model, cfg_mov, spec, **quiet())
    res_fix = run_single(basis_state(60, 0), model, cfg_fix, spec, **quiet())
    assert np.abs(res_mov.expectations - res_fix.expectations).max() < 1e-6
    # the t=0 row reports the allocation; afterwards the cutoff has trimmed
    assert res_mov.basis_sizes[1:].max() < 16


def test_moving_basis_requires_leading_fields():
    model, psi = decaying_atom()
    spec = OutputSpec(operators=(sigma_plus(0) * sigma_minus(0),))
    cfg = RunConfig(dt=0.01, numdts=2, numsteps=1,
                    moving=MovingBasisParams(n_moving=1))
    with pytest.raises(ValueError, match="field"):
        run_single(psi, model, cfg, spec, **quiet())


def test_multi_freedom_run_with_spin_field():
    # Jaynes-Cummings exchange keeps total excitation number constant
    g = 0.7
    h = g * (sigma_plus(0) * destroy(1) + sigma_minus(0) * create(1))
    model = ModelOperators(h, [])
    psi = product_state([basis_state(2, 1, SPIN), basis_state(5, 0)])
    ntot = sigma_plus(0) * sigma_minus(0) + number(1)
    spec = OutputSpec(operators=(ntot,))
    cfg = RunConfig(dt=0.005, numdts=20, numsteps=4)
    res = run_single(psi, model, cfg, spec, **quiet())
    assert np.abs(res.expectations[0] - 1.0).max() < 1e-9
