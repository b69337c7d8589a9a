import math

import numpy as np
import pytest

from conftest import fluorescence_qubit, two_qubit_model
from oracles import windowed_estimand
from weaktraj.errors import NoPostselectionEvents, StepSizeError
from weaktraj.lindblad import LindbladModel, _rhs, propagate, steady_state
from weaktraj.operators import (Effect, Operator, State, annihilation, basis, projector,
                                random_state, sigma_lower)
from weaktraj.stonybrook import StonyBrookParams, build_stonybrook, h_monte_carlo, h_positive_tau
from weaktraj.trajectories import (MonitoredChannel, completeness_deviation, counting_step,
                                   ensemble_average, ensemble_final_states, homodyne_step,
                                   mean_result, monte_carlo_weak_value, simulate_trajectory,
                                   trajectory_step, weak_meas_operator)
from weaktraj.weakvalue import general_weak_value


def test_monitored_channel_observable():
    ch = MonitoredChannel(sigma_lower())
    assert np.array_equal(ch.X.data, [[0, 1], [1, 0]])


def test_free_measurement_operator():
    dt = 0.01
    M = weak_meas_operator(Operator(np.zeros((2, 2))), 0.0, dt)
    assert np.allclose(M.data, (2 * math.pi / dt) ** -0.25 * np.eye(2))
    with pytest.raises(ValueError):
        weak_meas_operator(sigma_lower(), 0.0, 0.0)


def test_completeness_is_second_order():
    c = annihilation(3)
    devs = [completeness_deviation(c, dt) for dt in (0.02, 0.01, 0.005)]
    for big, small in zip(devs, devs[1:]):
        assert big / small == pytest.approx(4.0, rel=0.2)


def test_mean_result_is_unbiased_to_first_order(rng):
    c = sigma_lower()
    rho = random_state(2, rng)
    target = np.trace((c + c.dag()).data @ rho.data).real
    errs = [abs(mean_result(c, rho, dt) - target) for dt in (0.02, 0.01)]
    assert errs[1] < 0.02
    assert errs[1] < 0.6 * errs[0] + 1e-12


def test_homodyne_step_dark_state():
    a = annihilation(2)
    m = LindbladModel(Operator(np.zeros((3, 3))), [a], homodyne_channel=0)
    vac = State(projector(basis(3, 0)))
    out, xw = homodyne_step(m, vac, 1e-3, 0.0)
    assert np.allclose(out.data, vac.data)
    assert xw == 0


def test_homodyne_current_statistics(rng):
    m = fluorescence_qubit()
    rho = random_state(2, rng)
    dt, n = 1e-3, 100_000
    X = (m.homodyne_op + m.homodyne_op.dag()).data
    target = np.trace(X @ rho.data).real
    dW = rng.normal(0, math.sqrt(dt), n)
    xs = [homodyne_step(m, rho, dt, w)[1] for w in dW[:2000]]
    # the current is affine in dW, so the full sample mean follows directly
    assert xs[0] == pytest.approx(target + dW[0] / dt)
    mean = target + dW.mean() / dt
    assert abs(mean - target) < 3 / math.sqrt(dt * n)


def test_paired_noise_averages_to_liouvillian(rng):
    m = two_qubit_model()
    rho = random_state(m.space, rng)
    dt = 1e-4
    s = math.sqrt(dt)
    plus, _ = homodyne_step(m, rho, dt, s)
    minus, _ = homodyne_step(m, rho, dt, -s)
    avg = 0.5 * (plus.data + minus.data)
    expected = rho.data + dt * _rhs(m._drift, [c.data for c in m.collapse_ops], rho.data)
    assert np.max(np.abs(avg - expected)) < 1e-10


def test_counting_step_examples():
    a = annihilation(2)
    m = LindbladModel(Operator(np.zeros((3, 3))), [a], counting_channel=0)
    vac = State(projector(basis(3, 0)))
    out, jumped = counting_step(m, vac, 1e-3, 0.0)
    assert not jumped
    one = State(projector(basis(3, 1)))
    out, jumped = counting_step(m, one, 1e-3, 0.0)
    assert jumped and np.allclose(out.data, vac.data)
    with pytest.raises(StepSizeError):
        counting_step(m, one, 0.2, 0.5)


def _replay(model, rho0, n_steps, dt, seed):
    rs = np.random.RandomState(seed)
    rho = rho0
    xs, js = [], []
    for _ in range(n_steps):
        dW = math.sqrt(dt) * rs.standard_normal() if model.homodyne_channel is not None else 0.0
        u = rs.random_sample() if model.counting_channel is not None else 1.0
        rho, x, j = trajectory_step(model, rho, dt, dW, u)
        xs.append(x)
        js.append(j)
    return np.array(xs), np.array(js), rho


@pytest.mark.parametrize("name", ["split_y", "two_qubit"])
def test_kernel_matches_reference_step(name):
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5, quadrature="y") if name == "split_y" else two_qubit_model()
    rho0 = State.from_ket(basis(m.dim, m.dim - 1), m.space)
    dt, n = 1e-2, 400
    for seed in (3, 17):
        rec = simulate_trajectory(m, rho0, n * dt, dt, seed)
        xs, js, rho = _replay(m, rho0, n, dt, seed)
        assert np.array_equal(rec.jumps, rec.times[js])
        assert np.max(np.abs(rec.xw - xs)) < 1e-9
        assert np.max(np.abs(rec.final_state - rho.data)) < 1e-11


def test_record_reproducible_and_on_grid():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5)
    rho0 = State.from_ket(basis(2, 1))
    r1 = simulate_trajectory(m, rho0, 3.0, 1e-3, 42)
    r2 = simulate_trajectory(m, rho0, 3.0, 1e-3, 42)
    assert np.array_equal(r1.xw, r2.xw) and np.array_equal(r1.jumps, r2.jumps)
    assert np.all(np.diff(r1.times) > 0)
    assert np.all(np.isin(r1.jumps, r1.times))
    r3 = simulate_trajectory(m, rho0, 3.0, 1e-3, 43)
    assert not np.array_equal(r1.xw, r3.xw)


def test_record_csv(tmp_path):
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5)
    rec = simulate_trajectory(m, State.from_ket(basis(2, 1)), 1.0, 1e-2, 5)
    path = tmp_path / "traj.csv"
    rec.to_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "t,xw,jump"
    assert len(rows) == len(rec.times) + 1
    flags = np.array([int(r.split(",")[2]) for r in rows[1:]])
    assert flags.sum() == len(rec.jumps)


def test_undriven_cavity_gives_pure_noise():
    m = build_stonybrook(StonyBrookParams(epsilon=0.0))
    rho0 = steady_state(m)
    T_end, dt = 10.0, 1e-3
    rec = simulate_trajectory(m, rho0, T_end, dt, 9)
    assert len(rec.jumps) == 0
    # mean of dW/dt over T_end has standard deviation 1/sqrt(T_end)
    assert abs(rec.xw.mean()) < 4 / math.sqrt(T_end)


def test_builtin_noise_moments():
    # X = 0 makes the current pure noise: xw dt = dW
    m = LindbladModel(Operator(np.zeros((2, 2))), [Operator(np.zeros((2, 2)))], homodyne_channel=0)
    dt, n = 1e-3, 1_000_000
    rec = simulate_trajectory(m, State.maximally_mixed(2), n * dt, dt, 2024)
    dW = rec.xw * dt
    assert abs(dW.mean()) < 4 * math.sqrt(dt / n)
    assert abs(np.mean(dW ** 2) - dt) < 4 * dt * math.sqrt(2 / n)


def test_mean_jump_rate_matches_steady_state():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5)
    rho = steady_state(m)
    cn = m.counting_op.data
    rate = np.trace(cn.conj().T @ cn @ rho.data).real
    T_end = 400.0
    rec = simulate_trajectory(m, rho, T_end, 1e-3, 77)
    n = len(rec.jumps)
    # emission is sub-Poissonian (antibunched), so the Poisson width is conservative
    assert abs(n - rate * T_end) < 3 * math.sqrt(rate * T_end)


def test_unconditional_average_matches_master_equation():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.3)
    rho0 = State.from_ket(basis(2, 0))
    t = 1.5
    target = propagate(m, rho0, t).data
    errs = []
    for n in (1000, 10000):
        avg = ensemble_average(m, rho0, t, 1e-3, n, seed=100).data
        errs.append(0.5 * np.abs(np.linalg.eigvalsh(avg - target)).sum())
    assert errs[1] < 5e-2
    assert errs[1] < errs[0]


def test_conditioned_states_stay_valid():
    m = build_stonybrook(StonyBrookParams(epsilon=0.5, eta_h=0.5, eta_c=0.4))
    finals = ensemble_final_states(m, steady_state(m), 2.0, 1e-3, 200, seed=1)
    for rho in finals:
        assert np.max(np.abs(rho - rho.conj().T)) < 1e-12
        assert abs(np.trace(rho) - 1) < 1e-12
        assert np.linalg.eigvalsh(rho)[0] > -1e-6


def test_mc_without_postselection_is_unbiased():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5, quadrature="y")
    rho0 = State.from_ket(basis(2, 0))
    est = monte_carlo_weak_value(m, rho0, 1.0, 1.5, 1e-3, window=0.1, n_traj=20000, seed=5,
                                 postselect=False)
    assert est.n_selected == est.n_total == 20000
    ref = windowed_estimand_unpostselected(m, rho0, 1.0, 0.1)
    assert abs(est.value - ref) < 3 * est.stderr


def windowed_estimand_unpostselected(m, rho0, t, smooth):
    ts = np.linspace(t - smooth, t + smooth, 41)
    c = m.homodyne_op
    X = (c + c.dag()).data
    from weaktraj.lindblad import propagate_series
    vals = [np.trace(X @ r.data).real for r in propagate_series(m, rho0, ts)]
    return np.trapezoid(vals) / 40


def test_mc_estimate_fields():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5, quadrature="y")
    est = monte_carlo_weak_value(m, State.from_ket(basis(2, 0)), 1.0, 2.0, 1e-3, window=0.1,
                                 n_traj=2000, seed=1)
    assert 0 < est.n_selected <= est.n_total
    assert est.window == est.smooth == 0.1
    again = monte_carlo_weak_value(m, State.from_ket(basis(2, 0)), 1.0, 2.0, 1e-3, window=0.1,
                                   n_traj=2000, seed=1)
    assert again == est


def test_mc_preconditions():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5)
    rho0 = State.from_ket(basis(2, 0))
    with pytest.raises(ValueError):
        monte_carlo_weak_value(m, rho0, 2.0, 1.0, 1e-3)
    with pytest.raises(ValueError):
        monte_carlo_weak_value(m, rho0, 1.0, 2.0, 1e-3, window=1e-4)
    with pytest.raises(ValueError):
        monte_carlo_weak_value(fluorescence_qubit(), rho0, 1.0, 2.0, 1e-3)


def test_no_postselection_events():
    m = build_stonybrook(StonyBrookParams(epsilon=0.0))
    with pytest.raises(NoPostselectionEvents):
        monte_carlo_weak_value(m, steady_state(m), 0.05, 0.5, 1e-3, n_traj=50, seed=0)


def test_window_bias_below_acceptance_stderr():
    """The finite windows used for acceptance shift the estimand by less than its stderr."""
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5, quadrature="y")
    g = State.from_ket(basis(2, 0))
    point = general_weak_value(m, g, Effect(projector(basis(2, 1))), 1.0, 2.0).value
    windowed = windowed_estimand(m, g, 1.0, 2.0, 0.2, 0.2, n_grid=21)
    # 0.0142 is the standard error at 2e5 trajectories and window 0.2
    assert abs(windowed - point) < 0.5 * 0.0142


def test_window_shrink_stability():
    m = fluorescence_qubit(eta_h=0.5, eta_c=0.5, quadrature="y")
    g = State.from_ket(basis(2, 0))
    wide = monte_carlo_weak_value(m, g, 1.0, 2.0, 1e-3, window=0.2, n_traj=20000, seed=31)
    narrow = monte_carlo_weak_value(m, g, 1.0, 2.0, 1e-3, window=0.1, n_traj=20000, seed=31)
    assert abs(wide.value - narrow.value) < narrow.stderr


@pytest.mark.slow
def test_stonybrook_monte_carlo_matches_full_master_equation():
    # counting events are rare at the desk drive; a stronger drive keeps this tractable
    p = StonyBrookParams(epsilon=0.5, eta_h=0.5, eta_c=0.5)
    tau = 1.0
    value, stderr, est = h_monte_carlo(p, tau, dt=1e-3, window=0.2, n_traj=20000, seed=7)
    ref = h_positive_tau(p, tau)
    assert est.n_selected > 300
    assert abs(value - ref) < 3 * stderr
