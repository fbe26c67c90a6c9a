import itertools

import numpy as np
import pytest

from trc import artifacts
from trc import dynamics as dyn
from trc import oracle as orc
from trc.autodiff import numerical_grad, relative_error

FAST = orc.OracleConfig(max_iters=60, restarts=1)


def double_integrator(dt=0.1, T=20, q=1.0, r=1.0, qf=10.0):
    return orc.LQRProblem(A=[[1.0, dt], [0.0, 1.0]], B=[[0.0], [dt]], Q=q * np.eye(2), R=[[r]],
                          Qf=qf * np.eye(2), T=T)


def lqr_cost(lqr, x0, u):
    """Direct evaluation of the quadratic cost for a (T, d_u) sequence."""
    x, J = np.asarray(x0, float), 0.0
    for t in range(lqr.T):
        J += x @ lqr.Q @ x + u[t] @ lqr.R @ u[t]
        x = lqr.A @ x + lqr.B @ u[t]
    return J + x @ lqr.Qf @ x


def control_hessian(lqr):
    """Hessian of the LQR cost in the stacked control vector (scalar input)."""
    n = lqr.A.shape[0]
    T = lqr.T
    # x_t = A^t x0 + sum_s A^(t-1-s) B u_s
    G = np.zeros((T + 1, n, T))
    for t in range(1, T + 1):
        for s in range(t):
            G[t, :, s] = (np.linalg.matrix_power(lqr.A, t - 1 - s) @ lqr.B)[:, 0]
    H = 2 * lqr.R[0, 0] * np.eye(T)
    for t in range(1, T):
        H += 2 * G[t].T @ lqr.Q @ G[t]
    H += 2 * G[T].T @ lqr.Qf @ G[T]
    return H


# -- Riccati -------------------------------------------------------------------
def test_riccati_zero_state_cost():
    lqr = orc.LQRProblem(A=np.eye(2), B=[[1.0], [0.0]], Q=np.zeros((2, 2)), R=[[1.0]], Qf=np.zeros((2, 2)), T=5)
    J, gains = orc.riccati_lqr(lqr, [1.0, -2.0])
    assert J == 0.0
    assert all(np.all(K == 0) for K in gains)


def test_riccati_scalar_by_hand():
    lqr = orc.LQRProblem(A=1.0, B=1.0, Q=1.0, R=1.0, Qf=1.0, T=1)
    J, _ = orc.riccati_lqr(lqr, [1.0])
    assert J == pytest.approx(1.5, abs=1e-12)


def test_riccati_gains_reproduce_cost():
    lqr = double_integrator()
    x0 = np.array([1.0, -0.5])
    J, gains = orc.riccati_lqr(lqr, x0)
    x, u = x0.copy(), []
    for K in gains:
        u.append(-K @ x)
        x = lqr.A @ x + lqr.B @ u[-1]
    assert lqr_cost(lqr, x0, np.array(u)) == pytest.approx(J, rel=1e-12)


def test_riccati_singular_raises():
    lqr = orc.LQRProblem(A=np.eye(2), B=[[1.0, 0.0], [0.0, 0.0]], Q=np.eye(2), R=np.diag([1.0, 1e-16]),
                         Qf=np.eye(2), T=3)
    with pytest.raises(np.linalg.LinAlgError):
        orc.riccati_lqr(lqr, [1.0, 1.0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_riccati_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    lqr = orc.LQRProblem(A=A, B=rng.normal(size=(2, 1)), Q=np.diag(rng.uniform(0.5, 2, 2)),
                         R=[[rng.uniform(0.5, 2)]], Qf=np.diag(rng.uniform(1, 5, 2)), T=3)
    x0 = rng.uniform(-1, 1, 2)
    J, _ = orc.riccati_lqr(lqr, x0)
    levels = np.linspace(-2.0, 2.0, 21)
    h = levels[1] - levels[0]
    best = min(lqr_cost(lqr, x0, np.array(u)[:, None]) for u in itertools.product(levels, repeat=lqr.T))
    # nearest grid point is within h/2 per coordinate of the optimum
    bound = 0.5 * np.linalg.eigvalsh(control_hessian(lqr)).max() * lqr.T * (h / 2) ** 2
    assert J <= best + 1e-12
    assert best - J <= bound


# -- direct shooting -----------------------------------------------------------------
def test_double_integrator_matches_riccati():
    lqr = double_integrator()
    x0 = np.array([1.0, 0.0])
    J_ref, _ = orc.riccati_lqr(lqr, x0)
    problem = lqr.as_control_problem()
    config = orc.OracleConfig()
    s = orc.solve_direct_shooting(problem, x0, config)
    assert abs(s.j_star - J_ref) / J_ref < 0.01
    g = orc.true_cost_gradient(problem, x0[None], s.u_star[None])
    assert np.abs(g).max() < 10 * config.convergence_tol


def test_vdp_at_target_stays_put():
    s = orc.solve_direct_shooting(dyn.vdp_problem(), np.zeros(2), FAST)
    assert np.abs(s.u_star).max() < 1e-9
    assert s.j_star < 1e-12


def test_objective_non_increasing_over_iterations():
    problem = dyn.vdp_problem()
    x0 = np.array([[1.5, -1.0], [-0.7, 1.9]])
    costs = [orc.solve_batch(problem, x0, orc.OracleConfig(max_iters=k, restarts=1))[1] for k in (1, 2, 5, 10, 25, 60)]
    assert np.all(np.diff(np.stack(costs), axis=0) <= 0)


@pytest.mark.parametrize("make", [dyn.vdp_problem, dyn.rocket_problem])
def test_sample_reproduces_cost_and_respects_bounds(make):
    problem = make()
    x0 = orc.sample_initial_states(problem, 3, np.random.default_rng(0))
    cfg = orc.OracleConfig(max_iters=30, restarts=1, penalty_rounds=1)
    u, J, _ = orc.solve_batch(problem, x0, cfg)
    again = dyn.rollout(problem, x0, u).cost.data
    np.testing.assert_allclose(again, J, rtol=1e-9)
    assert np.all(u >= problem.u_min) and np.all(u <= problem.u_max)


def test_rocket_solution_satisfies_thrust_bounds():
    problem = dyn.rocket_problem()
    p = problem.system.params
    x0 = orc.sample_initial_states(problem, 2, np.random.default_rng(3))
    u, _, _ = orc.solve_batch(problem, x0, orc.OracleConfig(max_iters=30, restarts=1, penalty_rounds=1))
    mag = np.linalg.norm(u, axis=-1)
    assert mag.min() >= p.t_min * (1 - 1e-12) and mag.max() <= p.t_max * (1 + 1e-12)


def test_divergence_is_reported():
    problem = dyn.vdp_problem(mu=1e6)
    with np.errstate(all="ignore"), pytest.raises(orc.DivergenceError):
        orc.solve_batch(problem, np.array([[2.0, 2.0]]), FAST)


def test_non_finite_x0_rejected():
    with pytest.raises(ValueError):
        orc.solve_batch(dyn.vdp_problem(), np.array([[np.nan, 0.0]]), FAST)


def test_config_validation():
    with pytest.raises(ValueError):
        orc.OracleConfig(max_iters=0)
    with pytest.raises(ValueError):
        orc.OracleConfig(step_size=0.0)
    with pytest.raises(ValueError):
        orc.OracleConfig(convergence_tol=-1.0)
    assert orc.OracleConfig.from_dict(orc.OracleConfig(restarts=2).to_dict()).restarts == 2


# -- cost gradient --------------------------------------------------------------------
@pytest.mark.parametrize("make", [dyn.vdp_problem, dyn.rocket_problem])
def test_true_cost_gradient_vs_fd(make):
    problem = make()
    rng = np.random.default_rng(7)
    x0 = orc.sample_initial_states(problem, 1, rng)
    if problem.system_id == "rocket":
        u = np.zeros((1, problem.T, 3))
        u[..., 2] = 8000.0
        u += rng.uniform(-500, 500, size=u.shape)
        h = 1e-2
    else:
        u = rng.uniform(-1, 1, size=(1, problem.T, 1))
        h = 1e-5
    g = orc.true_cost_gradient(problem, x0, u)
    fd = numerical_grad(lambda v: dyn.rollout(problem, x0, v).cost.data.sum(), u, h)
    assert relative_error(g, fd) < 1e-5


def test_true_cost_gradient_zero_at_target():
    problem = dyn.vdp_problem()
    g = orc.true_cost_gradient(problem, np.zeros((1, 2)), np.zeros((1, problem.T, 1)))
    assert np.abs(g).max() == 0.0


# -- datasets ------------------------------------------------------------------------
def test_initial_state_ranges():
    rocket = dyn.rocket_problem()
    x = orc.sample_initial_states(rocket, 2000, np.random.default_rng(0))
    assert np.all((x[:, 2] >= 1500) & (x[:, 2] <= 2500))
    assert np.all(np.linalg.norm(x[:, :2], axis=1) <= 500)
    assert np.all((x[:, 5] >= -100) & (x[:, 5] <= -50))
    assert np.all(np.linalg.norm(x[:, 3:5], axis=1) <= 50)
    assert np.all((x[:, 6] >= 1800) & (x[:, 6] <= 2000))
    v = orc.sample_initial_states(dyn.vdp_problem(), 2000, np.random.default_rng(0))
    assert v.min() >= -2 and v.max() <= 2


def test_dataset_generation_is_deterministic(tmp_path):
    problem = dyn.vdp_problem()
    paths = []
    for i in range(2):
        samples, failures = orc.generate_dataset(problem, 4, FAST, seed=42)
        paths.append(tmp_path / f"d{i}.jsonl")
        artifacts.write_dataset(paths[-1], problem, samples, FAST, 42, len(failures))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_generation_error_when_too_many_fail():
    problem = dyn.rocket_problem()
    cfg = orc.OracleConfig(max_iters=1, restarts=1, penalty_rounds=1)
    with pytest.raises(orc.GenerationError):
        orc.generate_dataset(problem, 3, cfg, seed=0)
