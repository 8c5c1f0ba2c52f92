import numpy as np
import pytest

from nmpcrl.nlp import (NlpProblem, PrimalDualGuess, SolverOptions, SolverStatus,
                        finite_difference_problem, kkt_residual, solve_nlp)

P0 = np.zeros(0)


def quad_with_floor():
    """min x^2 subject to 1 - x <= 0; KKT by hand: x = 1, multiplier 2."""
    return NlpProblem(
        n=1, m_eq=0, m_ineq=1,
        objective=lambda x, p: float(x[0] ** 2),
        gradient=lambda x, p: np.array([2 * x[0]]),
        ineq_constraints=lambda x, p: np.array([1.0 - x[0]]),
        ineq_jacobian=lambda x, p: np.array([[-1.0]]),
        lagrangian_hessian=lambda x, p, sf, y, z: np.array([[2.0 * sf]]),
    )


def equality_qp(seed=0):
    """min 0.5||x||^2 s.t. Ax = b with random 1x3 data."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(1, 3))
    b = rng.normal(size=1)
    problem = NlpProblem(
        n=3, m_eq=1, m_ineq=0,
        objective=lambda x, p: 0.5 * float(x @ x),
        gradient=lambda x, p: x.copy(),
        eq_constraints=lambda x, p: A @ x - b,
        eq_jacobian=lambda x, p: A.copy(),
        lagrangian_hessian=lambda x, p, sf, y, z: sf * np.eye(3),
    )
    return problem, A, b


def test_single_inequality_kkt_by_hand():
    sol = solve_nlp(quad_with_floor(), P0)
    assert sol.status is SolverStatus.CONVERGED
    assert sol.x[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.z[0] == pytest.approx(2.0, abs=1e-6)
    assert sol.objective == pytest.approx(1.0, abs=1e-7)
    assert sol.kkt_residual <= 1e-8


def test_equality_qp_matches_dense_kkt_solve():
    problem, A, b = equality_qp()
    sol = solve_nlp(problem, P0)
    assert sol.converged
    # oracle: the 4x4 KKT linear system solved densely
    K = np.block([[np.eye(3), A.T], [A, np.zeros((1, 1))]])
    xy = np.linalg.solve(K, np.concatenate([np.zeros(3), b]))
    assert np.max(np.abs(sol.x - xy[:3])) < 1e-8
    assert sol.y[0] == pytest.approx(xy[3], abs=1e-8)


def test_contradictory_inequalities_reported_infeasible():
    problem = NlpProblem(
        n=1, m_eq=0, m_ineq=2,
        objective=lambda x, p: float(x[0]),
        gradient=lambda x, p: np.array([1.0]),
        ineq_constraints=lambda x, p: np.array([1.0 - x[0], x[0]]),
        ineq_jacobian=lambda x, p: np.array([[-1.0], [1.0]]),
        lagrangian_hessian=lambda x, p, sf, y, z: np.zeros((1, 1)),
    )
    sol = solve_nlp(problem, P0)
    assert sol.status is SolverStatus.INFEASIBLE


def test_contradictory_bounds_reported_infeasible():
    problem = NlpProblem(
        n=1, m_eq=0, m_ineq=0,
        objective=lambda x, p: float(x[0]),
        gradient=lambda x, p: np.array([1.0]),
        lagrangian_hessian=lambda x, p, sf, y, z: np.zeros((1, 1)),
        lower=np.array([1.0]), upper=np.array([0.0]),
    )
    assert solve_nlp(problem, P0).status is SolverStatus.INFEASIBLE


def test_kkt_residual_zero_at_exact_point():
    res = kkt_residual(quad_with_floor(), P0,
                       {"x": np.array([1.0]), "z": np.array([2.0])})
    assert res <= 1e-14


def test_kkt_residual_detects_perturbation():
    res = kkt_residual(quad_with_floor(), P0,
                       {"x": np.array([1.0 + 1e-3]), "z": np.array([2.0])})
    assert res > 1e-4


def test_kkt_residual_unconstrained_quadratic_minimizer():
    problem = NlpProblem(
        n=2, m_eq=0, m_ineq=0,
        objective=lambda x, p: float((x - 3) @ (x - 3)),
        gradient=lambda x, p: 2 * (x - 3),
        lagrangian_hessian=lambda x, p, sf, y, z: 2 * sf * np.eye(2),
    )
    assert kkt_residual(problem, P0, {"x": np.array([3.0, 3.0])}) == 0.0


def test_warm_start_resolve_is_cheap_and_stable():
    problem = quad_with_floor()
    sol = solve_nlp(problem, P0)
    again = solve_nlp(problem, P0, guess=PrimalDualGuess(
        x=sol.x, z=sol.z, z_lower=sol.z_lower, z_upper=sol.z_upper))
    assert again.converged
    assert again.iterations <= 3
    assert abs(again.objective - sol.objective) <= 1e-10


def test_objective_scaling_scales_value_and_multipliers():
    c = 7.3

    def scaled():
        base = quad_with_floor()
        return NlpProblem(
            n=1, m_eq=0, m_ineq=1,
            objective=lambda x, p: c * float(x[0] ** 2),
            gradient=lambda x, p: np.array([2 * c * x[0]]),
            ineq_constraints=base.ineq_constraints,
            ineq_jacobian=base.ineq_jacobian,
            lagrangian_hessian=lambda x, p, sf, y, z: np.array([[2.0 * c * sf]]),
        )

    plain = solve_nlp(quad_with_floor(), P0)
    big = solve_nlp(scaled(), P0)
    assert big.converged
    assert big.objective == pytest.approx(c * plain.objective, rel=1e-7)
    assert big.z[0] == pytest.approx(c * plain.z[0], rel=1e-6)
    assert abs(big.x[0] - plain.x[0]) < 1e-7


def test_bounds_held_strictly_at_convergence():
    problem = NlpProblem(
        n=2, m_eq=0, m_ineq=0,
        objective=lambda x, p: float((x[0] + 2) ** 2 + (x[1] - 5) ** 2),
        gradient=lambda x, p: np.array([2 * (x[0] + 2), 2 * (x[1] - 5)]),
        lagrangian_hessian=lambda x, p, sf, y, z: 2 * sf * np.eye(2),
        lower=np.array([0.0, -1.0]), upper=np.array([1.0, 1.0]),
    )
    sol = solve_nlp(problem, P0)
    assert sol.converged
    assert np.all(sol.x >= problem.lower) and np.all(sol.x <= problem.upper)
    assert sol.x[0] == pytest.approx(0.0, abs=1e-6)   # active lower bound
    assert sol.x[1] == pytest.approx(1.0, abs=1e-6)   # active upper bound
    assert sol.z_lower[0] == pytest.approx(4.0, abs=1e-5)
    assert sol.z_upper[1] == pytest.approx(8.0, abs=1e-5)


def test_nonconvex_objective_needs_regularization():
    # min -||x||^2 over the box [-1, 2]^2 from an interior start
    problem = NlpProblem(
        n=2, m_eq=0, m_ineq=0,
        objective=lambda x, p: -float(x @ x),
        gradient=lambda x, p: -2 * x,
        lagrangian_hessian=lambda x, p, sf, y, z: -2 * sf * np.eye(2),
        lower=np.array([-1.0, -1.0]), upper=np.array([2.0, 2.0]),
    )
    sol = solve_nlp(problem, P0, guess=PrimalDualGuess(x=np.array([0.5, 0.4])))
    assert sol.converged
    assert np.allclose(np.abs(sol.x), 2.0, atol=1e-6)  # runs to the far corner


def test_rosenbrock_with_constraint():
    # classic curved-valley objective with one active circle constraint
    def f(x, p):
        return float((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)

    def g(x, p):
        return np.array([x[0] ** 2 + x[1] ** 2 - 1.0])

    problem = NlpProblem(
        n=2, m_eq=0, m_ineq=1,
        objective=f,
        gradient=lambda x, p: np.array([
            -2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
            200 * (x[1] - x[0] ** 2)]),
        ineq_constraints=g,
        ineq_jacobian=lambda x, p: np.array([[2 * x[0], 2 * x[1]]]),
        lagrangian_hessian=lambda x, p, sf, y, z: sf * np.array([
            [2 - 400 * (x[1] - 3 * x[0] ** 2), -400 * x[0]],
            [-400 * x[0], 200.0]]) + z[0] * 2 * np.eye(2),
    )
    sol = solve_nlp(problem, P0, guess=PrimalDualGuess(x=np.array([-0.5, 0.5])))
    assert sol.converged
    assert sol.kkt_residual <= 1e-8
    assert float(g(sol.x, P0)[0]) <= 1e-8


def test_parameter_vector_reaches_callbacks():
    problem = NlpProblem(
        n=1, m_eq=0, m_ineq=0,
        objective=lambda x, p: float((x[0] - p[0]) ** 2),
        gradient=lambda x, p: np.array([2 * (x[0] - p[0])]),
        lagrangian_hessian=lambda x, p, sf, y, z: np.array([[2.0 * sf]]),
    )
    for target in (-3.0, 0.5, 11.0):
        sol = solve_nlp(problem, np.array([target]))
        assert sol.x[0] == pytest.approx(target, abs=1e-7)


def test_finite_difference_fallback_solves_small_problem():
    analytic = quad_with_floor()
    fd = finite_difference_problem(analytic)
    sol = solve_nlp(fd, P0, options=SolverOptions(kkt_tol=1e-7))
    assert sol.converged
    assert sol.x[0] == pytest.approx(1.0, abs=1e-5)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(kkt_tol=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iter=0)


def test_converged_implies_residual_below_tolerance_random_qps():
    rng = np.random.default_rng(42)
    for trial in range(20):
        n = int(rng.integers(2, 6))
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.5 * np.eye(n)
        c = rng.normal(size=n)
        lo = np.full(n, -2.0)
        hi = np.full(n, 2.0)
        problem = NlpProblem(
            n=n, m_eq=0, m_ineq=0,
            objective=lambda x, p, H=H, c=c: 0.5 * float(x @ H @ x) + float(c @ x),
            gradient=lambda x, p, H=H, c=c: H @ x + c,
            lagrangian_hessian=lambda x, p, sf, y, z, H=H: sf * H,
            lower=lo, upper=hi,
        )
        sol = solve_nlp(problem, P0)
        assert sol.converged, f"trial {trial} failed: {sol.status}"
        assert sol.kkt_residual <= 1e-8
        assert kkt_residual(problem, P0, sol) == pytest.approx(sol.kkt_residual)
