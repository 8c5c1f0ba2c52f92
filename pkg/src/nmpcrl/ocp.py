"""Parametrized optimal control problem and its action-value machinery.

The receding-horizon problem minimizes discounted quadratic tracking costs
with linearly penalized slack relaxations of the obstacle constraints:

    min  sum_{i<N} gamma^i (L(x_i, u_i, theta) + omega' sigma_i)
         + gamma^N (V(x_N, theta) + omega_f' sigma_N)
    s.t. x_0 = s,  x_{i+1} = F(x_i, u_i)   (same RK4 map as the plant)
         x_i in state box (i >= 1), u_i in action box
         Xi_n(x_i) + theta_c <= sigma_{i,n},  sigma_i >= 0

with L = ||x - s_ref||^2_diag(tx,ty,tphi)^2 + ||u - u_ref||^2_diag(tv,tnu)^2
and V the terminal analogue with (txf, tyf, tphif).  Squared weights keep
the cost nonnegative for any sign of the tunable parameters.

Fixing the first input with an extra equality turns the value function
into the action-value function; leaving it free yields the greedy policy.
The gradient of the value with respect to the nine tunables comes from
differentiating the Lagrangian at the returned primal-dual point, which
only needs the obstacle-row multipliers, not a re-solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nlp import (InteriorPointSolver, NlpProblem, NlpSolution, PrimalDualGuess,
                  SolverOptions, SolverStatus)
from .robot import Obstacle, RobotState, Scenario, rk4_batch, rk4_derivatives

__all__ = [
    "ThetaVector",
    "NmpcConfig",
    "QEvaluation",
    "OcpProblem",
    "build_ocp",
    "evaluate_q",
    "policy",
    "explore_action",
    "sensitivity",
    "shift_guess",
    "default_exploration_scale",
]

THETA_NAMES = ("x", "y", "phi", "v", "nu", "xf", "yf", "phif", "c")


@dataclass(frozen=True)
class ThetaVector:
    """The nine tunable controller parameters.

    Ordering (fixed, also used by the gradient): stage state weights
    (x, y, phi), stage input weights (v, nu), terminal weights
    (xf, yf, phif), then the constraint-tightening offset c.
    """

    x: float
    y: float
    phi: float
    v: float
    nu: float
    xf: float
    yf: float
    phif: float
    c: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("theta components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi, self.v, self.nu,
                         self.xf, self.yf, self.phif, self.c], dtype=float)

    @staticmethod
    def from_array(arr) -> "ThetaVector":
        vals = np.asarray(arr, dtype=float).ravel()
        if vals.shape != (9,):
            raise ValueError("theta vector must have 9 components")
        return ThetaVector(*[float(v) for v in vals])

    @staticmethod
    def initial() -> "ThetaVector":
        """Default initialization used for training."""
        return ThetaVector.from_array(
            [1.0, 1.0, 0.05, 0.05, 0.05, 1.0, 1.0, 0.1, 0.001])


@dataclass
class NmpcConfig:
    """Controller-side configuration (horizon, discount, boxes, slacks)."""

    horizon: int = 10
    gamma: float = 0.97
    ts: float = 0.2
    action_low: tuple = (-0.6, -math.pi / 2)
    action_high: tuple = (0.6, math.pi / 2)
    state_low: tuple = (-9.0, -9.0)
    state_high: tuple = (12.0, 12.0)
    omega: tuple = (100.0, 100.0, 100.0, 100.0)
    omega_f: tuple = (100.0, 100.0, 100.0, 100.0)
    obstacles: tuple = ()
    s_ref: tuple = (8.5, 2.0, math.pi / 2)
    u_ref: tuple = (0.0, 0.0)
    wrap_heading: bool = False   # wrap phi - phi_ref into (-pi, pi]; off by default

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("discount must lie in (0, 1)")
        self.obstacles = tuple(
            o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles
        )
        self.omega = tuple(float(w) for w in self.omega)
        self.omega_f = tuple(float(w) for w in self.omega_f)
        if any(w < 0 for w in self.omega) or any(w < 0 for w in self.omega_f):
            raise ValueError("slack penalty weights must be nonnegative")
        if len(self.omega) != len(self.obstacles) or len(self.omega_f) != len(self.obstacles):
            raise ValueError(
                f"slack weight length {len(self.omega)}/{len(self.omega_f)} does not "
                f"match obstacle count {len(self.obstacles)}")
        if np.any(np.asarray(self.action_low) >= np.asarray(self.action_high)):
            raise ValueError("action box is empty")

    @staticmethod
    def from_scenario(scenario: Scenario, **overrides) -> "NmpcConfig":
        n_obs = len(scenario.obstacles)
        base = dict(
            obstacles=scenario.obstacles,
            s_ref=tuple(scenario.s_ref),
            u_ref=tuple(scenario.u_ref),
            state_low=tuple(scenario.state_low),
            state_high=tuple(scenario.state_high),
            omega=(100.0,) * n_obs,
            omega_f=(100.0,) * n_obs,
        )
        base.update(overrides)
        return NmpcConfig(**base)


class OcpProblem(NlpProblem):
    """NlpProblem plus the decision-variable layout of the OCP.

    The parameter vector is p = [theta(9), s(3)] or [theta(9), s(3), a(2)]
    when the first input is pinned, so one built problem can be re-solved
    for different parameters (used by the finite-difference oracles).
    """

    def __init__(self, config: NmpcConfig, pinned: bool):
        self.config = config
        self.pinned = pinned
        self._rk4_cache = None
        N = config.horizon
        self.n_obs = len(config.obstacles)
        self.nx = 3 * (N + 1)
        self.nu = 2 * N
        self.nsig = self.n_obs * (N + 1)
        n = self.nx + self.nu + self.nsig
        m_eq = 3 + 3 * N + (2 if pinned else 0)
        m_in = self.n_obs * (N + 1)

        self._gp = config.gamma ** np.arange(N + 1)
        self._sref = np.asarray(config.s_ref, dtype=float)
        self._uref = np.asarray(config.u_ref, dtype=float)
        self._omega = np.asarray(config.omega, dtype=float)
        self._omega_f = np.asarray(config.omega_f, dtype=float)
        self._ocx = np.array([o.x for o in config.obstacles])
        self._ocy = np.array([o.y for o in config.obstacles])
        self._od2 = np.array([(o.d_obs + o.d_rob) ** 2 for o in config.obstacles])

        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)
        # state box on x, y for stages 1..N (stage 0 is pinned to s)
        for i in range(1, N + 1):
            lower[3 * i:3 * i + 2] = config.state_low
            upper[3 * i:3 * i + 2] = config.state_high
        # action box; skipped for u_0 when it is pinned by an equality,
        # otherwise a boundary action would leave no interior
        first = 1 if pinned else 0
        for i in range(first, N):
            lower[self.nx + 2 * i:self.nx + 2 * i + 2] = config.action_low
            upper[self.nx + 2 * i:self.nx + 2 * i + 2] = config.action_high
        lower[self.nx + self.nu:] = 0.0

        super().__init__(
            n=n, m_eq=m_eq, m_ineq=m_in,
            objective=self._objective, gradient=self._gradient,
            eq_constraints=self._eq, eq_jacobian=self._eq_jac,
            ineq_constraints=self._ineq if m_in else None,
            ineq_jacobian=self._ineq_jac if m_in else None,
            lagrangian_hessian=self._hess,
            lower=lower, upper=upper,
        )

    # -- layout helpers ---------------------------------------------------

    def split(self, v):
        N = self.config.horizon
        states = v[:self.nx].reshape(N + 1, 3)
        inputs = v[self.nx:self.nx + self.nu].reshape(N, 2)
        slacks = v[self.nx + self.nu:].reshape(N + 1, self.n_obs)
        return states, inputs, slacks

    def join(self, states, inputs, slacks):
        return np.concatenate([np.ravel(states), np.ravel(inputs), np.ravel(slacks)])

    def parameter(self, theta: ThetaVector, s: RobotState, a=None) -> np.ndarray:
        parts = [theta.as_array(), s.as_array()]
        if self.pinned:
            if a is None:
                raise ValueError("pinned problem needs the first input in p")
            parts.append(np.asarray(a, dtype=float))
        return np.concatenate(parts)

    @staticmethod
    def _theta_weights(p):
        th = p[:9]
        wx = th[0:3] ** 2
        wu = th[3:5] ** 2
        wf = th[5:8] ** 2
        return th, wx, wu, wf

    def _resid(self, states):
        r = states - self._sref
        if self.config.wrap_heading:
            r = r.copy()
            r[:, 2] = np.mod(r[:, 2] + np.pi, 2 * np.pi) - np.pi
        return r

    # -- NLP callbacks -----------------------------------------------------

    def _objective(self, v, p):
        N = self.config.horizon
        _, wx, wu, wf = self._theta_weights(p)
        states, inputs, slacks = self.split(v)
        rx = self._resid(states)
        du = inputs - self._uref
        gp = self._gp
        stage = (rx[:N] ** 2 @ wx) + (du ** 2 @ wu)
        if self.n_obs:
            stage = stage + slacks[:N] @ self._omega
        val = float(gp[:N] @ stage)
        term = float(rx[N] ** 2 @ wf)
        if self.n_obs:
            term += float(slacks[N] @ self._omega_f)
        return val + float(gp[N]) * term

    def _gradient(self, v, p):
        N = self.config.horizon
        _, wx, wu, wf = self._theta_weights(p)
        states, inputs, slacks = self.split(v)
        rx = self._resid(states)
        du = inputs - self._uref
        gp = self._gp
        g_states = np.empty_like(states)
        g_states[:N] = 2.0 * gp[:N, None] * rx[:N] * wx
        g_states[N] = 2.0 * gp[N] * rx[N] * wf
        g_inputs = 2.0 * gp[:N, None] * du * wu
        g_slacks = np.empty_like(slacks)
        if self.n_obs:
            g_slacks[:N] = gp[:N, None] * self._omega
            g_slacks[N] = gp[N] * self._omega_f
        return self.join(g_states, g_inputs, g_slacks)

    def _eq(self, v, p):
        s_k = p[9:12]
        states, inputs, _ = self.split(v)
        nxt = rk4_batch(states[:-1], inputs, self.config.ts)
        parts = [states[0] - s_k, (states[1:] - nxt).ravel()]
        if self.pinned:
            parts.append(inputs[0] - p[12:14])
        return np.concatenate(parts)

    def _rk4_derivs(self, states, inputs, second_order):
        # single-entry memo; the solver evaluates the Jacobian and the
        # Hessian at the same iterate several times per iteration
        key = (states.tobytes(), inputs.tobytes())
        hit = self._rk4_cache
        if hit is not None and hit[0] == key and (hit[3] is not None or not second_order):
            return hit[1], hit[2], hit[3]
        F, DF, D2F = rk4_derivatives(states, inputs, self.config.ts,
                                     second_order=second_order)
        self._rk4_cache = (key, F, DF, D2F)
        return F, DF, D2F

    def _eq_jac(self, v, p):
        N = self.config.horizon
        states, inputs, _ = self.split(v)
        _, DF, _ = self._rk4_derivs(states[:-1], inputs, second_order=False)
        J = np.zeros((self.m_eq, self.n))
        J[0:3, 0:3] = np.eye(3)
        for i in range(N):
            r = 3 + 3 * i
            J[r:r + 3, 3 * (i + 1):3 * (i + 2)] = np.eye(3)
            J[r:r + 3, 3 * i:3 * i + 3] = -DF[i, :, 0:3]
            J[r:r + 3, self.nx + 2 * i:self.nx + 2 * i + 2] = -DF[i, :, 3:5]
        if self.pinned:
            J[3 + 3 * N:5 + 3 * N, self.nx:self.nx + 2] = np.eye(2)
        return J

    def _ineq(self, v, p):
        theta_c = p[8]
        states, _, slacks = self.split(v)
        dx = states[:, 0:1] - self._ocx
        dy = states[:, 1:2] - self._ocy
        xi = 1.0 - 4.0 * (dx ** 2 + dy ** 2) / self._od2
        return (xi + theta_c - slacks).ravel()

    def _ineq_jac(self, v, p):
        N = self.config.horizon
        states, _, _ = self.split(v)
        J = np.zeros((self.m_ineq, self.n))
        dx = states[:, 0:1] - self._ocx
        dy = states[:, 1:2] - self._ocy
        for i in range(N + 1):
            for nob in range(self.n_obs):
                r = i * self.n_obs + nob
                J[r, 3 * i] = -8.0 * dx[i, nob] / self._od2[nob]
                J[r, 3 * i + 1] = -8.0 * dy[i, nob] / self._od2[nob]
                J[r, self.nx + self.nu + r] = -1.0
        return J

    def _hess(self, v, p, obj_scale, y, z):
        N = self.config.horizon
        _, wx, wu, wf = self._theta_weights(p)
        states, inputs, _ = self.split(v)
        gp = self._gp
        H = np.zeros((self.n, self.n))

        diag = np.zeros(self.n)
        for i in range(N):
            diag[3 * i:3 * i + 3] = 2.0 * gp[i] * wx
            diag[self.nx + 2 * i:self.nx + 2 * i + 2] = 2.0 * gp[i] * wu
        diag[3 * N:3 * N + 3] = 2.0 * gp[N] * wf
        H[np.arange(self.n), np.arange(self.n)] = obj_scale * diag

        _, _, D2F = self._rk4_derivs(states[:-1], inputs, second_order=True)
        y_dyn = y[3:3 + 3 * N].reshape(N, 3)
        blocks = -np.einsum("km,kmij->kij", y_dyn, D2F)
        for i in range(N):
            blk = blocks[i]
            sx = slice(3 * i, 3 * i + 3)
            su = slice(self.nx + 2 * i, self.nx + 2 * i + 2)
            H[sx, sx] += blk[0:3, 0:3]
            H[sx, su] += blk[0:3, 3:5]
            H[su, sx] += blk[3:5, 0:3]
            H[su, su] += blk[3:5, 3:5]

        if self.n_obs:
            zz = z.reshape(N + 1, self.n_obs)
            coef = zz @ (-8.0 / self._od2)         # per-stage curvature on x, y
            for i in range(N + 1):
                H[3 * i, 3 * i] += coef[i]
                H[3 * i + 1, 3 * i + 1] += coef[i]
        return H

    # -- guesses ------------------------------------------------------------

    def cold_guess(self, theta: ThetaVector, s: RobotState, a=None) -> PrimalDualGuess:
        """Stationary initialization: hold s, zero inputs, feasible slacks."""
        N = self.config.horizon
        states = np.tile(s.as_array(), (N + 1, 1))
        inputs = np.zeros((N, 2))
        if self.pinned and a is not None:
            inputs[0] = np.asarray(a, dtype=float)
        slacks = self._feasible_slacks(states, theta.c)
        return PrimalDualGuess(x=self.join(states, inputs, slacks))

    def _feasible_slacks(self, states, theta_c):
        if not self.n_obs:
            return np.zeros((states.shape[0], 0))
        dx = states[:, 0:1] - self._ocx
        dy = states[:, 1:2] - self._ocy
        xi = 1.0 - 4.0 * (dx ** 2 + dy ** 2) / self._od2
        return np.maximum(0.0, xi + theta_c)


@dataclass
class QEvaluation:
    """Result of one OCP solve seen through the action-value lens."""

    value: float
    u0: np.ndarray
    u1: np.ndarray
    solution: NlpSolution
    problem: OcpProblem
    theta: ThetaVector
    _grad: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.solution.converged

    @property
    def grad_theta(self) -> np.ndarray:
        """Lazily computed dQ/dtheta at the solved primal-dual point."""
        if self._grad is None:
            self._grad = sensitivity(self.problem, self.solution, self.theta)
        return self._grad


def build_ocp(config: NmpcConfig, s: RobotState, theta: ThetaVector,
              fixed_first_input=None) -> OcpProblem:
    """Assemble the OCP for state s; pin u_0 when an action is supplied.

    The returned problem's default parameter vector embeds (theta, s) and,
    if pinned, the action; pass a different vector to re-solve elsewhere.
    """
    problem = OcpProblem(config, pinned=fixed_first_input is not None)
    problem.default_p = problem.parameter(theta, s, fixed_first_input)
    return problem


def _run_solve(problem: OcpProblem, theta: ThetaVector, s: RobotState, a,
               guess, options, solver) -> QEvaluation:
    ipm = solver if solver is not None else InteriorPointSolver(options)
    if guess is None:
        guess = problem.cold_guess(theta, s, a)
    sol = ipm.solve(problem, problem.default_p, guess)
    _, inputs, _ = problem.split(sol.x)
    lo = np.asarray(problem.config.action_low)
    hi = np.asarray(problem.config.action_high)
    u0 = np.clip(inputs[0], lo, hi)
    u1 = np.clip(inputs[min(1, problem.config.horizon - 1)], lo, hi)
    return QEvaluation(value=sol.objective, u0=u0, u1=u1, solution=sol,
                       problem=problem, theta=theta)


def evaluate_q(config: NmpcConfig, s: RobotState, a, theta: ThetaVector,
               guess: Optional[PrimalDualGuess] = None,
               options: Optional[SolverOptions] = None,
               solver: Optional[InteriorPointSolver] = None) -> QEvaluation:
    """Action-value Q_theta(s, a): OCP value with the first input pinned."""
    a = np.asarray(a, dtype=float)
    problem = build_ocp(config, s, theta, fixed_first_input=a)
    return _run_solve(problem, theta, s, a, guess, options, solver)


def policy(config: NmpcConfig, s: RobotState, theta: ThetaVector,
           guess: Optional[PrimalDualGuess] = None,
           options: Optional[SolverOptions] = None,
           solver: Optional[InteriorPointSolver] = None) -> QEvaluation:
    """Greedy solve: free first input.  value = min_a Q_theta(s, a); u0 is
    the greedy action and u1 the second predicted input (the next-step
    target action used by the one-solve learning variants)."""
    problem = build_ocp(config, s, theta)
    return _run_solve(problem, theta, s, None, guess, options, solver)


def default_exploration_scale(config: NmpcConfig) -> np.ndarray:
    """10% of the action-range half-width, per dimension."""
    lo = np.asarray(config.action_low, dtype=float)
    hi = np.asarray(config.action_high, dtype=float)
    return 0.1 * 0.5 * (hi - lo)


def explore_action(greedy, step_index: int, c_eps: float, noise,
                   scale, action_low, action_high) -> np.ndarray:
    """Greedy action plus exponentially decaying scaled noise, clipped to
    the action box so the resulting action is always admissible."""
    if not (0.0 < c_eps < 1.0):
        raise ValueError("c_eps must lie in (0, 1)")
    a = np.asarray(greedy, dtype=float) + \
        (c_eps ** step_index) * np.asarray(scale, dtype=float) * np.asarray(noise, dtype=float)
    return np.clip(a, np.asarray(action_low, dtype=float),
                   np.asarray(action_high, dtype=float))


def sensitivity(problem: OcpProblem, solution: NlpSolution,
                theta: ThetaVector) -> np.ndarray:
    """Gradient of the OCP value wrt the nine tunables, via the Lagrangian.

    Evaluated at the fixed primal-dual point: the cost terms contribute
    2 theta_j * gamma^i * residual^2 sums and the tightening offset picks
    up the plain sum of obstacle-constraint multipliers (the constraints
    are linear in theta_c).  Requires a converged solution; the gradient
    is undefined at non-KKT points.
    """
    if not solution.converged:
        raise ValueError("sensitivity requires a converged solution "
                         f"(status: {solution.status.value})")
    N = problem.config.horizon
    gp = problem._gp
    states, inputs, _ = problem.split(solution.x)
    rx = problem._resid(states)
    du = inputs - problem._uref
    th = theta.as_array()

    grad = np.zeros(9)
    stage_sq = gp[:N] @ (rx[:N] ** 2)           # (3,) discounted state residuals
    input_sq = gp[:N] @ (du ** 2)               # (2,)
    grad[0:3] = 2.0 * th[0:3] * stage_sq
    grad[3:5] = 2.0 * th[3:5] * input_sq
    grad[5:8] = 2.0 * th[5:8] * gp[N] * rx[N] ** 2
    grad[8] = float(np.sum(solution.z))
    return grad


def shift_guess(problem: OcpProblem, prev: NlpSolution,
                theta: ThetaVector) -> PrimalDualGuess:
    """Receding-horizon warm start: shift the previous solution one stage,
    repeat the tail, and recompute feasible slacks."""
    states, inputs, _ = problem.split(prev.x)
    states_n = np.vstack([states[1:], states[-1:]])
    # a zero tail input holds the last state, keeping the shifted
    # trajectory exactly dynamics-feasible; the slack margin avoids
    # restarting exactly on the degenerate sigma = 0 = constraint corner
    inputs_n = np.vstack([inputs[1:], np.zeros((1, 2))])
    slacks_n = problem._feasible_slacks(states_n, theta.c) + 1e-4
    x = problem.join(states_n, inputs_n, slacks_n)

    # initial-state and dynamics rows are the common equality prefix;
    # pin rows (when present on either side) are dropped or zero-filled
    N = problem.config.horizon
    y = np.zeros(problem.m_eq)
    y[0:3] = prev.y[0:3]
    dyn = prev.y[3:3 + 3 * N].reshape(N, 3)
    y[3:3 + 3 * N] = np.vstack([dyn[1:], dyn[-1:]]).ravel()
    z = prev.z.reshape(N + 1, -1)
    z = np.vstack([z[1:], z[-1:]]).ravel()

    def shift_block(arr, rows, width):
        b = arr.reshape(rows, width)
        return np.vstack([b[1:], b[-1:]]).ravel()

    def shift_bound(mult):
        out = np.concatenate([
            shift_block(mult[:problem.nx], N + 1, 3),
            shift_block(mult[problem.nx:problem.nx + problem.nu], N, 2),
            shift_block(mult[problem.nx + problem.nu:], N + 1, problem.n_obs)
            if problem.n_obs else mult[problem.nx + problem.nu:],
        ])
        return out

    return PrimalDualGuess(x=x, y=y, z=z,
                           z_lower=shift_bound(prev.z_lower),
                           z_upper=shift_bound(prev.z_upper))
