"""Dense primal-dual interior-point solver for smooth constrained NLPs.

Problem form:

    min_x  f(x, p)
    s.t.   c_E(x, p)  = 0
           c_I(x, p) <= 0
           lb <= x <= ub

Inequalities get slacks (c_I + s = 0, s > 0); finite variable bounds are
handled with their own barrier terms, so a converged primal is always
strictly inside its box.  The barrier parameter follows a monotone
Fiacco-McCormick schedule with a fraction-to-boundary rule, an l2-penalty
line search, and inertia-corrected LDL^T factorizations of the reduced
KKT system (lambda*I added and doubled on non-positive curvature).

Inequality multipliers come out of the solve directly, which is what the
Lagrangian-based parameter sensitivities downstream need.  Sized for
desk-scale optimal control problems (tens to low hundreds of variables);
everything is dense.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg.lapack import dsytrf as _dsytrf, dsytrs as _dsytrs

__all__ = [
    "NlpProblem",
    "NlpSolution",
    "SolverOptions",
    "PrimalDualGuess",
    "SolverStatus",
    "InteriorPointSolver",
    "solve_nlp",
    "kkt_residual",
    "finite_difference_problem",
]


class SolverStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max-iterations"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class NlpProblem:
    """Callback bundle describing one parametric NLP.

    All callbacks take (x, p) with p the exogenous parameter vector and
    must be deterministic.  Derivatives are supplied analytically by the
    caller; see finite_difference_problem() for a testing-only fallback.

    lagrangian_hessian(x, p, obj_scale, y, z) must return
    obj_scale * d2f + sum_i y_i d2cE_i + sum_j z_j d2cI_j  as an (n, n)
    symmetric array.
    """

    n: int
    m_eq: int
    m_ineq: int
    objective: Callable
    gradient: Callable
    eq_constraints: Optional[Callable] = None
    eq_jacobian: Optional[Callable] = None
    ineq_constraints: Optional[Callable] = None
    ineq_jacobian: Optional[Callable] = None
    lagrangian_hessian: Optional[Callable] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.lower is None:
            self.lower = np.full(self.n, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.n, np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bound arrays must have length n")
        if self.m_eq > 0 and (self.eq_constraints is None or self.eq_jacobian is None):
            raise ValueError("equality callbacks missing")
        if self.m_ineq > 0 and (self.ineq_constraints is None or self.ineq_jacobian is None):
            raise ValueError("inequality callbacks missing")

    # constraint evaluation helpers that tolerate empty blocks
    def eval_eq(self, x, p):
        if self.m_eq == 0:
            return np.zeros(0)
        return np.asarray(self.eq_constraints(x, p), dtype=float)

    def eval_eq_jac(self, x, p):
        if self.m_eq == 0:
            return np.zeros((0, self.n))
        return np.asarray(self.eq_jacobian(x, p), dtype=float)

    def eval_ineq(self, x, p):
        if self.m_ineq == 0:
            return np.zeros(0)
        return np.asarray(self.ineq_constraints(x, p), dtype=float)

    def eval_ineq_jac(self, x, p):
        if self.m_ineq == 0:
            return np.zeros((0, self.n))
        return np.asarray(self.ineq_jacobian(x, p), dtype=float)

    def eval_hess(self, x, p, obj_scale, y, z):
        if self.lagrangian_hessian is None:
            raise ValueError("problem provides no Lagrangian Hessian")
        return np.asarray(self.lagrangian_hessian(x, p, obj_scale, y, z), dtype=float)


@dataclass
class SolverOptions:
    kkt_tol: float = 1e-8
    max_iter: int = 200
    warm_start: bool = True
    mu_init: float = 0.1
    # barrier schedule and globalization constants
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    tau_min: float = 0.99
    kappa_sigma: float = 1e10
    armijo_eta: float = 1e-4
    reg_init: float = 1e-8
    reg_max: float = 1e20

    def __post_init__(self):
        if self.kkt_tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class PrimalDualGuess:
    """Optional warm start: primal point plus any multipliers available."""

    x: np.ndarray
    y: Optional[np.ndarray] = None          # equality multipliers
    z: Optional[np.ndarray] = None          # inequality multipliers (>= 0)
    z_lower: Optional[np.ndarray] = None
    z_upper: Optional[np.ndarray] = None


@dataclass
class NlpSolution:
    x: np.ndarray
    y: np.ndarray                 # equality multipliers
    z: np.ndarray                 # inequality multipliers, componentwise >= 0
    z_lower: np.ndarray           # multipliers of finite lower bounds
    z_upper: np.ndarray
    objective: float
    status: SolverStatus
    iterations: int
    kkt_residual: float

    @property
    def converged(self) -> bool:
        return self.status is SolverStatus.CONVERGED

    @property
    def ineq_mult(self) -> np.ndarray:
        return self.z


def _kkt_terms_from(grad, c_eq, c_in, J_eq, J_in, lo, hi,
                    x, y, z, z_lower, z_upper):
    """(stationarity, feasibility, complementarity) inf-norms from
    pre-evaluated callbacks."""
    stat = np.asarray(grad, dtype=float).copy()
    if c_eq.size:
        stat += J_eq.T @ y
    if c_in.size:
        stat += J_in.T @ z
    stat -= z_lower
    stat += z_upper
    stationarity = float(np.max(np.abs(stat))) if stat.size else 0.0

    feas = 0.0
    if c_eq.size:
        feas = max(feas, float(np.max(np.abs(c_eq))))
    if c_in.size:
        feas = max(feas, float(np.max(np.maximum(c_in, 0.0))))
    feas = max(feas, float(np.max(np.maximum(lo - x, 0.0), initial=0.0)))
    feas = max(feas, float(np.max(np.maximum(x - hi, 0.0), initial=0.0)))

    comp = 0.0
    if c_in.size:
        comp = max(comp, float(np.max(np.abs(z * c_in))))
    fin_lo = np.isfinite(lo)
    fin_hi = np.isfinite(hi)
    if fin_lo.any():
        comp = max(comp, float(np.max(np.abs(z_lower[fin_lo] * (x - lo)[fin_lo]))))
    if fin_hi.any():
        comp = max(comp, float(np.max(np.abs(z_upper[fin_hi] * (hi - x)[fin_hi]))))
    return stationarity, feas, comp


def _kkt_terms(problem: NlpProblem, p, x, y, z, z_lower, z_upper):
    """(stationarity, feasibility, complementarity) inf-norms at a point."""
    return _kkt_terms_from(
        np.asarray(problem.gradient(x, p), dtype=float),
        problem.eval_eq(x, p), problem.eval_ineq(x, p),
        problem.eval_eq_jac(x, p), problem.eval_ineq_jac(x, p),
        problem.lower, problem.upper, x, y, z, z_lower, z_upper)


def kkt_residual(problem: NlpProblem, parameter, candidate) -> float:
    """Max of stationarity, constraint-violation and complementarity norms.

    Zero exactly at a KKT point.  candidate is an NlpSolution or a mapping
    with keys x, y, z, z_lower, z_upper (missing multipliers default to 0).
    """
    p = np.asarray(parameter, dtype=float)
    if isinstance(candidate, NlpSolution):
        x, y, z = candidate.x, candidate.y, candidate.z
        zl, zu = candidate.z_lower, candidate.z_upper
    else:
        x = np.asarray(candidate["x"], dtype=float)
        y = np.asarray(candidate.get("y", np.zeros(problem.m_eq)), dtype=float)
        z = np.asarray(candidate.get("z", np.zeros(problem.m_ineq)), dtype=float)
        zl = np.asarray(candidate.get("z_lower", np.zeros(problem.n)), dtype=float)
        zu = np.asarray(candidate.get("z_upper", np.zeros(problem.n)), dtype=float)
    return float(max(_kkt_terms(problem, p, x, y, z, zl, zu)))


def _ldl_factor(K: np.ndarray):
    """Bunch-Kaufman LDL^T factorization with inertia (LAPACK sytrf).

    Returns (solve, n_pos, n_neg, singular) where solve(b) applies K^{-1}.
    Pivots are classified by sign only: interior-point KKT systems are
    legitimately ill-conditioned near convergence, so magnitude thresholds
    would misread them.  An exactly zero pivot marks singularity.
    """
    ldu, ipiv, info = _dsytrf(K, lower=1)
    if info < 0:
        raise ValueError(f"dsytrf failed with info={info}")
    singular = info > 0
    m = K.shape[0]
    n_pos = n_neg = 0
    i = 0
    while i < m:
        if ipiv[i] >= 0:
            val = ldu[i, i]
            if val > 0.0:
                n_pos += 1
            elif val < 0.0:
                n_neg += 1
            else:
                singular = True
            i += 1
        else:
            # 2x2 pivot block: one positive, one negative eigenvalue
            det = ldu[i, i] * ldu[i + 1, i + 1] - ldu[i + 1, i] ** 2
            if det == 0.0:
                singular = True
            n_pos += 1
            n_neg += 1
            i += 2

    def solve(b):
        out, info_s = _dsytrs(ldu, ipiv, b, lower=1)
        if info_s != 0:
            raise ValueError(f"dsytrs failed with info={info_s}")
        return out

    return solve, n_pos, n_neg, singular


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    """Largest alpha in (0, 1] with v + alpha dv >= (1 - tau) v (v > 0)."""
    if v.size == 0:
        return 1.0
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


class InteriorPointSolver:
    """One solver instance per concurrent activity; holds scratch state."""

    def __init__(self, options: Optional[SolverOptions] = None):
        self.options = options or SolverOptions()
        self.last_reg = 0.0
        self.trace = []          # per-iteration diagnostics of the last solve

    def solve(self, problem: NlpProblem, parameter,
              guess: Optional[PrimalDualGuess] = None) -> NlpSolution:
        opt = self.options
        p = np.asarray(parameter, dtype=float)
        n, m_eq, m_in = problem.n, problem.m_eq, problem.m_ineq
        lo, hi = problem.lower, problem.upper
        fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)

        if np.any(lo[fin_lo & fin_hi] > hi[fin_lo & fin_hi]):
            return self._finish(problem, p, np.zeros(n), np.zeros(m_eq),
                                np.zeros(m_in), np.zeros(n), np.zeros(n),
                                SolverStatus.INFEASIBLE, 0)

        # a guess is a true warm start only when it carries dual info;
        # a bare primal point still seeds x but gets the cold treatment
        warm = opt.warm_start and guess is not None and (
            guess.z is not None or guess.y is not None
            or guess.z_lower is not None)
        x = self._initial_primal(problem, guess, warm)
        c_in = problem.eval_ineq(x, p)
        if not np.all(np.isfinite(c_in)) or not np.isfinite(problem.objective(x, p)):
            return self._finish(problem, p, x, np.zeros(m_eq), np.zeros(m_in),
                                np.zeros(n), np.zeros(n),
                                SolverStatus.NUMERICAL_FAILURE, 0)

        s = np.maximum(-c_in, 1e-8 if warm else 1e-2)
        z = None
        if warm and guess.z is not None:
            z = np.maximum(np.asarray(guess.z, dtype=float), 1e-10)
        zl = np.where(fin_lo, 1.0, 0.0)
        zu = np.where(fin_hi, 1.0, 0.0)
        if warm and guess.z_lower is not None:
            zl = np.where(fin_lo, np.maximum(guess.z_lower, 1e-10), 0.0)
        if warm and guess.z_upper is not None:
            zu = np.where(fin_hi, np.maximum(guess.z_upper, 1e-10), 0.0)

        mu_floor = opt.kkt_tol / 20.0
        if warm:
            # complementarity gaps say how far along the barrier path the
            # guess is; the primal residual says how far off it sits.  A mu
            # matching the worse of the two avoids asking Newton to hit a
            # nearly-exact central point from an infeasible start.
            gaps = np.concatenate([
                s * (z if z is not None else np.ones_like(s)),
                (x - lo)[fin_lo] * zl[fin_lo], (hi - x)[fin_hi] * zu[fin_hi],
            ])
            feas0 = max(
                float(np.max(np.abs(problem.eval_eq(x, p)), initial=0.0)),
                float(np.max(c_in + s, initial=0.0)),
            )
            mu = float(np.clip(max(np.mean(gaps) if gaps.size else mu_floor,
                                   min(1e-3, feas0 ** 2)),
                               mu_floor, opt.mu_init))
        else:
            mu = opt.mu_init
        if z is None:
            z = np.minimum(mu / s, 1e4) if m_in else np.zeros(0)
        if not (warm and guess.z_lower is not None):
            zl = np.where(fin_lo, np.clip(mu / np.maximum(x - lo, 1e-12), 1e-10, 1e4), 0.0)
        if not (warm and guess.z_upper is not None):
            zu = np.where(fin_hi, np.clip(mu / np.maximum(hi - x, 1e-12), 1e-10, 1e4), 0.0)

        y = self._initial_eq_mult(problem, p, x, z, zl, zu, guess if warm else None)

        tau = min(max(opt.tau_min, 1.0 - mu), 1.0 - 1e-9)
        nu = 1.0                      # l2 penalty weight in the merit
        best_feas = np.inf
        stall = 0
        recent_alphas = []
        wedged = 0
        recenters = 0
        status = SolverStatus.MAX_ITERATIONS
        it = 0
        self.trace = []

        for it in range(opt.max_iter + 1):
            f_grad = np.asarray(problem.gradient(x, p), dtype=float)
            c_eq = problem.eval_eq(x, p)
            c_in = problem.eval_ineq(x, p)
            J_eq = problem.eval_eq_jac(x, p)
            J_in = problem.eval_ineq_jac(x, p)
            if not all(np.all(np.isfinite(a)) for a in (f_grad, c_eq, c_in, J_eq, J_in)):
                status = SolverStatus.NUMERICAL_FAILURE
                break

            stat, feas, comp = _kkt_terms_from(
                f_grad, c_eq, c_in, J_eq, J_in, lo, hi, x, y, z, zl, zu)
            err0 = max(stat, feas, comp)
            if err0 <= opt.kkt_tol:
                status = SolverStatus.CONVERGED
                break
            if it == opt.max_iter:
                break

            # infeasible problems show as persistent violation with the
            # steps collapsing; transient midgame violations do not count
            if feas < best_feas - 1e-10:
                best_feas = feas
                stall = 0
            else:
                stall += 1
            if (stall > 25 and feas > 1e4 * opt.kkt_tol
                    and len(recent_alphas) >= 10
                    and max(recent_alphas[-10:]) < 1e-6):
                # only call it infeasible if the run never came close to
                # feasibility; a wedge after a feasible phase is numerical
                status = (SolverStatus.INFEASIBLE
                          if best_feas > 1e3 * opt.kkt_tol
                          else SolverStatus.NUMERICAL_FAILURE)
                break

            # iterates wedged against a boundary (steps truncated to nothing
            # for several iterations) get their slacks and duals recentered
            # on the barrier path, which changes the step direction shape
            if wedged >= 8 and recenters < 2:
                recenters += 1
                wedged = 0
                mu = max(mu, 1e-2)
                tau = min(max(opt.tau_min, 1.0 - mu), 1.0 - 1e-9)
                if m_in:
                    s = np.maximum(-c_in, 1e-3)
                    z = np.clip(mu / s, 1e-8, 1e8)
                zl = np.where(fin_lo, np.clip(mu / np.maximum(x - lo, 1e-10),
                                              1e-8, 1e8), 0.0)
                zu = np.where(fin_hi, np.clip(mu / np.maximum(hi - x, 1e-10),
                                              1e-8, 1e8), 0.0)
                y = self._initial_eq_mult(problem, p, x, z, zl, zu, None)
                continue

            # barrier-subproblem error drives the monotone mu reduction
            r_slack = c_in + s
            err_mu = max(
                stat,
                float(np.max(np.abs(c_eq), initial=0.0)),
                float(np.max(np.abs(r_slack), initial=0.0)),
                self._comp_error(x, s, z, zl, zu, lo, hi, fin_lo, fin_hi, mu),
            )
            while err_mu <= opt.kappa_eps * mu and mu > mu_floor:
                mu = max(mu_floor, min(opt.kappa_mu * mu, mu ** opt.theta_mu))
                tau = min(max(opt.tau_min, 1.0 - mu), 1.0 - 1e-9)
                err_mu = max(
                    stat,
                    float(np.max(np.abs(c_eq), initial=0.0)),
                    float(np.max(np.abs(r_slack), initial=0.0)),
                    self._comp_error(x, s, z, zl, zu, lo, hi, fin_lo, fin_hi, mu),
                )

            step = self._compute_step(
                problem, p, x, s, y, z, zl, zu, mu,
                f_grad, c_eq, c_in, J_eq, J_in, fin_lo, fin_hi)
            if step is None:
                status = SolverStatus.NUMERICAL_FAILURE
                break
            dx, ds, dy, dz, dzl, dzu = step

            # fraction-to-boundary step limits (primal and dual separately)
            alpha_pri = min(
                _fraction_to_boundary(s, ds, tau),
                _fraction_to_boundary((x - lo)[fin_lo], dx[fin_lo], tau),
                _fraction_to_boundary((hi - x)[fin_hi], -dx[fin_hi], tau),
            )
            alpha_dual = min(
                _fraction_to_boundary(z, dz, tau),
                _fraction_to_boundary(zl[fin_lo], dzl[fin_lo], tau),
                _fraction_to_boundary(zu[fin_hi], dzu[fin_hi], tau),
            )

            # keep the penalty weight above the multiplier estimate, but let
            # it decay after transient spikes; a grossly oversized nu pins
            # the line search to tiny steps indefinitely
            nu_req = 1.1 * float(np.max(np.abs(np.concatenate(
                [y + dy, z + dz])), initial=0.0)) + 10.0
            if nu < nu_req:
                nu = nu_req
            elif nu > 100.0 * nu_req:
                nu = 10.0 * nu_req
            alpha = self._line_search(problem, p, x, s, dx, ds, mu, nu,
                                      f_grad, c_eq, c_in, J_eq, J_in,
                                      lo, hi, fin_lo, fin_hi, alpha_pri)
            if alpha is None:
                # steps rejected outright: either genuinely stuck on an
                # infeasible problem or a numerical dead end
                if feas > 1e4 * opt.kkt_tol and best_feas > 1e3 * opt.kkt_tol:
                    status = SolverStatus.INFEASIBLE
                else:
                    status = SolverStatus.NUMERICAL_FAILURE
                break

            self.trace.append(dict(it=it, mu=mu, err=err0, stat=stat, feas=feas,
                                   comp=comp, alpha=alpha, alpha_max=alpha_pri,
                                   reg=self.last_reg, nu=nu))
            recent_alphas.append(alpha)
            if alpha <= 1e-3 * alpha_pri or alpha_pri <= 1e-3:
                wedged += 1
            else:
                wedged = 0
            # one steplength for the whole triple (duals additionally capped
            # by their own fraction-to-boundary limit); independent dual
            # steps destabilize badly when the merit truncates alpha
            alpha_z = min(alpha, alpha_dual)
            x = x + alpha * dx
            s = s + alpha * ds
            y = y + alpha * dy
            z = z + alpha_z * dz
            zl = zl + alpha_z * dzl
            zu = zu + alpha_z * dzu
            # keep duals consistent with the barrier (Ipopt's kappa_sigma box)
            if m_in:
                z = np.clip(z, mu / (opt.kappa_sigma * s), opt.kappa_sigma * mu / s)
            zl[fin_lo] = np.clip(zl[fin_lo],
                                 mu / (opt.kappa_sigma * (x - lo)[fin_lo]),
                                 opt.kappa_sigma * mu / (x - lo)[fin_lo])
            zu[fin_hi] = np.clip(zu[fin_hi],
                                 mu / (opt.kappa_sigma * (hi - x)[fin_hi]),
                                 opt.kappa_sigma * mu / (hi - x)[fin_hi])

        return self._finish(problem, p, x, y, z, zl, zu, status, it)

    # -- pieces ---------------------------------------------------------

    def _initial_primal(self, problem, guess, warm):
        lo, hi = problem.lower, problem.upper
        if guess is not None:
            x = np.asarray(guess.x, dtype=float).copy()
        else:
            x = np.zeros(problem.n)
        # push strictly inside the box; gentle when warm so a re-solve from
        # an optimal point stays put
        kappa = 1e-12 if warm else 1e-2
        fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
        both = fin_lo & fin_hi
        width = np.where(both, hi - lo, np.inf)
        push_lo = np.where(fin_lo, np.minimum(kappa * np.maximum(1.0, np.abs(lo)),
                                              0.25 * width), 0.0)
        push_hi = np.where(fin_hi, np.minimum(kappa * np.maximum(1.0, np.abs(hi)),
                                              0.25 * width), 0.0)
        x = np.where(fin_lo, np.maximum(x, lo + push_lo), x)
        x = np.where(fin_hi, np.minimum(x, hi - push_hi), x)
        return x

    def _initial_eq_mult(self, problem, p, x, z, zl, zu, guess):
        if problem.m_eq == 0:
            return np.zeros(0)
        if guess is not None and guess.y is not None:
            return np.asarray(guess.y, dtype=float).copy()
        grad = np.asarray(problem.gradient(x, p), dtype=float)
        rhs = grad - zl + zu
        if problem.m_ineq:
            rhs = rhs + problem.eval_ineq_jac(x, p).T @ z
        J_eq = problem.eval_eq_jac(x, p)
        y, *_ = np.linalg.lstsq(J_eq.T, -rhs, rcond=None)
        if np.max(np.abs(y), initial=0.0) > 1e3:
            y = np.zeros(problem.m_eq)
        return y

    @staticmethod
    def _comp_error(x, s, z, zl, zu, lo, hi, fin_lo, fin_hi, mu):
        comp = 0.0
        if s.size:
            comp = max(comp, float(np.max(np.abs(s * z - mu))))
        if fin_lo.any():
            comp = max(comp, float(np.max(np.abs((x - lo)[fin_lo] * zl[fin_lo] - mu))))
        if fin_hi.any():
            comp = max(comp, float(np.max(np.abs((hi - x)[fin_hi] * zu[fin_hi] - mu))))
        return comp

    def _compute_step(self, problem, p, x, s, y, z, zl, zu, mu,
                      f_grad, c_eq, c_in, J_eq, J_in, fin_lo, fin_hi):
        opt = self.options
        n, m_eq = problem.n, problem.m_eq
        lo, hi = problem.lower, problem.upper
        dl = np.where(fin_lo, x - lo, 1.0)
        du = np.where(fin_hi, hi - x, 1.0)
        sig_lo = np.where(fin_lo, zl / dl, 0.0)
        sig_hi = np.where(fin_hi, zu / du, 0.0)

        W = problem.eval_hess(x, p, 1.0, y, z)
        if not np.all(np.isfinite(W)):
            return None

        r_stat = f_grad + (J_eq.T @ y if m_eq else 0.0) - zl + zu
        if problem.m_ineq:
            r_stat = r_stat + J_in.T @ z
        r_slack = c_in + s
        sig_s = z / s if problem.m_ineq else np.zeros(0)

        rhs_x = -r_stat.copy()
        if problem.m_ineq:
            rhs_x -= J_in.T @ (sig_s * r_slack - z + mu / s)
        rhs_x -= np.where(fin_lo, zl - mu / dl, 0.0)
        rhs_x += np.where(fin_hi, zu - mu / du, 0.0)

        H = W + np.diag(sig_lo + sig_hi)
        if problem.m_ineq:
            H = H + J_in.T @ (sig_s[:, None] * J_in)

        rhs = np.concatenate([rhs_x, -c_eq])
        rhs_scale = max(float(np.max(np.abs(rhs))), 1.0)
        reg = 0.0
        delta_c = 0.0
        sol = None
        for attempt in range(60):
            K = np.zeros((n + m_eq, n + m_eq))
            K[:n, :n] = H
            if reg:
                K[np.arange(n), np.arange(n)] += reg
            if m_eq:
                K[:n, n:] = J_eq.T
                K[n:, :n] = J_eq
                if delta_c:
                    K[np.arange(n, n + m_eq), np.arange(n, n + m_eq)] -= delta_c
            ok = False
            try:
                solve, n_pos, n_neg, singular = _ldl_factor(K)
                ok = not singular and n_pos == n and n_neg == m_eq
            except Exception:
                singular = True
            if ok:
                cand = solve(rhs)
                # ill-conditioning can give a nominally correct inertia but a
                # useless step; fall through to regularization in that case
                resid = float(np.max(np.abs(K @ cand - rhs)))
                if np.all(np.isfinite(cand)) and resid <= 1e-8 * rhs_scale + 1e-6 * float(
                        np.max(np.abs(cand), initial=1.0)):
                    sol = cand
                    break
            if singular and attempt >= 1 and delta_c == 0.0:
                delta_c = max(1e-12, np.sqrt(np.finfo(float).eps) * mu)
            # non-positive curvature detected: add lambda*I, doubling
            reg = opt.reg_init if reg == 0.0 else 2.0 * reg
            if self.last_reg > 0 and reg < self.last_reg / 100.0:
                reg = self.last_reg / 100.0
            if reg > opt.reg_max:
                return None
        if sol is None:
            return None
        self.last_reg = reg

        dx = sol[:n]
        dy = sol[n:] if m_eq else np.zeros(0)
        if problem.m_ineq:
            ds = -r_slack - J_in @ dx
            dz = -(sig_s * ds) - z + mu / s
        else:
            ds = np.zeros(0)
            dz = np.zeros(0)
        dzl = np.where(fin_lo, -(sig_lo * dx) - zl + mu / dl, 0.0)
        dzu = np.where(fin_hi, (sig_hi * dx) - zu + mu / du, 0.0)
        if not all(np.all(np.isfinite(a)) for a in (dx, ds, dy, dz, dzl, dzu)):
            return None
        return dx, ds, dy, dz, dzl, dzu

    def _line_search(self, problem, p, x, s, dx, ds, mu, nu,
                     f_grad, c_eq, c_in, J_eq, J_in,
                     lo, hi, fin_lo, fin_hi, alpha_max):
        opt = self.options

        def barrier(xv, sv):
            gaps = [sv] if s.size else []
            if fin_lo.any():
                gaps.append((xv - lo)[fin_lo])
            if fin_hi.any():
                gaps.append((hi - xv)[fin_hi])
            if any(np.any(g <= 0.0) for g in gaps):
                return np.inf            # boundary or exterior trial point
            val = problem.objective(xv, p)
            for g in gaps:
                val -= mu * float(np.sum(np.log(g)))
            return val

        def residual_norm(xv, sv):
            r = 0.0
            if problem.m_eq:
                r += float(np.sum(problem.eval_eq(xv, p) ** 2))
            if problem.m_ineq:
                r += float(np.sum((problem.eval_ineq(xv, p) + sv) ** 2))
            return np.sqrt(r)

        phi0 = barrier(x, s)
        theta0 = residual_norm(x, s)
        dphi = float(f_grad @ dx)
        if s.size:
            dphi -= mu * float(np.sum(ds / s))
        if fin_lo.any():
            dphi -= mu * float(np.sum(dx[fin_lo] / (x - lo)[fin_lo]))
        if fin_hi.any():
            dphi += mu * float(np.sum(dx[fin_hi] / (hi - x)[fin_hi]))
        # Newton step makes the linearized residual vanish, so the penalty
        # part decreases at rate -theta0
        d_merit = dphi - nu * theta0

        alpha = alpha_max
        merit0 = phi0 + nu * theta0
        for _ in range(40):
            x_t = x + alpha * dx
            s_t = s + alpha * ds
            val = barrier(x_t, s_t) + nu * residual_norm(x_t, s_t)
            if np.isfinite(val) and val <= merit0 + opt.armijo_eta * alpha * d_merit:
                return alpha
            alpha *= 0.5
            if alpha < 1e-12:
                break
        return None

    def _finish(self, problem, p, x, y, z, zl, zu, status, iterations):
        try:
            obj = float(problem.objective(x, p))
        except Exception:
            obj = np.nan
        res = float(max(_kkt_terms(problem, p, x, y, z, zl, zu)))
        return NlpSolution(x=x, y=y, z=z, z_lower=zl, z_upper=zu,
                           objective=obj, status=status,
                           iterations=iterations, kkt_residual=res)


def solve_nlp(problem: NlpProblem, parameter,
              guess: Optional[PrimalDualGuess] = None,
              options: Optional[SolverOptions] = None) -> NlpSolution:
    """Solve one NLP instance; see InteriorPointSolver for the algorithm."""
    return InteriorPointSolver(options).solve(problem, parameter, guess)


def finite_difference_problem(problem: NlpProblem, step: float = 1e-6) -> NlpProblem:
    """Testing-only fallback: derivative callbacks from central differences.

    Keeps the value callbacks of `problem` and replaces gradient, Jacobians
    and the Lagrangian Hessian with O(step^2) approximations.
    """

    def grad(x, p):
        return _fd_grad(lambda v: problem.objective(v, p), x, step)

    def eq_jac(x, p):
        return _fd_jac(lambda v: problem.eval_eq(v, p), x, problem.m_eq, step)

    def in_jac(x, p):
        return _fd_jac(lambda v: problem.eval_ineq(v, p), x, problem.m_ineq, step)

    def hess(x, p, obj_scale, y, z):
        def lag_grad(v):
            g = obj_scale * _fd_grad(lambda w: problem.objective(w, p), v, step)
            if problem.m_eq:
                g = g + _fd_jac(lambda w: problem.eval_eq(w, p), v, problem.m_eq, step).T @ y
            if problem.m_ineq:
                g = g + _fd_jac(lambda w: problem.eval_ineq(w, p), v, problem.m_ineq, step).T @ z
            return g
        Hm = _fd_jac(lag_grad, x, problem.n, step * 10)
        return 0.5 * (Hm + Hm.T)

    return NlpProblem(
        n=problem.n, m_eq=problem.m_eq, m_ineq=problem.m_ineq,
        objective=problem.objective, gradient=grad,
        eq_constraints=problem.eq_constraints, eq_jacobian=eq_jac if problem.m_eq else None,
        ineq_constraints=problem.ineq_constraints,
        ineq_jacobian=in_jac if problem.m_ineq else None,
        lagrangian_hessian=hess,
        lower=problem.lower.copy(), upper=problem.upper.copy(),
    )


def _fd_grad(fun, x, h):
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _fd_jac(fun, x, m, h):
    J = np.zeros((m, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h)
    return J
