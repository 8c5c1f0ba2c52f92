"""Acceptance suite: one test per release criterion, with a printed verdict.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  The desk-scale learning runs execute once (module fixture) and are
shared by the criteria that inspect them.
"""

import math
import time

import numpy as np
import pytest

from nmpcrl.config import RunConfig
from nmpcrl.harness import train
from nmpcrl.learning import (GesState, TdSample, es_update, ges_update,
                             mspbe_estimate, td_error)
from nmpcrl.neural import AdamState, InputScaler, MlpWeights, train_minibatch
from nmpcrl.ocp import NmpcConfig, ThetaVector, evaluate_q, policy
from nmpcrl.robot import (ControlInput, RobotState, min_obstacle_clearance,
                          smoke_scenario, step_rk4)

SMOKE = smoke_scenario()
CFG = NmpcConfig.from_scenario(SMOKE)
THETA0 = ThetaVector.initial()


def report(name, passed, detail):
    print(f"\nACCEPTANCE {name}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, f"{name}: {detail}"


def _random_state(rng, clear=0.05):
    while True:
        s = RobotState(rng.uniform(-1.5, 5.5), rng.uniform(-2.5, 3.0),
                       rng.uniform(-math.pi, math.pi))
        if min_obstacle_clearance(s, SMOKE.obstacles) > clear:
            return s


def _random_theta(rng, spread=0.2):
    return ThetaVector.from_array(
        THETA0.as_array() * rng.uniform(1 - spread, 1 + spread, size=9))


# -- criterion 1: KKT validity -------------------------------------------------

def test_kkt_validity_on_randomized_ocp_corpus():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n_converged = 0
    worst = 0.0
    total = 60
    for k in range(total):
        s = _random_state(rng)
        theta = _random_theta(rng)
        if k % 2 == 0:
            qe = policy(CFG, s, theta)
        else:
            a = np.array([rng.uniform(-0.55, 0.55),
                          rng.uniform(-1.4, 1.4)])
            qe = evaluate_q(CFG, s, a, theta)
        if qe.converged:
            n_converged += 1
            worst = max(worst, qe.solution.kkt_residual)
    elapsed = time.perf_counter() - t0
    report("KKT validity",
           n_converged >= 50 and worst <= 1e-6 and elapsed <= 120.0,
           f"{n_converged}/{total} converged, worst residual {worst:.2e}, "
           f"{elapsed:.0f}s")


# -- criterion 2: sensitivity correctness ---------------------------------------

def _degenerate(solution, problem, tol_g=1e-5, tol_mu=1e-6):
    """Weakly active rows make the value nondifferentiable in theta."""
    g = problem.eval_ineq(solution.x, problem.default_p)
    if np.any((np.abs(g) < tol_g) & (solution.z < tol_mu)):
        return True
    for gap, mult in (
        (solution.x - problem.lower, solution.z_lower),
        (problem.upper - solution.x, solution.z_upper),
    ):
        finite = np.isfinite(gap)
        if np.any((np.abs(gap[finite]) < tol_g) & (mult[finite] < tol_mu)):
            return True
    return False


def test_sensitivity_matches_finite_differences_on_random_draws():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    accepted = 0
    redrawn = 0
    worst_rel = 0.0
    h = 1e-5
    while accepted < 20:
        s = _random_state(rng, clear=0.3)
        theta = _random_theta(rng, spread=0.15)
        a = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-1.3, 1.3)])
        qe = evaluate_q(CFG, s, a, theta)
        if not qe.converged or _degenerate(qe.solution, qe.problem):
            redrawn += 1
            assert redrawn < 60, "too many degenerate or failed draws"
            continue
        grad = qe.grad_theta
        tharr = theta.as_array()
        # near-zero entries (all constraints inactive) are compared against
        # the gradient's own scale rather than 0/0
        floor = 1e-3 * max(1.0, float(np.max(np.abs(grad))))
        ok = True
        for j in range(9):
            e = np.zeros(9)
            e[j] = h
            up = evaluate_q(CFG, s, a, ThetaVector.from_array(tharr + e))
            dn = evaluate_q(CFG, s, a, ThetaVector.from_array(tharr - e))
            if not (up.converged and dn.converged):
                ok = False
                break
            fd = (up.value - dn.value) / (2 * h)
            rel = abs(grad[j] - fd) / max(abs(fd), floor)
            worst_rel = max(worst_rel, rel)
            if rel > 1e-3:
                report("Sensitivity correctness", False,
                       f"component {j} rel err {rel:.2e} at draw {accepted}")
        if not ok:
            redrawn += 1
            continue
        accepted += 1
    elapsed = time.perf_counter() - t0
    report("Sensitivity correctness",
           accepted >= 20 and worst_rel <= 1e-3 and elapsed <= 300.0,
           f"{accepted} draws ({redrawn} redrawn), worst rel err "
           f"{worst_rel:.2e}, {elapsed:.0f}s")


# -- criterion 3: dynamics fidelity ----------------------------------------------

def test_rk4_matches_analytic_arc_on_grid():
    worst = 0.0
    for v in np.linspace(-0.6, 0.6, 9):
        for nu in [-np.pi / 2, -0.8, -0.2, -1e-6, -1e-12, 0.0,
                   1e-12, 1e-6, 0.2, 0.8, np.pi / 2]:
            got = step_rk4(RobotState(0, 0, 0), ControlInput(v, nu), 0.2).as_array()
            if nu == 0.0:
                want = np.array([v * 0.2, 0.0, 0.0])
            else:
                want = np.array([v / nu * math.sin(nu * 0.2),
                                 v / nu * (1 - math.cos(nu * 0.2)), nu * 0.2])
            worst = max(worst, float(np.max(np.abs(got - want))))
    report("Dynamics fidelity", worst <= 1e-6,
           f"worst |rk4 - arc| = {worst:.2e} over the (v, nu) grid")


# -- criterion 4: update-rule exactness ------------------------------------------

def test_update_rules_match_straight_line_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        theta = rng.normal(size=9)
        w = rng.normal(size=9) * 1e-3
        alpha = 10.0 ** rng.uniform(-8, -1)
        beta = 10.0 ** rng.uniform(-9, -2)
        gamma = rng.uniform(0.5, 0.999)
        phi = rng.normal(size=9)
        phi_next = rng.normal(size=9)
        ell, q, qn = rng.normal(size=3)
        smp = TdSample(stage_cost=ell, q=q, q_next=qn, phi=phi, gamma=gamma,
                       phi_next=phi_next)
        delta = ell + gamma * qn - q
        # straight-line re-implementations
        theta_es = theta + alpha * delta * phi
        theta_ges = theta + alpha * (delta * phi - gamma * (w @ phi) * phi_next)
        w_ges = w + beta * (delta - phi @ w) * phi

        got_es = es_update(ThetaVector.from_array(theta), td_error(smp), phi,
                           alpha).as_array()
        state = ges_update(GesState(theta=ThetaVector.from_array(theta), w=w,
                                    alpha=alpha, beta=beta), smp)
        worst = max(worst,
                    float(np.max(np.abs(got_es - theta_es))),
                    float(np.max(np.abs(state.theta.as_array() - theta_ges))),
                    float(np.max(np.abs(state.w - w_ges))))
        # w = 0 reduction holds exactly
        red = ges_update(GesState(theta=ThetaVector.from_array(theta),
                                  w=np.zeros(9), alpha=alpha, beta=beta), smp)
        if not np.array_equal(red.theta.as_array(), got_es):
            report("Update-rule exactness", False, "w=0 reduction mismatch")
    report("Update-rule exactness", worst <= 1e-15,
           f"worst deviation {worst:.2e} over 1000 samples; w=0 reduction exact")


# -- criterion 5: gradient-TD convergence oracle ----------------------------------

GAMMA_MDP = 0.9
TRANS = {(0, 0): 1, (0, 1): 0, (1, 0): 0, (1, 1): 1}
COST = {(0, 0): 1.0, (0, 1): 2.0, (1, 0): 0.5, (1, 1): 3.0}
TARGET = {0: 0, 1: 0}


def _pad(v):
    out = np.zeros(9)
    out[:4] = v
    return out


def _mdp_batch(theta9):
    batch = []
    for (s, a), sn in TRANS.items():
        i, j = 2 * s + a, 2 * sn + TARGET[sn]
        batch.append(TdSample(COST[(s, a)], theta9[i], theta9[j],
                              _pad(np.eye(4)[i]), GAMMA_MDP,
                              _pad(np.eye(4)[j])))
    return batch


def test_gradient_td_convergence_and_semi_gradient_divergence():
    # exact fixed point from the projected Bellman linear system
    A = np.zeros((4, 4))
    b = np.zeros(4)
    for (s, a), sn in TRANS.items():
        i, j = 2 * s + a, 2 * sn + TARGET[sn]
        A += np.outer(np.eye(4)[i], np.eye(4)[i] - GAMMA_MDP * np.eye(4)[j]) / 4
        b += COST[(s, a)] * np.eye(4)[i] / 4
    theta_star = np.linalg.solve(A, b)

    state = GesState(theta=ThetaVector.from_array(np.zeros(9)),
                     w=np.full(9, 1e-4), alpha=0.1, beta=0.01)
    pairs = list(TRANS.keys())
    for k in range(100_000):
        s, a = pairs[k % 4]
        sn = TRANS[(s, a)]
        i, j = 2 * s + a, 2 * sn + TARGET[sn]
        th = state.theta.as_array()
        state = ges_update(state, TdSample(COST[(s, a)], th[i], th[j],
                                           _pad(np.eye(4)[i]), GAMMA_MDP,
                                           _pad(np.eye(4)[j])))
    mspbe = mspbe_estimate(_mdp_batch(state.theta.as_array()), 1e-8)
    fp_err = float(np.max(np.abs(state.theta.as_array()[:4] - theta_star)))

    # semi-gradient baseline on aliased off-policy features inflates
    theta = ThetaVector.from_array(_pad(np.array([1.0, 0, 0, 0])))
    norm0 = np.linalg.norm(theta.as_array())
    inflated = False
    updates = 0
    for k in range(100_000):
        th = theta.as_array()
        phi = _pad(np.array([1.0, 0, 0, 0]))
        smp = TdSample(0.0, th[0], 2.0 * th[0], phi, 0.97)
        theta = es_update(theta, td_error(smp), phi, 0.05)
        updates = k + 1
        if np.linalg.norm(theta.as_array()) >= 10 * norm0:
            inflated = True
            break
    report("GTD convergence oracle",
           mspbe <= 1e-6 and inflated,
           f"GES MSPBE {mspbe:.2e} (fixed-point err {fp_err:.2e}) within 1e5 "
           f"updates; semi-gradient norm x10 after {updates} updates")


# -- criteria 6, 8, 9 share the desk-scale runs ------------------------------------

@pytest.fixture(scope="module")
def smoke_runs():
    runs = {}
    for algo in ("rdes", "ges"):
        cfg = RunConfig(algorithm=algo, episodes=5, steps=60, seed=3,
                        scenario=SMOKE)
        runs[algo] = train(cfg)
    return runs


@pytest.fixture(scope="module")
def desk_runs():
    runs = {}
    for algo in ("rdes", "ges"):
        for seed in (0, 1, 2):
            cfg = RunConfig(algorithm=algo, episodes=30, steps=60, seed=seed,
                            scenario=SMOKE)
            runs[(algo, seed)] = train(cfg)
    return runs


def test_solve_count_halving_and_wall_clock_ratio(smoke_runs):
    per_step = {}
    counts_ok = True
    for algo, want in (("rdes", 1), ("ges", 2)):
        recs = [r for ep in smoke_runs[algo].episodes for r in ep.records]
        good = [r for r in recs if not r.solver_failed]
        counts_ok &= all(r.nlp_solves == want for r in good)
        per_step[algo] = float(np.mean([r.step_wall_ms for r in recs]))
    ratio = per_step["rdes"] / per_step["ges"]
    report("Solve-count halving",
           counts_ok and 0.4 <= ratio <= 0.7,
           f"rdes {per_step['rdes']:.1f} ms/step vs ges {per_step['ges']:.1f} "
           f"ms/step, ratio {ratio:.2f}; per-step solves exact")


def test_nn_regression_on_frozen_buffer():
    # harvest a frozen 1000-transition buffer from a dedicated rdes run
    from nmpcrl.harness import RunContext, run_episode
    cfg = RunConfig(algorithm="rdes", episodes=17, steps=60, seed=5,
                    scenario=SMOKE)
    ctx = RunContext(cfg)
    for ep in range(cfg.episodes):
        run_episode(ctx.agent, ctx.scenario, cfg, ctx.rng, ctx=ctx,
                    episode_index=ep)
        if len(ctx.agent.buffer) >= 1000:
            break
    buf = ctx.agent.buffer
    buf.records = buf.records[:1000]
    S, A, TH, Q = buf.as_arrays()
    var = float(Q.var())

    rng = np.random.default_rng(0)
    weights = MlpWeights.create(InputScaler.for_inputs(ctx.nmpc, THETA0), rng)
    adam = AdamState.for_weights(weights, zeta=1e-2)
    for _ in range(2000):
        train_minibatch(buf, weights, adam, 128, rng)
    X = np.concatenate([S, A, TH], axis=1)
    final_loss = float(np.mean((weights.forward_batch(X) - Q) ** 2))

    # gradient check on a small random network; unit-variance targets keep
    # the finite-difference cancellation noise below the 1e-5 bar
    small = MlpWeights.create(InputScaler.for_inputs(ctx.nmpc, THETA0),
                              np.random.default_rng(1), hidden=(8, 8))
    Xs = np.concatenate([S[:6], A[:6], TH[:6]], axis=1)
    Qs = (Q[:6] - Q[:6].mean()) / max(Q[:6].std(), 1.0)
    _, grads = small.loss_and_grads(Xs, Qs)
    worst_rel = 0.0
    h = 1e-6
    rng2 = np.random.default_rng(2)
    for li, (W, _) in enumerate(small.layers):
        flat = W.ravel()
        for idx in rng2.choice(flat.size, size=4, replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = float(np.mean((small.forward_batch(Xs) - Qs) ** 2))
            flat[idx] = old - h
            dn = float(np.mean((small.forward_batch(Xs) - Qs) ** 2))
            flat[idx] = old
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), 1e-8)
            worst_rel = max(worst_rel, abs(grads[li][0].ravel()[idx] - fd) / denom)
    report("NN regression",
           final_loss <= 0.01 * var and worst_rel <= 1e-5,
           f"final mse {final_loss:.3f} = {100 * final_loss / var:.2f}% of "
           f"target variance; worst gradient rel err {worst_rel:.2e}")


def test_desk_scale_learning_trend(desk_runs):
    details = []
    ok = True
    for algo in ("rdes", "ges"):
        first5 = []
        last5 = []
        for seed in (0, 1, 2):
            log = desk_runs[(algo, seed)]
            assert not log.diverged
            sums = [ep.sum_stage_cost for ep in log.episodes]
            assert len(sums) == 30
            first5.append(np.mean(sums[:5]))
            last5.append(np.mean(sums[-5:]))
            final = log.episodes[-1]
            ok &= final.static_error < 1.5
            ok &= final.min_clearance > 0.0       # hard constraint never hit
        f, l = np.mean(first5), np.mean(last5)
        ok &= l < f
        details.append(f"{algo}: first5 {f:.1f} -> last5 {l:.1f}")
    report("Desk-scale learning trend", ok, "; ".join(details))


def test_every_emitted_action_within_bounds(desk_runs, smoke_runs):
    lo = np.array([-0.6, -math.pi / 2])
    hi = np.array([0.6, math.pi / 2])
    n = 0
    ok = True
    for log in list(desk_runs.values()) + list(smoke_runs.values()):
        for ep in log.episodes:
            for r in ep.records:
                ok &= lo[0] <= r.v <= hi[0] and lo[1] <= r.nu <= hi[1]
                n += 1
    report("Constraint satisfaction", ok,
           f"{n} emitted actions all inside the action box")
