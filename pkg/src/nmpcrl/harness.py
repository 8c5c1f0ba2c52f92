"""Training loop: episodes, exploration schedule, logging, checkpoints.

Per environment step the loop solves the controller at s (one solve),
perturbs the greedy action with exponentially decaying noise, steps the
plant, and then branches per algorithm: the two-solve variants (es, ges)
solve again at s+ for the bootstrap value, while the one-solve variants
(rdes, deep-es) store the transition, train the network once the buffer
holds a mini-batch, and query it for the bootstrap value.

Outputs per run directory:
  config-echo    effective configuration (TOML)
  episodes.csv   episode, step, x, y, phi, v, nu, stage_cost, td_error,
                 q, q_next, nlp_solves, nlp_iters, step_wall_ms
  theta.csv      episode, step, theta_1..theta_9, w_1..w_9 (w blank for
                 algorithms without the auxiliary vector)
  checkpoint.npz full training state every N episodes and on exit
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, write_config_echo
from .learning import (DeepEsAgent, EsAgent, GesAgent, RdesAgent, TdSample,
                       make_agent)
from .neural import (AdamState, InputScaler, MlpWeights, ReplayBuffer,
                     load_weights, save_weights)
from .nlp import InteriorPointSolver, SolverOptions
from .ocp import (ThetaVector, build_ocp, explore_action, policy, shift_guess)
from .robot import ControlInput, RobotState, min_obstacle_clearance, step_rk4

__all__ = ["StepRecord", "EpisodeLog", "TrainingLog", "DivergenceError",
           "RunContext", "run_episode", "train", "evaluate"]

EPISODES_HEADER = ["episode", "step", "x", "y", "phi", "v", "nu", "stage_cost",
                   "td_error", "q", "q_next", "nlp_solves", "nlp_iters",
                   "step_wall_ms"]
THETA_HEADER = (["episode", "step"]
                + [f"theta_{i}" for i in range(1, 10)]
                + [f"w_{i}" for i in range(1, 10)])


class DivergenceError(RuntimeError):
    """Raised when the TD error or theta leaves the trusted range."""


@dataclass
class StepRecord:
    episode: int
    step: int
    x: float
    y: float
    phi: float
    v: float
    nu: float
    stage_cost: float
    td_error: float          # nan when the update was skipped
    q: float
    q_next: float
    nlp_solves: int
    nlp_iters: int
    step_wall_ms: float
    solver_failed: bool = False

    def csv_row(self):
        def num(val):
            return "" if isinstance(val, float) and math.isnan(val) else repr(float(val))
        return [self.episode, self.step, *(num(v) for v in
                (self.x, self.y, self.phi, self.v, self.nu, self.stage_cost,
                 self.td_error, self.q, self.q_next)),
                self.nlp_solves, self.nlp_iters, repr(self.step_wall_ms)]


@dataclass
class EpisodeLog:
    episode: int
    records: list = field(default_factory=list)
    sum_stage_cost: float = 0.0
    static_error: float = float("nan")
    min_clearance: float = float("inf")
    theta_rows: list = field(default_factory=list)


@dataclass
class TrainingLog:
    episodes: list = field(default_factory=list)
    diverged: bool = False
    divergence_message: str = ""
    final_theta: Optional[ThetaVector] = None

    @property
    def total_solves(self) -> int:
        return sum(r.nlp_solves for ep in self.episodes for r in ep.records)


class RunContext:
    """Cross-episode training state (everything a checkpoint must capture,
    plus the per-episode solver warm start, which deliberately is not)."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.nmpc = config.nmpc_config()
        self.scenario = config.scenario
        self.rng = np.random.default_rng(config.seed)
        self.global_step = 0
        self.next_episode = 0
        self.solver = InteriorPointSolver(SolverOptions(kkt_tol=config.solver_tol))
        self.explore_scale = config.exploration_scale()
        theta0 = config.theta_vector()
        nn_weights = None
        if config.algorithm in ("rdes", "deep-es"):
            with_theta = config.algorithm == "rdes"
            scaler = InputScaler.for_inputs(self.nmpc, theta0, theta_input=with_theta)
            nn_weights = MlpWeights.create(scaler, self.rng,
                                           hidden=tuple(config.hidden),
                                           theta_input=with_theta)
        self.agent = make_agent(
            config.algorithm, theta0, alpha=config.alpha, beta=config.beta,
            zeta=config.zeta, w_init=config.w_init, minibatch=config.minibatch,
            nn_weights=nn_weights, buffer_capacity=config.buffer_capacity)
        # per-episode solver state
        self.warm = None            # (NlpSolution, needs_shift)
        self.last_action = np.asarray(self.scenario.u_ref, dtype=float)

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        payload = {
            "format_version": np.array(1),
            "algorithm": np.array(self.config.algorithm),
            "global_step": np.array(self.global_step),
            "next_episode": np.array(self.next_episode),
            "theta": self.agent.theta.as_array(),
            "rng_state": np.array(json.dumps(self.rng.bit_generator.state)),
        }
        if isinstance(self.agent, GesAgent):
            payload["w"] = self.agent.w
        if isinstance(self.agent, RdesAgent):
            for li, (W, b) in enumerate(self.agent.weights.layers):
                payload[f"nn_W{li}"] = W
                payload[f"nn_b{li}"] = b
            payload["nn_layers"] = np.array(len(self.agent.weights.layers))
            payload["scaler_center"] = self.agent.weights.scaler.center
            payload["scaler_half_width"] = self.agent.weights.scaler.half_width
            adam = self.agent.adam
            payload["adam_t"] = np.array(adam.t)
            for li in range(len(adam.m)):
                payload[f"adam_mW{li}"], payload[f"adam_mb{li}"] = adam.m[li]
                payload[f"adam_vW{li}"], payload[f"adam_vb{li}"] = adam.v[li]
            S, A, TH, Q = self.agent.buffer.as_arrays()
            payload.update(buf_s=S, buf_a=A, buf_theta=TH, buf_q=Q)
        np.savez(path, **payload)

    def load_checkpoint(self, path) -> None:
        with np.load(path) as data:
            if int(data["format_version"]) != 1:
                raise ValueError("unsupported checkpoint format")
            if str(data["algorithm"]) != self.config.algorithm:
                raise ValueError(
                    f"checkpoint algorithm {data['algorithm']} does not match "
                    f"configured {self.config.algorithm}")
            self.global_step = int(data["global_step"])
            self.next_episode = int(data["next_episode"])
            self.rng.bit_generator.state = json.loads(str(data["rng_state"]))
            theta = ThetaVector.from_array(data["theta"])
            self.agent.theta = theta
            if isinstance(self.agent, GesAgent):
                st = self.agent.state
                from .learning import GesState
                self.agent.state = GesState(theta=theta, w=data["w"],
                                            alpha=st.alpha, beta=st.beta)
            if isinstance(self.agent, RdesAgent):
                n_layers = int(data["nn_layers"])
                layers = [(data[f"nn_W{li}"], data[f"nn_b{li}"])
                          for li in range(n_layers)]
                scaler = InputScaler(data["scaler_center"], data["scaler_half_width"])
                self.agent.weights = MlpWeights(layers, scaler,
                                                self.agent.weights.theta_input)
                adam = AdamState.for_weights(self.agent.weights,
                                             zeta=self.config.zeta)
                adam.t = int(data["adam_t"])
                adam.m = [(data[f"adam_mW{li}"].copy(), data[f"adam_mb{li}"].copy())
                          for li in range(n_layers)]
                adam.v = [(data[f"adam_vW{li}"].copy(), data[f"adam_vb{li}"].copy())
                          for li in range(n_layers)]
                self.agent.adam = adam
                self.agent.buffer = ReplayBuffer.from_arrays(
                    data["buf_s"], data["buf_a"], data["buf_theta"], data["buf_q"],
                    capacity=self.config.buffer_capacity)


def run_episode(agent, scenario, config: RunConfig, rng,
                ctx: Optional[RunContext] = None, episode_index: int = 0,
                learn: bool = True, explore: bool = True) -> EpisodeLog:
    """One episode of Algorithm-1 dynamics; mutates the agent in place.

    When no context is supplied a transient one is created (single-episode
    use); train() passes a persistent context so the exploration exponent
    and solve counters span the whole run.
    """
    own_ctx = ctx is None
    if own_ctx:
        ctx = RunContext(config)
        ctx.agent = agent
        ctx.rng = rng
    nmpc = ctx.nmpc
    gamma = nmpc.gamma
    log = EpisodeLog(episode=episode_index)
    s = scenario.initial_state()
    agent.episode_reset()
    ctx.warm = None                       # warm starts never cross episodes
    ctx.solver.last_reg = 0.0             # nor does regularization memory
    ctx.last_action = np.asarray(scenario.u_ref, dtype=float)
    states_seen = [s]

    for t in range(config.steps):
        t0 = time.perf_counter()
        solves = 0
        iters = 0

        problem = build_ocp(nmpc, s, agent.theta)
        guess = None
        if ctx.warm is not None:
            sol_prev, needs_shift = ctx.warm
            guess = shift_guess(problem, sol_prev, agent.theta) if needs_shift \
                else _as_guess(sol_prev)
        qe = policy(nmpc, s, agent.theta, guess=guess, solver=ctx.solver)
        solves += 1
        iters += qe.solution.iterations
        if not qe.converged:
            # safety fallback: repeat the last admissible action, skip learning
            a = ctx.last_action.copy()
            s_next = step_rk4(s, ControlInput(*a), nmpc.ts)
            ell = scenario.stage_cost_of(s, ControlInput(*a))
            ctx.warm = None
            wall = 1e3 * (time.perf_counter() - t0)
            rec = StepRecord(episode_index, t, s.x, s.y, s.phi, a[0], a[1], ell,
                             float("nan"), float("nan"), float("nan"),
                             solves, iters, wall, solver_failed=True)
            _append_step(log, rec, agent, s_next, states_seen, scenario)
            s = s_next
            ctx.global_step += 1
            continue

        greedy = qe.u0
        if explore:
            k_exp = t if config.explore_per_episode else ctx.global_step
            noise = ctx.rng.standard_normal(2)
            a = explore_action(greedy, k_exp, config.c_eps, noise,
                               ctx.explore_scale, nmpc.action_low, nmpc.action_high)
        else:
            a = greedy.copy()
        ctx.last_action = a
        s_next = step_rk4(s, ControlInput(*a), nmpc.ts)
        ell = scenario.stage_cost_of(s, ControlInput(*a))

        delta = float("nan")
        q_next = float("nan")
        if learn:
            counts = [0, 0]
            delta, q_next = _learning_update(ctx, agent, qe, s, a, ell, s_next,
                                             gamma, counts)
            solves += counts[0]
            iters += counts[1]
            if not math.isnan(delta) and abs(delta) > config.delta_guard:
                raise DivergenceError(
                    f"|TD error| = {abs(delta):.3e} exceeded the guard "
                    f"{config.delta_guard:.1e} at episode {episode_index} step {t}")
            if not np.all(np.isfinite(agent.theta.as_array())):
                raise DivergenceError(
                    f"theta became non-finite at episode {episode_index} step {t}")
        else:
            ctx.warm = (qe.solution, True)

        wall = 1e3 * (time.perf_counter() - t0)
        rec = StepRecord(episode_index, t, s.x, s.y, s.phi, float(a[0]), float(a[1]),
                         ell, delta, qe.value, q_next, solves, iters, wall)
        _append_step(log, rec, agent, s_next, states_seen, scenario)
        s = s_next
        ctx.global_step += 1

    log.static_error = float(np.linalg.norm(s.as_array()
                                            - np.asarray(scenario.s_ref)))
    log.min_clearance = min(min_obstacle_clearance(st, scenario.obstacles)
                            for st in states_seen)
    if own_ctx:
        ctx.agent = None
    return log


def _as_guess(solution):
    from .nlp import PrimalDualGuess
    return PrimalDualGuess(x=solution.x, y=solution.y, z=solution.z,
                           z_lower=solution.z_lower, z_upper=solution.z_upper)


def _learning_update(ctx, agent, qe, s, a, ell, s_next, gamma, out_counts):
    """Per-algorithm update; returns (delta, q_next) with nan delta when the
    update had to be skipped (solver failure at s+)."""
    if agent.needs_target_solve():                     # es / ges
        problem2 = build_ocp(ctx.nmpc, s_next, agent.theta)
        guess2 = shift_guess(problem2, qe.solution, agent.theta)
        qe2 = policy(ctx.nmpc, s_next, agent.theta, guess=guess2,
                     solver=ctx.solver)
        out_counts[0] += 1
        out_counts[1] += qe2.solution.iterations
        if not qe2.converged:
            ctx.warm = (qe.solution, True)
            return float("nan"), float("nan")
        phi = qe.grad_theta
        phi_next = qe2.grad_theta if isinstance(agent, GesAgent) else None
        sample = TdSample(stage_cost=ell, q=qe.value, q_next=qe2.value,
                          phi=phi, gamma=gamma, phi_next=phi_next)
        delta = agent.update(sample)
        ctx.warm = (qe.solution, True)
        return delta, qe2.value

    # one-solve variants: record, train, bootstrap from the network
    agent.record(s, a, qe.value)
    agent.train_if_ready(ctx.rng)
    q_next = agent.q_next(s_next, qe.u1)
    sample = TdSample(stage_cost=ell, q=qe.value, q_next=q_next,
                      phi=qe.grad_theta, gamma=gamma)
    delta = agent.update(sample)
    ctx.warm = (qe.solution, True)
    return delta, q_next


def _append_step(log, rec, agent, s_next, states_seen, scenario):
    log.records.append(rec)
    log.sum_stage_cost += rec.stage_cost
    states_seen.append(s_next)
    theta = agent.theta.as_array()
    w = agent.w if isinstance(agent, GesAgent) else None
    log.theta_rows.append((rec.episode, rec.step, theta.copy(),
                           None if w is None else w.copy()))


def train(config: RunConfig, out_dir=None, resume: bool = False) -> TrainingLog:
    """Run the full episode loop, streaming CSV rows and checkpoints.

    Divergence (guard trip or non-finite theta) stops the run, records the
    event in the returned log, and still writes the final checkpoint; for
    the theta-blind baseline this is an expected outcome, not a crash.
    """
    ctx = RunContext(config)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint.npz" if out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and ckpt_path.exists():
            ctx.load_checkpoint(ckpt_path)
            _truncate_csvs(out, ctx.next_episode)
        else:
            write_config_echo(config, out)
            _write_csv_header(out / "episodes.csv", EPISODES_HEADER)
            _write_csv_header(out / "theta.csv", THETA_HEADER)

    log = TrainingLog()
    try:
        for ep in range(ctx.next_episode, config.episodes):
            ep_log = run_episode(ctx.agent, ctx.scenario, config, ctx.rng,
                                 ctx=ctx, episode_index=ep)
            log.episodes.append(ep_log)
            if out is not None:
                _append_rows(out / "episodes.csv",
                             [r.csv_row() for r in ep_log.records])
                _append_rows(out / "theta.csv",
                             [_theta_row(*row) for row in ep_log.theta_rows])
            ctx.next_episode = ep + 1
            if out is not None and (ep + 1) % config.checkpoint_every == 0:
                ctx.save_checkpoint(ckpt_path)
    except DivergenceError as exc:
        log.diverged = True
        log.divergence_message = str(exc)
    finally:
        if out is not None:
            ctx.save_checkpoint(ckpt_path)
    log.final_theta = ctx.agent.theta
    return log


def evaluate(config: RunConfig, out_dir=None) -> TrainingLog:
    """Single greedy episode: no exploration, no parameter updates."""
    ctx = RunContext(config)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_config_echo(config, out)
        _write_csv_header(out / "episodes.csv", EPISODES_HEADER)
        _write_csv_header(out / "theta.csv", THETA_HEADER)
    ep_log = run_episode(ctx.agent, ctx.scenario, config, ctx.rng, ctx=ctx,
                         episode_index=0, learn=False, explore=False)
    if out_dir is not None:
        _append_rows(out / "episodes.csv", [r.csv_row() for r in ep_log.records])
        _append_rows(out / "theta.csv",
                     [_theta_row(*row) for row in ep_log.theta_rows])
    log = TrainingLog(episodes=[ep_log], final_theta=ctx.agent.theta)
    return log


def _theta_row(episode, step, theta, w):
    row = [episode, step] + [repr(float(v)) for v in theta]
    row += [""] * 9 if w is None else [repr(float(v)) for v in w]
    return row


def _write_csv_header(path, header):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(header)


def _append_rows(path, rows):
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(row)


def _truncate_csvs(out: Path, next_episode: int) -> None:
    """Drop rows from episodes at/after the resume point (a partially
    written episode would otherwise duplicate)."""
    for name in ("episodes.csv", "theta.csv"):
        path = out / name
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        kept = [r for r in body if int(r[0]) < next_episode]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(kept)
