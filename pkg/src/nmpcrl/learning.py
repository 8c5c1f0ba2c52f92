"""Parameter-update rules for controller tuning.

Four variants share the one-step TD error delta = l + gamma*Q+ - Q:

  es       two controller solves per step, semi-gradient update
  deep-es  one solve; Q+ from a theta-blind network (comparison baseline)
  rdes     one solve; Q+ from the theta-aware network
  ges      two solves; gradient-TD update with the auxiliary vector w

The feature vector phi is the gradient of the action value with respect
to the tunables, so the gradient-TD pair reads

  theta <- theta + alpha (delta phi - gamma (w' phi) phi+)
  w     <- w + beta (delta - phi' w) phi

with simultaneous-update semantics (all right-hand sides use pre-update
values).  The projected-Bellman-error diagnostic is the plug-in estimate
E[d phi]' (E[phi phi'] + ridge I)^{-1} E[d phi].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .neural import (AdamState, MlpWeights, ReplayBuffer, Transition,
                     nn_forward, train_minibatch)
from .ocp import ThetaVector

__all__ = [
    "GesState",
    "TdSample",
    "td_error",
    "es_update",
    "ges_update",
    "rdes_subsequent_value",
    "mspbe_estimate",
    "EsAgent",
    "GesAgent",
    "RdesAgent",
    "DeepEsAgent",
    "make_agent",
    "ALGORITHMS",
]


@dataclass(frozen=True)
class GesState:
    """Paired parameter vectors evolved by the gradient-TD rules."""

    theta: ThetaVector
    w: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        if self.w.shape != (9,):
            raise ValueError("w must have the same dimension as theta (9)")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("w must be finite")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("step sizes must be positive")


@dataclass
class TdSample:
    """Everything one TD update consumes."""

    stage_cost: float
    q: float
    q_next: float
    phi: np.ndarray
    gamma: float
    phi_next: Optional[np.ndarray] = None

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi_next is not None:
            self.phi_next = np.asarray(self.phi_next, dtype=float)


def td_error(sample: TdSample) -> float:
    """delta = l + gamma Q+ - Q."""
    return sample.stage_cost + sample.gamma * sample.q_next - sample.q


def es_update(theta: ThetaVector, delta: float, phi, alpha: float) -> ThetaVector:
    """Semi-gradient step theta <- theta + alpha delta phi."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    # grouped as alpha * (delta * phi) so the w = 0 gradient-TD reduction
    # reproduces this update bit for bit
    return ThetaVector.from_array(theta.as_array() + alpha * (delta * np.asarray(phi)))


def ges_update(state: GesState, sample: TdSample) -> GesState:
    """Gradient-TD update of (theta, w); needs the successor features."""
    if sample.phi_next is None:
        raise ValueError("gradient-TD update requires phi_next")
    delta = td_error(sample)
    phi, phi_next = sample.phi, sample.phi_next
    theta_new = state.theta.as_array() + state.alpha * (
        delta * phi - sample.gamma * float(state.w @ phi) * phi_next)
    w_new = state.w + state.beta * (delta - float(phi @ state.w)) * phi
    return GesState(theta=ThetaVector.from_array(theta_new), w=w_new,
                    alpha=state.alpha, beta=state.beta)


def rdes_subsequent_value(weights: MlpWeights, s_next, a_next, theta) -> float:
    """Network prediction of Q(s+, a+) used in place of the second solve."""
    return nn_forward(weights, s_next, a_next, theta)


def mspbe_estimate(samples, ridge: float) -> float:
    """Plug-in projected-Bellman-error estimate over a batch of TdSamples."""
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    samples = list(samples)
    if not samples:
        raise ValueError("batch must be nonempty")
    d = samples[0].phi.size
    b = np.zeros(d)
    C = np.zeros((d, d))
    for s in samples:
        delta = td_error(s)
        b += delta * s.phi
        C += np.outer(s.phi, s.phi)
    b /= len(samples)
    C /= len(samples)
    C[np.arange(d), np.arange(d)] += ridge
    try:
        sol = np.linalg.solve(C, b)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError("feature second-moment matrix is singular "
                              "even with ridge") from exc
    return float(b @ sol)


# ---------------------------------------------------------------------------
# Agent state machines driven by the training harness.  The harness owns all
# controller solves; agents only consume their results and update parameters.
# ---------------------------------------------------------------------------


class _AgentBase:
    kind = "?"
    solves_per_step = 2          # controller solves consumed per step
    uses_network = False

    def __init__(self, theta: ThetaVector, alpha: float):
        self.theta = theta
        self.alpha = alpha

    def needs_target_solve(self) -> bool:
        return self.solves_per_step == 2

    def episode_reset(self) -> None:
        pass


class EsAgent(_AgentBase):
    """Baseline: second solve for Q+, semi-gradient update."""

    kind = "es"

    def update(self, sample: TdSample) -> float:
        delta = td_error(sample)
        self.theta = es_update(self.theta, delta, sample.phi, self.alpha)
        return delta


class GesAgent(_AgentBase):
    """Gradient-TD variant with the auxiliary vector w."""

    kind = "ges"

    def __init__(self, theta: ThetaVector, alpha: float, beta: float,
                 w_init: float = 1e-4, reset_w_each_episode: bool = False):
        super().__init__(theta, alpha)
        self.state = GesState(theta=theta, w=np.full(9, float(w_init)),
                              alpha=alpha, beta=beta)
        self.w_init = float(w_init)
        self.reset_w_each_episode = reset_w_each_episode

    @property
    def w(self) -> np.ndarray:
        return self.state.w

    def episode_reset(self) -> None:
        if self.reset_w_each_episode:
            self.state = GesState(theta=self.state.theta,
                                  w=np.full(9, self.w_init),
                                  alpha=self.state.alpha, beta=self.state.beta)

    def update(self, sample: TdSample) -> float:
        delta = td_error(sample)
        self.state = ges_update(self.state, sample)
        self.theta = self.state.theta
        return delta


class RdesAgent(_AgentBase):
    """One-solve variant: the theta-aware network supplies Q+."""

    kind = "rdes"
    solves_per_step = 1
    uses_network = True
    theta_input = True

    def __init__(self, theta: ThetaVector, alpha: float, weights: MlpWeights,
                 zeta: float = 1e-2, minibatch: int = 128,
                 buffer_capacity: Optional[int] = None):
        super().__init__(theta, alpha)
        self.weights = weights
        self.adam = AdamState.for_weights(weights, zeta=zeta)
        self.buffer = ReplayBuffer(buffer_capacity)
        self.minibatch = minibatch

    def record(self, s, a, q: float) -> None:
        self.buffer.push(Transition.make(s, a, self.theta, q))

    def train_if_ready(self, rng) -> Optional[float]:
        if len(self.buffer) < self.minibatch:
            return None
        _, _, loss = train_minibatch(self.buffer, self.weights, self.adam,
                                     self.minibatch, rng)
        return loss

    def q_next(self, s_next, a_next) -> float:
        return rdes_subsequent_value(self.weights, s_next, a_next, self.theta)

    def update(self, sample: TdSample) -> float:
        delta = td_error(sample)
        self.theta = es_update(self.theta, delta, sample.phi, self.alpha)
        return delta


class DeepEsAgent(RdesAgent):
    """Comparison baseline: same loop as rdes with a theta-blind network."""

    kind = "deep-es"
    theta_input = False


ALGORITHMS = ("es", "deep-es", "rdes", "ges")


def make_agent(kind: str, theta: ThetaVector, *, alpha: float, beta: float,
               zeta: float, w_init: float, minibatch: int,
               nn_weights: Optional[MlpWeights] = None,
               buffer_capacity: Optional[int] = None):
    if kind == "es":
        return EsAgent(theta, alpha)
    if kind == "ges":
        return GesAgent(theta, alpha, beta, w_init=w_init)
    if kind in ("rdes", "deep-es"):
        if nn_weights is None:
            raise ValueError(f"{kind} needs network weights")
        cls = RdesAgent if kind == "rdes" else DeepEsAgent
        return cls(theta, alpha, nn_weights, zeta=zeta, minibatch=minibatch,
                   buffer_capacity=buffer_capacity)
    raise ValueError(f"unknown algorithm {kind!r}; valid: {', '.join(ALGORITHMS)}")
