"""Diff-drive robot environment: dynamics, obstacle geometry, RL stage cost.

Everything here is the ground truth the learning loop is scored against.
The OCP prediction model reuses the same RK4 map (exact-model setting),
so the discretization lives here and is imported by the controller side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RobotState",
    "ControlInput",
    "Obstacle",
    "StageCostParams",
    "Scenario",
    "dynamics_continuous",
    "step_rk4",
    "rk4_batch",
    "rk4_derivatives",
    "obstacle_value",
    "rl_stage_cost",
    "min_obstacle_clearance",
    "load_scenario",
    "scenario_to_dict",
    "paper_scenario",
    "smoke_scenario",
]


@dataclass(frozen=True)
class RobotState:
    """Planar pose (x, y) in meters, heading phi in radians."""

    x: float
    y: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi], dtype=float)

    @staticmethod
    def from_array(arr) -> "RobotState":
        x, y, phi = np.asarray(arr, dtype=float).ravel()
        return RobotState(float(x), float(y), float(phi))


@dataclass(frozen=True)
class ControlInput:
    """Linear speed v (m/s) and turn rate nu (rad/s)."""

    v: float
    nu: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.nu], dtype=float)

    @staticmethod
    def from_array(arr) -> "ControlInput":
        v, nu = np.asarray(arr, dtype=float).ravel()
        return ControlInput(float(v), float(nu))


@dataclass(frozen=True)
class Obstacle:
    """Static circular obstacle.

    d_obs and d_rob are the obstacle and robot safety-circle *diameters*;
    the hard keep-out radius for the robot center is (d_obs + d_rob) / 2.
    """

    x: float
    y: float
    d_obs: float = 2.0
    d_rob: float = 0.5

    def __post_init__(self):
        if self.d_obs <= 0 or self.d_rob <= 0:
            raise ValueError("obstacle diameters must be positive")

    @property
    def safety_radius(self) -> float:
        return 0.5 * (self.d_obs + self.d_rob)


@dataclass(frozen=True)
class StageCostParams:
    """Parameters of the RL scoring cost (not the controller cost)."""

    q_diag: tuple = (1.0, 1.0, 0.1)
    d_t: float = 1.5        # near-target switching threshold [m]
    d_o: float = 0.35       # desired extra clearance from obstacles [m]
    c: float = 50.0         # collision penalty weight

    def __post_init__(self):
        if self.d_t <= 0 or self.d_o < 0 or self.c < 0:
            raise ValueError("invalid stage-cost parameters")


def dynamics_continuous(s: RobotState, u: ControlInput) -> np.ndarray:
    """Continuous-time unicycle vector field (xdot, ydot, phidot)."""
    return np.array([u.v * math.cos(s.phi), u.v * math.sin(s.phi), u.nu])


def rk4_batch(states: np.ndarray, inputs: np.ndarray, ts: float) -> np.ndarray:
    """Classical RK4 step for a batch of (state, input) pairs.

    states: (k, 3), inputs: (k, 2), input held constant over the step.
    Returns the successor states, shape (k, 3).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))

    def f(st):
        v, nu = inputs[:, 0], inputs[:, 1]
        phi = st[:, 2]
        return np.stack([v * np.cos(phi), v * np.sin(phi), nu], axis=1)

    k1 = f(states)
    k2 = f(states + 0.5 * ts * k1)
    k3 = f(states + 0.5 * ts * k2)
    k4 = f(states + ts * k3)
    return states + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_rk4(s: RobotState, u: ControlInput, ts: float) -> RobotState:
    """One RK4 step of the true dynamics (the plant the robot lives in)."""
    if ts <= 0:
        raise ValueError("sampling period must be positive")
    nxt = rk4_batch(s.as_array()[None, :], u.as_array()[None, :], ts)[0]
    return RobotState.from_array(nxt)


# index layout for the stacked (state, input) variable w = (x, y, phi, v, nu)
_PHI, _V, _NU = 2, 3, 4


def _field_derivs(states: np.ndarray, inputs: np.ndarray):
    """Value, Jacobian and Hessian of the vector field wrt w = (s, u).

    Returns (f (k,3), J (k,3,5), H (k,3,5,5)).  Only the phi/v entries of
    the Hessian are nonzero for the unicycle.
    """
    k = states.shape[0]
    v, nu = inputs[:, 0], inputs[:, 1]
    phi = states[:, 2]
    c, s = np.cos(phi), np.sin(phi)

    f = np.stack([v * c, v * s, nu], axis=1)

    J = np.zeros((k, 3, 5))
    J[:, 0, _PHI] = -v * s
    J[:, 0, _V] = c
    J[:, 1, _PHI] = v * c
    J[:, 1, _V] = s
    J[:, 2, _NU] = 1.0

    H = np.zeros((k, 3, 5, 5))
    H[:, 0, _PHI, _PHI] = -v * c
    H[:, 0, _PHI, _V] = -s
    H[:, 0, _V, _PHI] = -s
    H[:, 1, _PHI, _PHI] = -v * s
    H[:, 1, _PHI, _V] = c
    H[:, 1, _V, _PHI] = c
    return f, J, H


def rk4_derivatives(states: np.ndarray, inputs: np.ndarray, ts: float,
                    second_order: bool = True):
    """RK4 map with first and (optionally) second derivatives wrt (s, u).

    Propagates the chain rule through the four stages.  Returns
    (F (k,3), DF (k,3,5), D2F (k,3,5,5) or None).  Used by the OCP to
    assemble exact constraint Jacobians and Lagrangian Hessians.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    k = states.shape[0]

    # Dz maps d(s,u) -> d(stage state, u); stage input is u itself.
    eye_su = np.zeros((k, 5, 5))
    eye_su[:, np.arange(5), np.arange(5)] = 1.0

    def stage(prev_k, prev_Dk, prev_D2k, coeff):
        g = states + coeff * ts * prev_k if prev_k is not None else states
        Dg = np.zeros((k, 3, 5))
        Dg[:, 0, 0] = Dg[:, 1, 1] = Dg[:, 2, 2] = 1.0
        D2g = None
        if prev_k is not None:
            Dg = Dg + coeff * ts * prev_Dk
            if second_order:
                D2g = coeff * ts * prev_D2k
        f, Jf, Hf = _field_derivs(g, inputs)
        # Dz stacks the stage-state rows over the untouched input rows.
        Dz = eye_su.copy()
        Dz[:, 0:3, :] = Dg
        Dk = np.einsum("kml,klj->kmj", Jf, Dz)
        D2k = None
        if second_order:
            D2k = np.einsum("kmab,kai,kbj->kmij", Hf, Dz, Dz)
            if D2g is not None:
                D2k = D2k + np.einsum("kml,klij->kmij", Jf[:, :, 0:3], D2g)
        return f, Dk, D2k

    k1, Dk1, D2k1 = stage(None, None, None, 0.0)
    k2, Dk2, D2k2 = stage(k1, Dk1, D2k1, 0.5)
    k3, Dk3, D2k3 = stage(k2, Dk2, D2k2, 0.5)
    k4, Dk4, D2k4 = stage(k3, Dk3, D2k3, 1.0)

    F = states + (ts / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    DF = np.zeros((k, 3, 5))
    DF[:, 0, 0] = DF[:, 1, 1] = DF[:, 2, 2] = 1.0
    DF = DF + (ts / 6.0) * (Dk1 + 2 * Dk2 + 2 * Dk3 + Dk4)
    D2F = None
    if second_order:
        D2F = (ts / 6.0) * (D2k1 + 2 * D2k2 + 2 * D2k3 + D2k4)
    return F, DF, D2F


def obstacle_value(s: RobotState, obstacle: Obstacle) -> float:
    """Signed proximity measure: > 0 inside the safety circle, 0 on it.

    Xi(s) = 1 - 4 ((x - x_obs)^2 + (y - y_obs)^2) / (d_rob + d_obs)^2
    """
    d2 = (s.x - obstacle.x) ** 2 + (s.y - obstacle.y) ** 2
    return 1.0 - 4.0 * d2 / (obstacle.d_rob + obstacle.d_obs) ** 2


def rl_stage_cost(s: RobotState, u: ControlInput, params: StageCostParams,
                  obstacles, s_ref) -> float:
    """Scoring cost: quadratic tracking term plus either an input-norm term
    (near the target) or a summed collision penalty (far from it)."""
    diff = s.as_array() - np.asarray(s_ref, dtype=float)
    q = np.asarray(params.q_diag, dtype=float)
    track = float(diff @ (q * diff))
    dist = float(np.linalg.norm(diff))
    if dist < params.d_t:
        return track + float(np.linalg.norm(u.as_array()))
    penalty = 0.0
    for obs in obstacles:
        penalty += params.c * max(0.0, obstacle_value(s, obs) + params.d_o)
    return track + penalty


def min_obstacle_clearance(s: RobotState, obstacles) -> float:
    """Distance from the robot center to the nearest hard keep-out circle."""
    if not obstacles:
        return math.inf
    return min(
        math.hypot(s.x - o.x, s.y - o.y) - o.safety_radius for o in obstacles
    )


@dataclass
class Scenario:
    """World geometry plus the scoring-cost configuration.

    Serialized as the [world] section of the run config (TOML).
    """

    s0: tuple = (-2.5, 1.5, 0.0)
    s_ref: tuple = (8.5, 2.0, math.pi / 2)
    u_ref: tuple = (0.0, 0.0)
    state_low: tuple = (-9.0, -9.0)     # x/y box; phi unbounded
    state_high: tuple = (12.0, 12.0)
    obstacles: tuple = ()
    stage_cost: StageCostParams = field(default_factory=StageCostParams)

    def __post_init__(self):
        self.obstacles = tuple(
            o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles
        )

    def initial_state(self) -> RobotState:
        return RobotState(*[float(v) for v in self.s0])

    def reference_state(self) -> RobotState:
        return RobotState(*[float(v) for v in self.s_ref])

    def stage_cost_of(self, s: RobotState, u: ControlInput) -> float:
        return rl_stage_cost(s, u, self.stage_cost, self.obstacles, self.s_ref)


def paper_scenario() -> Scenario:
    """Full-scale task: 11 m run between four obstacles.

    Obstacle centers are not published; these sit on a rough line from
    start to target with alternating lateral offsets and >= 2.5 m pairwise
    spacing so a feasible corridor exists.
    """
    return Scenario(
        obstacles=(
            Obstacle(-0.2, 2.8),
            Obstacle(2.5, 0.7),
            Obstacle(5.2, 3.0),
            Obstacle(7.6, 0.4),
        ),
    )


def smoke_scenario() -> Scenario:
    """Desk-scale task reachable within ~60 steps at v_max = 0.6 m/s."""
    return Scenario(
        s0=(0.0, 0.0, 0.0),
        s_ref=(4.5, 0.5, math.pi / 2),
        state_low=(-9.0, -9.0),
        state_high=(12.0, 12.0),
        obstacles=(
            Obstacle(1.2, 1.35),
            Obstacle(2.2, -1.1),
            Obstacle(3.2, 1.55),
            Obstacle(4.2, -1.5),
        ),
    )


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "s0": list(sc.s0),
        "s_ref": list(sc.s_ref),
        "u_ref": list(sc.u_ref),
        "state_low": list(sc.state_low),
        "state_high": list(sc.state_high),
        "obstacles": [
            {"x": o.x, "y": o.y, "d_obs": o.d_obs, "d_rob": o.d_rob}
            for o in sc.obstacles
        ],
        "q_diag": list(sc.stage_cost.q_diag),
        "d_t": sc.stage_cost.d_t,
        "d_o": sc.stage_cost.d_o,
        "penalty_c": sc.stage_cost.c,
    }


def load_scenario(data: dict) -> Scenario:
    """Build a Scenario from a parsed [world] config section."""
    params = StageCostParams(
        q_diag=tuple(data.get("q_diag", (1.0, 1.0, 0.1))),
        d_t=float(data.get("d_t", 1.5)),
        d_o=float(data.get("d_o", 0.35)),
        c=float(data.get("penalty_c", 50.0)),
    )
    return Scenario(
        s0=tuple(data.get("s0", (-2.5, 1.5, 0.0))),
        s_ref=tuple(data.get("s_ref", (8.5, 2.0, math.pi / 2))),
        u_ref=tuple(data.get("u_ref", (0.0, 0.0))),
        state_low=tuple(data.get("state_low", (-9.0, -9.0))),
        state_high=tuple(data.get("state_high", (12.0, 12.0))),
        obstacles=tuple(data.get("obstacles", ())),
        stage_cost=params,
    )
