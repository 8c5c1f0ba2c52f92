"""Run configuration: defaults, TOML loading, and the config echo.

The file format has five sections -- [nmpc], [world], [agent], [nn],
[run] -- and the defaults reproduce the reference setup: alpha = 1e-7,
beta = 1e-8, zeta = 1e-2, gamma = 0.97, N = 10, K = 129, 300 episodes,
mini-batch 128, two 64-neuron hidden layers, omega = omega_f = 100 per
obstacle, theta_init = [1 1 0.05 0.05 0.05 1 1 0.1 0.001], w_init = 1e-4.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .learning import ALGORITHMS
from .ocp import NmpcConfig, ThetaVector, default_exploration_scale
from .robot import Scenario, load_scenario, paper_scenario, scenario_to_dict

__all__ = ["RunConfig", "load_config", "dump_config", "write_config_echo"]

THETA_INIT = (1.0, 1.0, 0.05, 0.05, 0.05, 1.0, 1.0, 0.1, 0.001)


@dataclass
class RunConfig:
    algorithm: str = "ges"
    episodes: int = 300
    steps: int = 129                     # K, environment steps per episode
    seed: int = 0
    scenario: Scenario = field(default_factory=paper_scenario)
    # controller
    horizon: int = 10
    gamma: float = 0.97
    ts: float = 0.2
    omega: Optional[tuple] = None        # default: 100 per obstacle
    omega_f: Optional[tuple] = None
    wrap_heading: bool = False
    # agent step sizes
    alpha: float = 1e-7
    beta: float = 1e-8
    zeta: float = 1e-2
    w_init: float = 1e-4
    theta_init: tuple = THETA_INIT
    # exploration
    c_eps: float = 0.99
    explore_scale: Optional[tuple] = None   # default: 10% of half-range
    explore_per_episode: bool = False       # decay exponent resets per episode
    # network
    hidden: tuple = (64, 64)
    minibatch: int = 128
    buffer_capacity: Optional[int] = None
    # run control
    delta_guard: float = 1e6
    checkpoint_every: int = 10
    solver_tol: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(
                f"unknown algorithm {self.algorithm!r}; valid: {', '.join(ALGORITHMS)}")
        if min(self.episodes, self.steps, self.horizon, self.minibatch) < 1:
            raise ValueError("counts must be >= 1")
        if isinstance(self.scenario, dict):
            self.scenario = load_scenario(self.scenario)
        self.theta_init = tuple(float(v) for v in self.theta_init)

    def nmpc_config(self) -> NmpcConfig:
        n_obs = len(self.scenario.obstacles)
        omega = self.omega if self.omega is not None else (100.0,) * n_obs
        omega_f = self.omega_f if self.omega_f is not None else (100.0,) * n_obs
        return NmpcConfig.from_scenario(
            self.scenario, horizon=self.horizon, gamma=self.gamma, ts=self.ts,
            omega=tuple(omega), omega_f=tuple(omega_f),
            wrap_heading=self.wrap_heading)

    def theta_vector(self) -> ThetaVector:
        return ThetaVector.from_array(self.theta_init)

    def exploration_scale(self) -> np.ndarray:
        if self.explore_scale is not None:
            return np.asarray(self.explore_scale, dtype=float)
        return default_exploration_scale(self.nmpc_config())


def load_config(path) -> RunConfig:
    """Parse a five-section TOML run configuration."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    nmpc = data.get("nmpc", {})
    world = data.get("world", {})
    agent = data.get("agent", {})
    nn = data.get("nn", {})
    run = data.get("run", {})
    kw = {}
    if world:
        kw["scenario"] = load_scenario(world)
    for section, keys in (
        (nmpc, ("horizon", "gamma", "ts", "omega", "omega_f", "wrap_heading")),
        (agent, ("alpha", "beta", "w_init", "theta_init", "c_eps",
                 "explore_scale", "explore_per_episode")),
        (nn, ("zeta", "hidden", "minibatch", "buffer_capacity")),
        (run, ("algorithm", "episodes", "steps", "seed", "delta_guard",
               "checkpoint_every", "solver_tol")),
    ):
        for key in keys:
            if key in section:
                kw[key] = section[key]
    for tuple_key in ("omega", "omega_f", "theta_init", "explore_scale", "hidden"):
        if tuple_key in kw and kw[tuple_key] is not None:
            kw[tuple_key] = tuple(kw[tuple_key])
    return RunConfig(**kw)


def dump_config(config: RunConfig) -> str:
    """Serialize the full effective configuration as TOML text."""
    nmpc_cfg = config.nmpc_config()
    sections = {
        "nmpc": {
            "horizon": config.horizon,
            "gamma": config.gamma,
            "ts": config.ts,
            "omega": list(nmpc_cfg.omega),
            "omega_f": list(nmpc_cfg.omega_f),
            "wrap_heading": config.wrap_heading,
        },
        "world": scenario_to_dict(config.scenario),
        "agent": {
            "alpha": config.alpha,
            "beta": config.beta,
            "w_init": config.w_init,
            "theta_init": list(config.theta_init),
            "c_eps": config.c_eps,
            "explore_scale": [float(v) for v in config.exploration_scale()],
            "explore_per_episode": config.explore_per_episode,
        },
        "nn": {
            "zeta": config.zeta,
            "hidden": list(config.hidden),
            "minibatch": config.minibatch,
            **({"buffer_capacity": config.buffer_capacity}
               if config.buffer_capacity is not None else {}),
        },
        "run": {
            "algorithm": config.algorithm,
            "episodes": config.episodes,
            "steps": config.steps,
            "seed": config.seed,
            "delta_guard": config.delta_guard,
            "checkpoint_every": config.checkpoint_every,
            "solver_tol": config.solver_tol,
        },
    }
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines.extend(_toml_lines(body))
        lines.append("")
    return "\n".join(lines)


def _toml_lines(body: dict) -> list:
    return [f"{key} = {_toml_value(val)}" for key, val in body.items()]


def _toml_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    if isinstance(val, (float, np.floating)):
        return repr(float(val))
    if isinstance(val, str):
        return f'"{val}"'
    if isinstance(val, dict):
        inner = ", ".join(f"{k} = {_toml_value(v)}" for k, v in val.items())
        return "{ " + inner + " }"
    if isinstance(val, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in val) + "]"
    raise TypeError(f"cannot serialize {type(val)} to TOML")


def write_config_echo(config: RunConfig, out_dir) -> Path:
    """Write the effective configuration next to the run outputs."""
    path = Path(out_dir) / "config-echo"
    path.write_text(dump_config(config))
    return path
