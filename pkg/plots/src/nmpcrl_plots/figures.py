"""Figure generation from training-run CSV logs.

Consumes the run-directory layout written by the training harness --
episodes.csv, theta.csv and the TOML config-echo -- and renders the six
standard figure kinds:

  stage-cost    sum of the RL stage cost per episode, one line per run
  static-error  distance of the last logged state to the target, per episode
  controls      v and nu over one episode
  trajectory    planar path with obstacle and safety circles
  theta         the nine tuned parameters over one episode
  w             the nine auxiliary gradient-TD weights over one episode

Rendering is deterministic: identical inputs produce byte-identical PNG
payloads (timestamps are never embedded).
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["FIGURE_KINDS", "FigureSpec", "RunData", "load_run", "render",
           "SchemaError"]

FIGURE_KINDS = ("stage-cost", "static-error", "controls", "trajectory",
                "theta", "w")

EPISODE_COLUMNS = ["episode", "step", "x", "y", "phi", "v", "nu", "stage_cost",
                   "td_error", "q", "q_next", "nlp_solves", "nlp_iters",
                   "step_wall_ms"]
THETA_COLUMNS = (["episode", "step"] + [f"theta_{i}" for i in range(1, 10)]
                 + [f"w_{i}" for i in range(1, 10)])

# one fixed color per overlaid run, matching the two-trace comparison style
RUN_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple")


class SchemaError(ValueError):
    """A run directory does not match the documented CSV schema."""


@dataclass
class FigureSpec:
    kind: str
    runs: Sequence[Path]
    out: Path
    episodes: Optional[tuple] = None     # (first, last) inclusive filter
    steps: Optional[tuple] = None
    dpi: int = 120

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; "
                             f"valid: {', '.join(FIGURE_KINDS)}")
        if not self.runs:
            raise ValueError("at least one run directory is required")
        self.runs = [Path(r) for r in self.runs]
        self.out = Path(self.out)


@dataclass
class RunData:
    label: str
    episodes: dict            # column -> float array over all logged steps
    theta: dict
    world: dict               # parsed [world] section of the config echo


def _read_table(path: Path, required: Sequence[str]) -> dict:
    if not path.exists():
        raise SchemaError(f"{path} is missing")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path} is empty")
    header = rows[0]
    for col in required:
        if col not in header:
            raise SchemaError(f"{path} lacks required column {col!r}")
    cols = {name: [] for name in header}
    for row in rows[1:]:
        for name, cell in zip(header, row):
            cols[name].append(cell)

    def tofloat(vals):
        return np.array([float(v) if v != "" else np.nan for v in vals])

    return {name: tofloat(vals) for name, vals in cols.items()}


def load_run(run_dir: Path) -> RunData:
    run_dir = Path(run_dir)
    episodes = _read_table(run_dir / "episodes.csv", EPISODE_COLUMNS)
    theta = _read_table(run_dir / "theta.csv", THETA_COLUMNS)
    label = run_dir.name or str(run_dir)
    world = {}
    echo = run_dir / "config-echo"
    if echo.exists():
        with open(echo, "rb") as fh:
            doc = tomllib.load(fh)
        world = doc.get("world", {})
        algo = doc.get("run", {}).get("algorithm")
        if algo:
            label = f"{algo} ({label})"
    return RunData(label=label, episodes=episodes, theta=theta, world=world)


def _episode_mask(data: dict, episodes: Optional[tuple]) -> np.ndarray:
    ep = data["episode"]
    if episodes is None:
        return np.ones(ep.shape, dtype=bool)
    lo, hi = episodes
    return (ep >= lo) & (ep <= hi)


def _select_episode(data: dict, episodes: Optional[tuple]) -> float:
    """Single-episode figures default to the last episode in range."""
    mask = _episode_mask(data, episodes)
    if not mask.any():
        raise ValueError("episode filter selects no rows")
    return float(data["episode"][mask].max())


def _step_mask(data: dict, steps: Optional[tuple]) -> np.ndarray:
    st = data["step"]
    if steps is None:
        return np.ones(st.shape, dtype=bool)
    lo, hi = steps
    return (st >= lo) & (st <= hi)


def _per_episode(data: dict, column: str, reduce_fn, episodes) -> tuple:
    mask = _episode_mask(data, episodes)
    eps = np.unique(data["episode"][mask]).astype(int)
    vals = []
    for e in eps:
        sel = mask & (data["episode"] == e)
        vals.append(reduce_fn(data, sel))
    return eps, np.array(vals)


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the written path.

    Raises SchemaError with the offending column when a run directory does
    not carry the documented CSV schema.
    """
    runs = [load_run(r) for r in spec.runs]
    fig = _FIGURES[spec.kind](spec, runs)
    spec.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.out, dpi=spec.dpi, metadata=_stable_metadata(spec.out))
    plt.close(fig)
    return spec.out


def _stable_metadata(out: Path) -> dict:
    # strip creation dates so repeated renders are byte-identical
    suffix = out.suffix.lower()
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".pdf":
        return {"CreationDate": None}
    return {}


def _fig_stage_cost(spec: FigureSpec, runs) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for color, run in zip(RUN_COLORS, runs):
        eps, sums = _per_episode(
            run.episodes, "stage_cost",
            lambda d, sel: float(np.nansum(d["stage_cost"][sel])),
            spec.episodes)
        ax.plot(eps, sums, color=color, label=run.label)
    ax.set_xlabel("learning episode")
    ax.set_ylabel("sum of RL stage cost")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def _fig_static_error(spec: FigureSpec, runs) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for color, run in zip(RUN_COLORS, runs):
        s_ref = np.asarray(run.world.get("s_ref", (0.0, 0.0, 0.0)), dtype=float)

        def last_state_error(d, sel):
            idx = np.flatnonzero(sel)[-1]
            dx = d["x"][idx] - s_ref[0]
            dy = d["y"][idx] - s_ref[1]
            dphi = d["phi"][idx] - s_ref[2]
            return math.sqrt(dx * dx + dy * dy + dphi * dphi)

        eps, errs = _per_episode(run.episodes, "x", last_state_error,
                                 spec.episodes)
        ax.plot(eps, errs, color=color, label=run.label)
    ax.set_xlabel("learning episode")
    ax.set_ylabel("static error [m]")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def _fig_controls(spec: FigureSpec, runs) -> plt.Figure:
    fig, (ax_v, ax_nu) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 4.8))
    for color, run in zip(RUN_COLORS, runs):
        d = run.episodes
        ep = _select_episode(d, spec.episodes)
        sel = (d["episode"] == ep) & _step_mask(d, spec.steps)
        ax_v.plot(d["step"][sel], d["v"][sel], color=color,
                  label=f"{run.label}, episode {int(ep)}")
        ax_nu.plot(d["step"][sel], d["nu"][sel], color=color)
    for ax, lo, hi, name in ((ax_v, -0.6, 0.6, "v [m/s]"),
                             (ax_nu, -np.pi / 2, np.pi / 2, "nu [rad/s]")):
        ax.axhline(lo, color="k", linestyle=":", linewidth=0.8)
        ax.axhline(hi, color="k", linestyle=":", linewidth=0.8)
        ax.set_ylabel(name)
        ax.grid(True, alpha=0.3)
    ax_nu.set_xlabel("step")
    ax_v.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _fig_trajectory(spec: FigureSpec, runs) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6.4, 5.2))
    drawn_world = False
    for color, run in zip(RUN_COLORS, runs):
        d = run.episodes
        ep = _select_episode(d, spec.episodes)
        sel = (d["episode"] == ep) & _step_mask(d, spec.steps)
        ax.plot(d["x"][sel], d["y"][sel], color=color,
                label=f"{run.label}, episode {int(ep)}")
        if not drawn_world and run.world:
            _draw_world(ax, run.world)
            drawn_world = True
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8, loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def _draw_world(ax, world: dict) -> None:
    for obs in world.get("obstacles", ()):
        center = (obs["x"], obs["y"])
        body = plt.Circle(center, obs["d_obs"] / 2.0, facecolor="0.55",
                          edgecolor="0.3", alpha=0.8)
        safety = plt.Circle(center, (obs["d_obs"] + obs["d_rob"]) / 2.0,
                            facecolor="none", edgecolor="0.3", linestyle="--")
        ax.add_patch(body)
        ax.add_patch(safety)
    s0 = world.get("s0")
    s_ref = world.get("s_ref")
    if s0 is not None:
        ax.plot([s0[0]], [s0[1]], marker="o", color="k", markersize=6)
    if s_ref is not None:
        ax.plot([s_ref[0]], [s_ref[1]], marker="*", color="k", markersize=12)


def _fig_param_traces(spec: FigureSpec, runs, prefix: str) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    styles = ("-", "--", ":")
    for si, run in enumerate(runs):
        d = run.theta
        ep = _select_episode(d, spec.episodes)
        sel = (d["episode"] == ep) & _step_mask(d, spec.steps)
        for i in range(1, 10):
            col = f"{prefix}_{i}"
            vals = d[col][sel]
            if np.all(np.isnan(vals)):
                raise SchemaError(
                    f"run {run.label!r} has empty {col!r} values; the {prefix} "
                    "traces need a run that logs them")
            label = col if si == 0 else None
            ax.plot(d["step"][sel], vals, styles[si % len(styles)],
                    label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel(prefix)
    ax.legend(fontsize=7, ncol=3)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


_FIGURES = {
    "stage-cost": _fig_stage_cost,
    "static-error": _fig_static_error,
    "controls": _fig_controls,
    "trajectory": _fig_trajectory,
    "theta": lambda spec, runs: _fig_param_traces(spec, runs, "theta"),
    "w": lambda spec, runs: _fig_param_traces(spec, runs, "w"),
}
