"""Neural approximator of the subsequent action-value function.

A small tanh MLP regresses (s, a, theta) -> Q recorded from controller
solves; the one-solve learning variants query it instead of solving a
second optimal control problem per step.  The "theta-blind" mode drops
the parameter vector from the input (width 5 instead of 14), reproducing
the earlier-generation approximator for comparison runs.

Everything is plain numpy: forward, manual backprop, Adam.  Inputs are
affinely normalized to roughly [-1, 1]; regression targets stay raw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .ocp import NmpcConfig, ThetaVector
from .robot import ControlInput, RobotState

__all__ = [
    "InputScaler",
    "MlpWeights",
    "Transition",
    "ReplayBuffer",
    "AdamState",
    "nn_forward",
    "buffer_push",
    "train_minibatch",
    "save_weights",
    "load_weights",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class InputScaler:
    """Componentwise affine map (raw - center) / half_width."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_width = np.asarray(self.half_width, dtype=float)
        if np.any(self.half_width <= 0):
            raise ValueError("half widths must be positive")

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.center) / self.half_width

    @staticmethod
    def for_inputs(config: NmpcConfig, theta_init: ThetaVector,
                   theta_input: bool = True) -> "InputScaler":
        """Scaling from the configured boxes and the theta starting point."""
        s_lo = np.array([*config.state_low, -np.pi])
        s_hi = np.array([*config.state_high, np.pi])
        a_lo = np.asarray(config.action_low, dtype=float)
        a_hi = np.asarray(config.action_high, dtype=float)
        centers = [0.5 * (s_lo + s_hi), 0.5 * (a_lo + a_hi)]
        halves = [0.5 * (s_hi - s_lo), 0.5 * (a_hi - a_lo)]
        if theta_input:
            t0 = theta_init.as_array()
            centers.append(np.zeros(9))
            halves.append(np.maximum(2.0 * np.abs(t0), 0.1))
        return InputScaler(np.concatenate(centers), np.concatenate(halves))


class MlpWeights:
    """Fully connected tanh network with a linear scalar head."""

    def __init__(self, layers: List[Tuple[np.ndarray, np.ndarray]],
                 scaler: InputScaler, theta_input: bool = True):
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float))
                       for W, b in layers]
        self.scaler = scaler
        self.theta_input = theta_input
        widths = [self.layers[0][0].shape[0]]
        for W, b in self.layers:
            if W.shape[0] != widths[-1]:
                raise ValueError("layer dimensions do not chain")
            if b.shape != (W.shape[1],):
                raise ValueError("bias shape mismatch")
            widths.append(W.shape[1])
        if widths[0] != scaler.center.size:
            raise ValueError("input width does not match the scaler")
        if widths[-1] != 1:
            raise ValueError("output must be scalar")

    @property
    def input_width(self) -> int:
        return self.layers[0][0].shape[0]

    @staticmethod
    def create(scaler: InputScaler, rng: np.random.Generator,
               hidden: Tuple[int, ...] = (64, 64),
               theta_input: bool = True) -> "MlpWeights":
        """Scaled uniform fan-in initialization, zero biases."""
        widths = [scaler.center.size, *hidden, 1]
        layers = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(n_in)
            layers.append((rng.uniform(-bound, bound, size=(n_in, n_out)),
                           np.zeros(n_out)))
        return MlpWeights(layers, scaler, theta_input)

    def raw_input(self, s, a, theta) -> np.ndarray:
        s = s.as_array() if isinstance(s, RobotState) else np.asarray(s, dtype=float)
        a = a.as_array() if isinstance(a, ControlInput) else np.asarray(a, dtype=float)
        if self.theta_input:
            t = theta.as_array() if isinstance(theta, ThetaVector) \
                else np.asarray(theta, dtype=float)
            return np.concatenate([s, a, t])
        return np.concatenate([s, a])

    def forward_batch(self, X: np.ndarray, keep_cache: bool = False):
        """X is (batch, input_width) of raw inputs; returns (batch,) values
        and, optionally, the activations needed for backprop."""
        h = self.scaler(X)
        cache = [h]
        last = len(self.layers) - 1
        for li, (W, b) in enumerate(self.layers):
            pre = h @ W + b
            h = pre if li == last else np.tanh(pre)
            if keep_cache:
                cache.append(h)
        out = h[:, 0]
        return (out, cache) if keep_cache else out

    def loss_and_grads(self, X: np.ndarray, q: np.ndarray):
        """Mean squared error over the batch and its weight gradients."""
        n = X.shape[0]
        pred, cache = self.forward_batch(X, keep_cache=True)
        err = pred - q
        loss = float(np.mean(err ** 2))
        grads = []
        delta = (2.0 / n) * err[:, None]            # d loss / d output
        for li in reversed(range(len(self.layers))):
            W, _ = self.layers[li]
            h_in = cache[li]
            if li != len(self.layers) - 1:
                delta = delta * (1.0 - cache[li + 1] ** 2)   # tanh'
            gW = h_in.T @ delta
            gb = delta.sum(axis=0)
            grads.append((gW, gb))
            delta = delta @ W.T
        grads.reverse()
        return loss, grads


def nn_forward(weights: MlpWeights, s, a, theta) -> float:
    """Scalar network output for one (state, action, theta) triple."""
    x = weights.raw_input(s, a, theta)
    return float(weights.forward_batch(x[None, :])[0])


@dataclass(frozen=True)
class Transition:
    """One learning-step record: the regression target q is the
    controller-computed action value at (s, a) under theta."""

    s: np.ndarray
    a: np.ndarray
    theta: np.ndarray
    q: float

    @staticmethod
    def make(s, a, theta, q) -> "Transition":
        s = s.as_array() if isinstance(s, RobotState) else np.asarray(s, dtype=float)
        a = a.as_array() if isinstance(a, ControlInput) else np.asarray(a, dtype=float)
        th = theta.as_array() if isinstance(theta, ThetaVector) \
            else np.asarray(theta, dtype=float)
        if not np.isfinite(q):
            raise ValueError("regression target must be finite")
        return Transition(s, a, th, float(q))


class ReplayBuffer:
    """FIFO transition store with uniform mini-batch sampling."""

    def __init__(self, capacity: Optional[int] = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1 (or None for unbounded)")
        self.capacity = capacity
        self.records: List[Transition] = []

    def __len__(self) -> int:
        return len(self.records)

    def push(self, transition: Transition) -> None:
        self.records.append(transition)
        if self.capacity is not None and len(self.records) > self.capacity:
            del self.records[0]

    def sample(self, n: int, rng: np.random.Generator):
        """Uniform sample of n distinct records as stacked arrays."""
        if len(self.records) < n:
            raise ValueError(
                f"buffer holds {len(self.records)} records, mini-batch needs {n}")
        idx = rng.choice(len(self.records), size=n, replace=False)
        S = np.stack([self.records[i].s for i in idx])
        A = np.stack([self.records[i].a for i in idx])
        TH = np.stack([self.records[i].theta for i in idx])
        Q = np.array([self.records[i].q for i in idx])
        return S, A, TH, Q

    def as_arrays(self):
        S = np.stack([t.s for t in self.records]) if self.records else np.zeros((0, 3))
        A = np.stack([t.a for t in self.records]) if self.records else np.zeros((0, 2))
        TH = np.stack([t.theta for t in self.records]) if self.records else np.zeros((0, 9))
        Q = np.array([t.q for t in self.records])
        return S, A, TH, Q

    @staticmethod
    def from_arrays(S, A, TH, Q, capacity=None) -> "ReplayBuffer":
        buf = ReplayBuffer(capacity)
        for s, a, th, q in zip(S, A, TH, Q):
            buf.records.append(Transition(np.array(s), np.array(a),
                                          np.array(th), float(q)))
        return buf


def buffer_push(buffer: ReplayBuffer, transition: Transition) -> ReplayBuffer:
    buffer.push(transition)
    return buffer


@dataclass
class AdamState:
    """First/second-moment accumulators for one MlpWeights instance."""

    m: list
    v: list
    t: int = 0
    zeta: float = 1e-2          # step size
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_weights(weights: MlpWeights, zeta: float = 1e-2) -> "AdamState":
        m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights.layers]
        v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights.layers]
        return AdamState(m=m, v=v, zeta=zeta)

    def apply(self, weights: MlpWeights, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for li, (gW, gb) in enumerate(grads):
            W, b = weights.layers[li]
            mW, mb = self.m[li]
            vW, vb = self.v[li]
            mW[:] = self.beta1 * mW + (1 - self.beta1) * gW
            mb[:] = self.beta1 * mb + (1 - self.beta1) * gb
            vW[:] = self.beta2 * vW + (1 - self.beta2) * gW ** 2
            vb[:] = self.beta2 * vb + (1 - self.beta2) * gb ** 2
            W -= self.zeta * (mW / c1) / (np.sqrt(vW / c2) + self.eps)
            b -= self.zeta * (mb / c1) / (np.sqrt(vb / c2) + self.eps)


def train_minibatch(buffer: ReplayBuffer, weights: MlpWeights, adam: AdamState,
                    n: int, rng: np.random.Generator):
    """One Adam step on the mean-squared mini-batch loss.

    Refuses when the buffer holds fewer than n records (the caller then
    skips the network update for this step).  Returns (weights, adam,
    pre-step loss); weights and adam are updated in place.
    """
    S, A, TH, Q = buffer.sample(n, rng)
    if weights.theta_input:
        X = np.concatenate([S, A, TH], axis=1)
    else:
        X = np.concatenate([S, A], axis=1)
    loss, grads = weights.loss_and_grads(X, Q)
    adam.apply(weights, grads)
    return weights, adam, loss


def save_weights(weights: MlpWeights, path) -> None:
    """Binary checkpoint: versioned npz with per-layer arrays and scaler."""
    payload = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION),
        "n_layers": np.array(len(weights.layers)),
        "theta_input": np.array(int(weights.theta_input)),
        "scaler_center": weights.scaler.center,
        "scaler_half_width": weights.scaler.half_width,
    }
    for li, (W, b) in enumerate(weights.layers):
        payload[f"W{li}"] = W
        payload[f"b{li}"] = b
    np.savez(path, **payload)


def load_weights(path) -> MlpWeights:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        scaler = InputScaler(data["scaler_center"], data["scaler_half_width"])
        layers = [(data[f"W{li}"], data[f"b{li}"])
                  for li in range(int(data["n_layers"]))]
        return MlpWeights(layers, scaler, bool(int(data["theta_input"])))
