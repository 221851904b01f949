"""Reference generators: an MLP from the joint initial state to a bundle of candidate references.

Hidden layers use tanh; the last affine layer feeds a bounded head
``out_scale * tanh(.)``, so every generated coordinate lies in
``[-out_scale, out_scale]``. Reverse mode is written out by hand.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lifted_game import ReferenceBundle
from .tag_env import TagEnvSpec

CHECKPOINT_FORMAT = "liftgame-mlp-v1"


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    """MLP weights. ``weights[k]`` has shape ``(out_k, in_k)``."""

    weights: tuple
    biases: tuple
    n_candidates: int
    ref_dim: int
    input_scale: np.ndarray
    out_scale: float
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: bias does not match weight rows")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
        if self.weights[-1].shape[0] != self.n_candidates * self.ref_dim:
            raise ValueError("output width must equal n_candidates * ref_dim")
        if self.input_scale.shape != (self.weights[0].shape[1],):
            raise ValueError("input scale does not match input width")

    @property
    def shape(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, v: np.ndarray) -> "GeneratorParams":
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(v[k : k + W.size].reshape(W.shape).copy())
            k += W.size
            bs.append(v[k : k + b.size].copy())
            k += b.size
        if k != len(v):
            raise ValueError("flat parameter vector has the wrong length")
        return GeneratorParams(tuple(Ws), tuple(bs), self.n_candidates, self.ref_dim,
                               self.input_scale, self.out_scale, self.activation)

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "activation": self.activation,
            "n_candidates": self.n_candidates,
            "ref_dim": self.ref_dim,
            "out_scale": self.out_scale,
            "input_scale": self.input_scale.tolist(),
            "layers": [
                {"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {d.get('format')!r}")
        Ws = tuple(np.array(L["weight"], dtype=float).reshape(L["shape"]) for L in d["layers"])
        bs = tuple(np.array(L["bias"], dtype=float) for L in d["layers"])
        return cls(Ws, bs, int(d["n_candidates"]), int(d["ref_dim"]),
                   np.array(d["input_scale"], dtype=float), float(d["out_scale"]), d["activation"])


def tag_input_scale(env: TagEnvSpec) -> np.ndarray:
    """Per-coordinate scale mapping joint states ``(p1, v1, p2, v2)`` to order one."""
    one = [env.radius, env.radius, env.v_max, env.v_max]
    return 1.0 / np.array(one + one)


def init_params(shape, seed: int, n_candidates: int, ref_dim: int, input_scale=None,
                out_scale: float = 1.0, low: float = -0.1, high: float = 0.1) -> GeneratorParams:
    """Weights and biases i.i.d. uniform on ``[low, high]``.

    ``shape`` lists layer widths from input to output; the last entry must be
    ``n_candidates * ref_dim``.
    """
    shape = [int(s) for s in shape]
    if len(shape) < 2 or min(shape) < 1:
        raise ValueError(f"invalid layer shape {shape}")
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for a, b in zip(shape[:-1], shape[1:]):
        Ws.append(rng.uniform(low, high, (b, a)))
        bs.append(rng.uniform(low, high, b))
    scale = np.ones(shape[0]) if input_scale is None else np.asarray(input_scale, dtype=float)
    return GeneratorParams(tuple(Ws), tuple(bs), n_candidates, ref_dim, scale, float(out_scale))


def default_shape(input_dim: int, n_candidates: int, ref_dim: int, hidden=(64, 64)) -> list:
    return [input_dim, *hidden, n_candidates * ref_dim]


def forward_batch(theta: GeneratorParams, X: np.ndarray):
    """Outputs for a batch of joint states ``X`` (rows) and the cache for ``backward_batch``."""
    h = np.atleast_2d(X) * theta.input_scale
    acts = [h]
    for k, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    # the last tanh is the bounded head
    return theta.out_scale * h, acts


def backward_batch(theta: GeneratorParams, acts, Ybar: np.ndarray) -> np.ndarray:
    """Flat parameter gradient of ``sum(Ybar * Y)`` over the batch."""
    g = theta.out_scale * np.atleast_2d(Ybar)
    grads = []
    for k in range(len(theta.weights) - 1, -1, -1):
        a = acts[k + 1]
        g = g * (1.0 - a * a)
        grads.append((g.T @ acts[k], g.sum(0)))
        g = g @ theta.weights[k]
    grads.reverse()
    return np.concatenate([a.ravel() for pair in grads for a in pair])


def _joint(x1, x2):
    return np.concatenate([np.asarray(x1, dtype=float).ravel(), np.asarray(x2, dtype=float).ravel()])


def generate(theta: GeneratorParams, x1, x2, player: int = 1) -> ReferenceBundle:
    X = _joint(x1, x2)
    if X.shape != (theta.weights[0].shape[1],):
        raise ValueError("joint state does not match generator input width")
    Y, _ = forward_batch(theta, X)
    return ReferenceBundle(player, Y.reshape(theta.n_candidates, theta.ref_dim))


def generate_vjp(theta: GeneratorParams, x1, x2, xibar) -> GeneratorParams:
    """Gradient of ``<xibar, generate(theta, x1, x2)>`` as a parameter-shaped object."""
    X = _joint(x1, x2)
    _, acts = forward_batch(theta, X)
    return theta.with_flat(backward_batch(theta, acts, np.asarray(xibar, dtype=float).reshape(1, -1)))


def save_params(theta: GeneratorParams, path) -> None:
    Path(path).write_text(json.dumps(theta.to_dict()))


def load_params(path) -> GeneratorParams:
    return GeneratorParams.from_dict(json.loads(Path(path).read_text()))
