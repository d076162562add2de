"""Small dense networks with hand-written backward passes, plus Adam.

Matrices are plain ``float64`` numpy arrays in row-major layout; a batch of
vectors is a 2-D array with one row per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class MlpParams:
    """Weights and biases of a multilayer perceptron.

    ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i+1])`` and
    ``biases[i]`` has shape ``(1, layer_dims[i+1])``.  ``version`` is bumped by
    every in-place update so stale forward caches can be detected.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    version: int = 0

    def __post_init__(self) -> None:
        n = len(self.layer_dims) - 1
        if n < 1 or len(self.weights) != n or len(self.biases) != n or len(self.activations) != n:
            raise DimensionError("layer_dims, weights, biases and activations disagree in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (1, shape[1]):
                raise DimensionError(f"layer {i}: expected W{shape}, b(1, {shape[1]})")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            self.version,
        )


@dataclass
class GradBuf:
    """Gradient accumulator, shape-congruent with an :class:`MlpParams`."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradBuf":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def add_(self, other: "GradBuf", scale: float = 1.0) -> "GradBuf":
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b
        return self

    def zero_(self) -> None:
        for a in self.arrays():
            a.fill(0.0)


@dataclass
class ForwardCache:
    params: MlpParams
    version: int
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]  # activations


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator,
             hidden: str = "relu", output: str = "identity") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    weights, biases, acts = [], [], []
    for i in range(len(dims) - 1):
        a = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
        weights.append(rng.uniform(-a, a, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros((1, dims[i + 1])))
        acts.append(output if i == len(dims) - 2 else hidden)
    return MlpParams(dims, weights, biases, acts)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match in_dim {params.in_dim}")
    inputs, pre, post = [], [], []
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        z = h @ w + b
        h = _act(act, z)
        pre.append(z)
        post.append(h)
    return h, ForwardCache(params, params.version, inputs, pre, post)


def mlp_backward(params: MlpParams, cache: ForwardCache,
                 grad_y: np.ndarray) -> tuple[GradBuf, np.ndarray]:
    """Backpropagate ``grad_y`` (dLoss/dy) through the cached forward pass."""
    if cache.params is not params or cache.version != params.version:
        raise ContractError("forward cache does not belong to these parameters (stale or foreign)")
    y = cache.post[-1]
    if grad_y.shape != y.shape:
        raise DimensionError(f"grad_y shape {grad_y.shape} != output shape {y.shape}")
    gw: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]
    g = grad_y
    for i in reversed(range(len(params.weights))):
        g = _act_grad(params.activations[i], cache.pre[i], cache.post[i], g)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0, keepdims=True)
        g = g @ params.weights[i].T
    return GradBuf(gw, gb), g


def check_array_grads(loss_fn: Callable[[], tuple[float, list[np.ndarray]]],
                      arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Compare analytic gradients against central differences, in place.

    ``loss_fn`` reads the current contents of ``arrays`` and returns the loss
    together with its analytic gradient for each array.  Entries are perturbed
    one at a time and restored afterwards.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError("finite-difference step must lie in [1e-7, 1e-3]")
    loss, analytic = loss_fn()
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss_fn()[0]
            flat[k] = old - h
            down = loss_fn()[0]
            flat[k] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("loss is not finite under perturbation")
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(gflat[k] - numeric) / max(1.0, abs(numeric)))
    return worst


def grad_check(loss_fn: Callable[[MlpParams], tuple[float, GradBuf]],
               params: MlpParams, h: float = 1e-5) -> float:
    """Max relative error of ``loss_fn``'s analytic gradient over all parameters."""

    def wrapped() -> tuple[float, list[np.ndarray]]:
        loss, grads = loss_fn(params)
        return loss, grads.arrays()

    return check_array_grads(wrapped, params.arrays(), h)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3, **kw: float) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr=lr, **kw)


def adam_step(params: MlpParams, grads: GradBuf, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    arrays, garrays = params.arrays(), grads.arrays()
    if len(arrays) != len(state.m) or any(a.shape != g.shape for a, g in zip(arrays, garrays)):
        raise DimensionError("gradient buffer is not congruent with the parameters")
    if not all(np.all(np.isfinite(g)) for g in garrays):
        raise NumericError("non-finite gradient entries")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(arrays, garrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1


@dataclass
class Trainable:
    """A network paired with its optimizer state."""

    params: MlpParams
    opt: AdamState = field(repr=False)

    @classmethod
    def create(cls, layer_dims: Sequence[int], rng: np.random.Generator, lr: float = 1e-3,
               hidden: str = "relu", output: str = "identity") -> "Trainable":
        params = init_mlp(layer_dims, rng, hidden, output)
        return cls(params, AdamState.for_params(params, lr))

    def step(self, grads: GradBuf) -> None:
        adam_step(self.params, grads, self.opt)

    def copy(self) -> "Trainable":
        opt = AdamState([m.copy() for m in self.opt.m], [v.copy() for v in self.opt.v],
                        self.opt.lr, self.opt.beta1, self.opt.beta2, self.opt.eps,
                        self.opt.step_count)
        return Trainable(self.params.copy(), opt)
