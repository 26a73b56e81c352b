"""Dense network core: seeded randomness, fully-connected stacks with manual
backprop, SGD/Adam updates and a central-difference gradient oracle.

All arrays are float64. A "param set" is a flat 1-D array whose layout is
derived from an :class:`MlpSpec`: for every layer a row-major ``(in, out)``
weight block followed by an ``out`` bias block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

RELU = "relu"
LINEAR = "linear"


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class UsageError(RuntimeError):
    """An API was called out of order or with a stale object."""


class NumericError(FloatingPointError):
    """A computation produced a NaN or infinity."""


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and an optional stream path.

    ``make_rng(s, 1)`` and ``make_rng(s, 2)`` are independent streams derived
    with numpy's SeedSequence, so components can be reseeded separately.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def gaussian_sample(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # numpy's ziggurat normal sampler; reproducible for a fixed seed and numpy release
    return rng.standard_normal((rows, cols))


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# --------------------------------------------------------------------------
# MLP layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...] = ()
    dropout_rate: float = 0.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        acts = tuple(self.activations) or (RELU,) * (len(widths) - 2) + (LINEAR,)
        if len(acts) != len(widths) - 1:
            raise ValueError("one activation per layer is required")
        if acts[-1] != LINEAR:
            raise ValueError("the final layer must be linear")
        if any(a not in (RELU, LINEAR) for a in acts):
            raise ValueError(f"unknown activation in {acts}")
        object.__setattr__(self, "activations", acts)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_widths[1:-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return [(w[i], w[i + 1]) for i in range(self.n_layers)]

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat param vector into ``(W, b)`` views (no copy)."""
    if params.ndim != 1 or params.size != spec.n_params():
        raise ShapeError(f"expected {spec.n_params()} params for {spec.layer_widths}, got shape {params.shape}")
    layers = []
    pos = 0
    for n_in, n_out in spec.layer_shapes():
        W = params[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = params[pos:pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for n_in, n_out in spec.layer_shapes():
        limit = np.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out)))
    return flatten(layers)


def make_dropout_masks(spec: MlpSpec, rng: np.random.Generator, batch: int) -> Optional[list[np.ndarray]]:
    """Masks for every hidden activation, or None when dropout is off."""
    if spec.dropout_rate == 0.0 or not spec.hidden_widths:
        return None
    return [dropout_mask(rng, (batch, w), spec.dropout_rate) for w in spec.hidden_widths]


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass
class MlpCache:
    spec: MlpSpec
    layers: list[tuple[np.ndarray, np.ndarray]]
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_acts: list[np.ndarray] = field(default_factory=list)
    masks: Optional[list[np.ndarray]] = None
    output_shape: tuple[int, int] = (0, 0)
    params_size: int = 0


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
                masks: Optional[Sequence[np.ndarray]] = None) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ShapeError(f"input of shape {x.shape} does not fit input width {spec.in_width}")
    layers = unflatten(spec, params)
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(spec.hidden_widths):
            raise ShapeError("one dropout mask per hidden layer is required")
        for m, w in zip(masks, spec.hidden_widths):
            if m.shape != (x.shape[0], w):
                raise ShapeError(f"dropout mask shape {m.shape} != {(x.shape[0], w)}")
    cache = MlpCache(spec=spec, layers=layers, masks=masks, params_size=params.size)
    h = x
    for i, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        pre = h @ W + b
        cache.pre_acts.append(pre)
        h = np.maximum(pre, 0.0) if spec.activations[i] == RELU else pre
        if masks is not None and i < len(layers) - 1:
            h = h * masks[i]
    cache.output_shape = h.shape
    return h, cache


def mlp_backward(cache: MlpCache, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar whose output-gradient is ``upstream``.

    Returns ``(flat param grad, input grad)``.
    """
    if not isinstance(cache, MlpCache) or not cache.inputs:
        raise UsageError("mlp_backward needs the cache of a completed mlp_forward call")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.output_shape:
        raise UsageError(f"upstream gradient {upstream.shape} does not match cached output {cache.output_shape}")
    spec = cache.spec
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * spec.n_layers  # type: ignore[list-item]
    g = upstream
    for i in range(spec.n_layers - 1, -1, -1):
        if cache.masks is not None and i < spec.n_layers - 1:
            g = g * cache.masks[i]
        if spec.activations[i] == RELU:
            g = g * (cache.pre_acts[i] > 0.0)
        W, _ = cache.layers[i]
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        g = g @ W.T
    return flatten(grads), g


# --------------------------------------------------------------------------
# updates
# --------------------------------------------------------------------------

def _check_same_length(params: np.ndarray, grad: np.ndarray) -> None:
    if params.shape != grad.shape:
        raise ShapeError(f"params {params.shape} and gradient {grad.shape} differ in length")


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, direction: str = "descend") -> np.ndarray:
    _check_same_length(params, grad)
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if direction == "descend":
        return params - lr * grad
    if direction == "ascend":
        return params + lr * grad
    raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @classmethod
    def adam(cls, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
             epsilon: float = 1e-8) -> "OptimizerState":
        return cls("adam", lr, beta1, beta2, epsilon, 0, np.zeros(n), np.zeros(n))

    @classmethod
    def sgd(cls, lr: float) -> "OptimizerState":
        return cls(kind="sgd", learning_rate=lr)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.kind, self.learning_rate, self.beta1, self.beta2, self.epsilon,
                              self.step_count,
                              None if self.m is None else self.m.copy(),
                              None if self.v is None else self.v.copy())


def adam_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    if state.kind != "adam":
        raise UsageError(f"adam_step called with a {state.kind!r} optimizer state")
    _check_same_length(params, grad)
    if state.m is None or state.m.shape != params.shape:
        raise ShapeError("optimizer moments do not match the parameter vector")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = OptimizerState("adam", state.learning_rate, state.beta1, state.beta2, state.epsilon, t, m, v)
    return new_params, new_state


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray,
                   direction: str = "descend") -> tuple[np.ndarray, OptimizerState]:
    """Dispatch on ``state.kind``; ``ascend`` is descent on the negated gradient."""
    if state.kind == "sgd":
        new_state = state.copy()
        new_state.step_count += 1
        return sgd_step(params, grad, state.learning_rate, direction), new_state
    if direction == "ascend":
        grad = -grad
    elif direction != "descend":
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    return adam_step(state, params, grad)


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------

def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(params)
    probe = params.copy()
    for i in range(params.size):
        orig = probe[i]
        probe[i] = orig + h
        f_plus = float(loss_fn(probe))
        probe[i] = orig - h
        f_minus = float(loss_fn(probe))
        probe[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
