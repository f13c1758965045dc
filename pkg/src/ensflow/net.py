"""Dense residual network with hand-written reverse-mode gradients.

Layer layout for ``num_layers = L``::

    h1      = silu(x @ W0 + b0)                      # plain affine, input -> hidden
    h{i+1}  = h{i} + silu(drop(h{i}) @ Wi + bi)      # i = 1 .. L-2, residual blocks
    out     = h{L-1} @ W{L-1} + b{L-1}               # plain affine, no activation

Dropout is inverted (masks are scaled by ``1 / (1 - p)`` at train time) so the
eval-mode forward pass needs no rescaling.

All parameters live in one contiguous float64 vector; per-layer weight and bias
arrays are views into it, so flattening is free and optimizers update in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ensflow.errors import ContractViolation, NumericError, StaleTapeError

LEAD_TIMES = 21


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 48
    hidden_dim: int = 256
    num_layers: int = 6
    dropout_prob: float = 0.2
    output_dim: int = LEAD_TIMES * 40

    def __post_init__(self):
        if self.num_layers < 2:
            raise ContractViolation(f"num_layers must be >= 2, got {self.num_layers}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ContractViolation(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ContractViolation("layer widths must be positive")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every dense layer, first to last."""
        inner = [(self.hidden_dim, self.hidden_dim)] * (self.num_layers - 2)
        return [(self.input_dim, self.hidden_dim), *inner, (self.hidden_dim, self.output_dim)]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "dropout_prob": self.dropout_prob,
            "output_dim": self.output_dim,
        }


class NetworkParams:
    """Weights and biases backed by a single flat float64 vector.

    Ordering of the flat view: for each layer, the weight matrix of shape
    ``(fan_in, fan_out)`` in row-major order followed by its bias vector.
    """

    def __init__(self, config: NetworkConfig, flat: np.ndarray | None = None):
        self.config = config
        if flat is None:
            flat = np.zeros(config.n_params)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (config.n_params,):
            raise ContractViolation(
                f"flat parameter vector has length {flat.size}, config needs {config.n_params}"
            )
        self.flat = flat.copy()
        self.version = 0
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for fan_in, fan_out in config.layer_shapes:
            self.weights.append(self.flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            self.biases.append(self.flat[offset : offset + fan_out])
            offset += fan_out

    @classmethod
    def initialize(cls, config: NetworkConfig, rng: np.random.Generator) -> "NetworkParams":
        """Uniform fan-in initialisation, limit ``1/sqrt(fan_in)`` for weights and biases."""
        params = cls(config)
        for w, b in zip(params.weights, params.biases):
            limit = 1.0 / np.sqrt(w.shape[0])
            w[...] = rng.uniform(-limit, limit, size=w.shape)
            b[...] = rng.uniform(-limit, limit, size=b.shape)
        return params

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    @classmethod
    def unflatten(cls, config: NetworkConfig, flat: np.ndarray) -> "NetworkParams":
        return cls(config, flat)

    def assign(self, flat: np.ndarray) -> None:
        """Overwrite all parameters in place; invalidates outstanding tapes."""
        self.flat[...] = flat
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, self.flat)


@dataclass
class Tape:
    """Everything ``backward`` needs from one forward pass."""

    params: NetworkParams
    version: int
    inputs: list[np.ndarray]  # input to each layer, before dropout
    dropped: list[np.ndarray]  # input to each layer's matmul, after dropout
    masks: list[np.ndarray | None]  # scaled dropout masks, None when inactive
    preacts: list[np.ndarray]
    squeeze: bool = False


def silu(a: np.ndarray) -> np.ndarray:
    return a * expit(a)


def silu_grad(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def forward(
    params: NetworkParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Tape]:
    """Run the network on a batch ``(B, input_dim)`` or a single vector."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ContractViolation(f"expected input of width {cfg.input_dim}, got shape {x.shape}")
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train" and cfg.dropout_prob > 0.0
    if train and rng is None:
        raise ContractViolation("train mode with dropout needs an rng")
    keep = 1.0 - cfg.dropout_prob

    inputs, dropped, masks, preacts = [], [], [], []
    h = x
    last = cfg.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        if train and 0 < i < last:
            mask = (rng.random(h.shape) < keep) / keep
            hd = h * mask
        else:
            mask = None
            hd = h
        masks.append(mask)
        dropped.append(hd)
        a = hd @ w + b
        preacts.append(a)
        if i == 0:
            h = silu(a)
        elif i < last:
            h = h + silu(a)
        else:
            h = a
    out = h[0] if squeeze else h
    return out, Tape(params, params.version, inputs, dropped, masks, preacts, squeeze)


def backward(tape: Tape, output_gradient: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(output * output_gradient)`` with respect to the flat parameters."""
    params = tape.params
    if params.version != tape.version:
        raise StaleTapeError("parameters changed since this tape was recorded")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.preacts[-1].shape:
        raise ContractViolation(
            f"output gradient shape {g.shape} does not match output {tape.preacts[-1].shape}"
        )
    grad = NetworkParams(params.config)
    last = params.config.num_layers - 1
    for i in range(last, -1, -1):
        if i == last:
            ga = g
        else:
            ga = g * silu_grad(tape.preacts[i])
        grad.weights[i][...] = tape.dropped[i].T @ ga
        grad.biases[i][...] = ga.sum(axis=0)
        if i == 0:
            break
        gin = ga @ params.weights[i].T
        if tape.masks[i] is not None:
            gin = gin * tape.masks[i]
        # residual blocks pass the incoming gradient straight through as well
        g = gin + g if 0 < i < last else gin
    return grad.flat


@dataclass
class OptimizerState:
    """Adam moments; defaults match the usual published constants."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 1e-3, weight_decay: float = 1e-6):
        n = params.flat.size
        return cls(np.zeros(n), np.zeros(n), lr=lr, weight_decay=weight_decay)


def adam_step(state: OptimizerState, params: NetworkParams, gradient: np.ndarray) -> NetworkParams:
    """One bias-corrected Adam update, in place.

    Weight decay is the coupled L2 form: ``weight_decay * theta`` is added to the
    gradient before the moment updates.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.flat.shape:
        raise ContractViolation(
            f"gradient length {gradient.size} != parameter length {params.flat.size}"
        )
    bad = ~np.isfinite(gradient)
    if bad.any():
        raise NumericError(
            f"non-finite gradient in {int(bad.sum())} entries (first at index {int(np.argmax(bad))})"
        )
    g = gradient + state.weight_decay * params.flat if state.weight_decay else gradient
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.touch()
    return params


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new best."""

    lr: float
    factor: float = 0.9
    patience: int = 10
    best: float = field(default=np.inf)
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(history, lr: float, factor: float = 0.9, patience: int = 10) -> float:
    """Learning rate after replaying a validation-loss history through the scheduler."""
    sched = PlateauScheduler(lr, factor=factor, patience=patience)
    for loss in history:
        sched.step(float(loss))
    return sched.lr
