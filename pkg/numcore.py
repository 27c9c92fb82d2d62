"""
numcore.py - Dense numerics for the residual network
Feed-forward MLP with closed-form forward/backward passes, parameter gradients,
input Jacobians, Hessian-vector products, SGD/Adam and the JSON checkpoint format
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from errors import ConfigurationError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DoubleArray = npt.NDArray[np.float64]

ACTIVATIONS = ("tanh", "relu")
LOSSES = ("mae", "mse")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _check_layer_sizes(layer_sizes: Sequence[int]) -> Tuple[int, ...]:
    sizes = tuple(int(n) for n in layer_sizes)
    if len(sizes) < 2:
        raise ConfigurationError(
            "MLP needs at least an input and an output layer",
            {"layer_sizes": list(sizes)},
        )
    if any(n < 1 for n in sizes):
        raise ConfigurationError("All layer sizes must be >= 1", {"layer_sizes": list(sizes)})
    return sizes


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Feed-forward network f_NN; hidden layers share one activation, output is linear.

    weights[i] has shape (layer_sizes[i+1], layer_sizes[i]).
    """

    layer_sizes: Tuple[int, ...]
    weights: Tuple[DoubleArray, ...]
    biases: Tuple[DoubleArray, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        sizes = _check_layer_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{self.activation}'", {"allowed": ACTIVATIONS})
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError(
                "Number of weight/bias arrays must equal number of layers - 1",
                {"layers": len(sizes), "weights": len(self.weights), "biases": len(self.biases)},
            )

        weights, biases = [], []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.asarray(W, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if W.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ShapeError(
                    f"Layer {i} has inconsistent dimensions",
                    {"weight": W.shape, "bias": b.shape, "expected": (sizes[i + 1], sizes[i])},
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericError(f"Layer {i} contains non-finite parameters")
            W.setflags(write=False)
            b.setflags(write=False)
            weights.append(W)
            biases.append(b)

        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        return parameter_count(self.layer_sizes)


def parameter_count(layer_sizes: Sequence[int]) -> int:
    sizes = _check_layer_sizes(layer_sizes)
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def mlp_init(layer_sizes: Sequence[int], activation: str = "tanh", seed: int = 0) -> MlpModel:
    """Uniform fan-based initialization, zero biases, deterministic per seed."""
    sizes = _check_layer_sizes(layer_sizes)
    rng = np.random.default_rng(seed)

    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))

    return MlpModel(sizes, tuple(weights), tuple(biases), activation)


# ==================== Flat parameter vectors ====================

def flatten_params(model: MlpModel) -> DoubleArray:
    """Canonical order: for each layer, W row-major then b."""
    return _pack(model.weights, model.biases)


def unflatten_params(template: MlpModel, flat: DoubleArray) -> MlpModel:
    """Inverse of flatten_params using the architecture of `template`."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (template.param_count,):
        raise ShapeError(
            "Flat parameter vector has wrong length",
            {"expected": template.param_count, "got": flat.shape},
        )

    weights, biases = [], []
    offset = 0
    for n_in, n_out in zip(template.layer_sizes[:-1], template.layer_sizes[1:]):
        weights.append(flat[offset:offset + n_in * n_out].reshape(n_out, n_in).copy())
        offset += n_in * n_out
        biases.append(flat[offset:offset + n_out].copy())
        offset += n_out

    return MlpModel(template.layer_sizes, tuple(weights), tuple(biases), template.activation)


def _pack(weights: Sequence[DoubleArray], biases: Sequence[DoubleArray]) -> DoubleArray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(weights, biases)])


# ==================== Forward / backward ====================

def _activate(z: DoubleArray, activation: str) -> DoubleArray:
    if activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_slope(z: DoubleArray, a: DoubleArray, activation: str) -> DoubleArray:
    if activation == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _as_batch(model: MlpModel, inputs: DoubleArray) -> DoubleArray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != model.input_dim:
        raise ShapeError(
            "Input does not match the first layer",
            {"expected": model.input_dim, "got": x.shape},
        )
    return x.reshape(-1, model.input_dim)


def _forward_cache(model: MlpModel, batch: DoubleArray) -> Tuple[List[DoubleArray], List[DoubleArray]]:
    """Return pre-activations zs[i] and layer inputs acts[i] (acts[-1] is the output)."""
    zs: List[DoubleArray] = []
    acts: List[DoubleArray] = [batch]
    a = batch
    last = model.num_layers - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        a = _activate(z, model.activation) if i < last else z
        zs.append(z)
        acts.append(a)
    return zs, acts


def _backward(
    model: MlpModel,
    zs: List[DoubleArray],
    acts: List[DoubleArray],
    delta: DoubleArray,
) -> DoubleArray:
    """Back-propagate dL/dy through the network and return the flat parameter gradient."""
    grad_w: List[DoubleArray] = [np.empty(0)] * model.num_layers
    grad_b: List[DoubleArray] = [np.empty(0)] * model.num_layers
    for i in reversed(range(model.num_layers)):
        grad_w[i] = delta.T @ acts[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * _activation_slope(zs[i - 1], acts[i], model.activation)
    return _pack(grad_w, grad_b)


def mlp_forward(model: MlpModel, inputs: DoubleArray) -> DoubleArray:
    """Evaluate f_NN on one input vector or a stack of them (leading axes preserved)."""
    x = np.asarray(inputs, dtype=np.float64)
    batch = _as_batch(model, x)
    _, acts = _forward_cache(model, batch)
    return acts[-1].reshape(x.shape[:-1] + (model.output_dim,))


def _check_batch(model: MlpModel, inputs: DoubleArray, targets: DoubleArray) -> Tuple[DoubleArray, DoubleArray]:
    X = np.asarray(inputs, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigurationError("Batch must be a non-empty 2-D array", {"shape": X.shape})
    X = _as_batch(model, X)
    Y = Y.reshape(X.shape[0], -1) if Y.ndim == 1 else Y
    if Y.shape != (X.shape[0], model.output_dim):
        raise ShapeError(
            "Targets do not match batch size / output layer",
            {"inputs": X.shape, "targets": Y.shape, "output_dim": model.output_dim},
        )
    return X, Y


def _loss_and_seed(pred: DoubleArray, targets: DoubleArray, loss: str) -> Tuple[float, DoubleArray]:
    err = pred - targets
    if loss == "mse":
        return float(np.mean(err * err)), 2.0 * err / err.size
    if loss == "mae":
        # np.sign(0) == 0 gives the zero subgradient at a perfect fit
        return float(np.mean(np.abs(err))), np.sign(err) / err.size
    raise ConfigurationError(f"Unknown loss '{loss}'", {"allowed": LOSSES})


def mlp_loss(model: MlpModel, inputs: DoubleArray, targets: DoubleArray, loss: str = "mse") -> float:
    X, Y = _check_batch(model, inputs, targets)
    _, acts = _forward_cache(model, X)
    value, _ = _loss_and_seed(acts[-1], Y, loss)
    return value


def mlp_loss_and_gradient(
    model: MlpModel,
    inputs: DoubleArray,
    targets: DoubleArray,
    loss: str = "mse",
) -> Tuple[float, DoubleArray]:
    """Batch-mean loss and its gradient w.r.t. the flat parameters."""
    X, Y = _check_batch(model, inputs, targets)
    zs, acts = _forward_cache(model, X)
    value, seed = _loss_and_seed(acts[-1], Y, loss)
    return value, _backward(model, zs, acts, seed)


def mlp_param_gradient(
    model: MlpModel,
    batch_inputs: DoubleArray,
    batch_targets: DoubleArray,
    loss: str = "mse",
) -> DoubleArray:
    return mlp_loss_and_gradient(model, batch_inputs, batch_targets, loss)[1]


def mlp_input_jacobian(model: MlpModel, inputs: DoubleArray) -> DoubleArray:
    """d f_NN / d input, shape (out, in) for a vector or (..., out, in) for a stack.

    One reverse pass per output row, vectorized across the stack.
    """
    x = np.asarray(inputs, dtype=np.float64)
    batch = _as_batch(model, x)
    zs, acts = _forward_cache(model, batch)

    jac = np.empty((batch.shape[0], model.output_dim, model.input_dim))
    for row in range(model.output_dim):
        delta = np.zeros((batch.shape[0], model.output_dim))
        delta[:, row] = 1.0
        for i in reversed(range(model.num_layers)):
            delta = delta @ model.weights[i]
            if i > 0:
                delta = delta * _activation_slope(zs[i - 1], acts[i], model.activation)
        jac[:, row, :] = delta

    return jac.reshape(x.shape[:-1] + (model.output_dim, model.input_dim))


# ==================== Second order ====================

def finite_difference_hvp(
    grad_fn: Callable[[DoubleArray], DoubleArray],
    theta: DoubleArray,
    v: DoubleArray,
) -> DoubleArray:
    """Central difference of a gradient field along v.

    v is divided by s = max|v| before stepping and the difference multiplied
    back by s:

        H.v ~= s * (g(theta + eps*v/s) - g(theta - eps*v/s)) / (2*eps)

    with eps = 1e-4 * (1 + max|theta|). The step therefore scales with the
    parameters and not with v, and H.(c*v) = c * H.v for c > 0. A zero v
    returns zeros without evaluating grad_fn.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ShapeError("HVP direction length mismatch", {"theta": theta.shape, "v": v.shape})

    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0:
        return np.zeros_like(theta)

    direction = v / scale
    eps = 1e-4 * (1.0 + float(np.max(np.abs(theta))))
    g_plus = grad_fn(theta + eps * direction)
    g_minus = grad_fn(theta - eps * direction)
    return scale * (g_plus - g_minus) / (2.0 * eps)


def hessian_vector_product(
    model: MlpModel,
    inputs: DoubleArray,
    targets: DoubleArray,
    loss: str,
    v: DoubleArray,
) -> DoubleArray:
    """H.v with H the Hessian of the batch loss w.r.t. the flat parameters."""
    theta = flatten_params(model)
    X, Y = _check_batch(model, inputs, targets)

    def grad_fn(params: DoubleArray) -> DoubleArray:
        return mlp_param_gradient(unflatten_params(model, params), X, Y, loss)

    return finite_difference_hvp(grad_fn, theta, v)


# ==================== Optimizers ====================

@dataclass
class OptimizerState:
    """SGD or Adam; Adam moments are allocated on the first step."""

    kind: str = "sgd"
    learning_rate: float = 1e-3
    first_moment: Optional[DoubleArray] = None
    second_moment: Optional[DoubleArray] = None
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"Unknown optimizer '{self.kind}'")
        if not self.learning_rate > 0.0:
            raise ConfigurationError("Learning rate must be positive", {"learning_rate": self.learning_rate})


def optimizer_step(state: OptimizerState, params: DoubleArray, grad: DoubleArray) -> DoubleArray:
    """Return updated parameters; the optimizer state is mutated in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError("Parameter and gradient lengths differ", {"params": params.shape, "grad": grad.shape})
    if not np.all(np.isfinite(grad)):
        raise NumericError("Non-finite gradient, step rejected", {"step": state.step})

    if state.kind == "sgd":
        return params - state.learning_rate * grad

    if state.first_moment is None or state.first_moment.shape != params.shape:
        state.first_moment = np.zeros_like(params)
        state.second_moment = np.zeros_like(params)
        state.step = 0

    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ==================== Checkpoints ====================

PathLike = Union[str, Path]


def model_to_dict(model: MlpModel) -> dict:
    return {
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(payload: dict) -> MlpModel:
    try:
        return MlpModel(
            tuple(payload["layer_sizes"]),
            tuple(np.array(W, dtype=np.float64).reshape(len(W), -1) for W in payload["weights"]),
            tuple(np.array(b, dtype=np.float64) for b in payload["biases"]),
            payload.get("activation", "tanh"),
        )
    except KeyError as e:
        raise ConfigurationError(f"Checkpoint is missing field {e}") from e


def save_checkpoint(model: MlpModel, path: PathLike) -> Path:
    """Write the JSON checkpoint; floats use repr so the round trip is lossless."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f)
    logger.info(f"Checkpoint written to {path} ({model.param_count} parameters)")
    return path


def load_checkpoint(path: PathLike) -> MlpModel:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("Checkpoint not found", {"path": str(path)})
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Checkpoint is not valid JSON: {e}", {"path": str(path)}) from e
    return model_from_dict(payload)
