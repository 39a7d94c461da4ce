"""Dense tensor math: matmul, row softmax, layer norm, nonlinearities, and their
backward companions, plus a central-difference gradient oracle.

Tensors are plain numpy arrays (row-major). Default run precision is float32;
correctness tests use float64. All operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Tensor = np.ndarray

DTYPE_DEFAULT = np.float32
DTYPE_TEST = np.float64

INIT_SCALE = 0.02

# fixed constants of the tanh-form gelu
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

MASK_PENALTY = -1e9


@dataclass
class GradPair:
    """A parameter array paired with its gradient buffer; grad is None for frozen parameters."""

    value: Tensor
    grad: Tensor | None = None

    def __post_init__(self) -> None:
        if self.grad is not None and self.grad.shape != self.value.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def trainable(self) -> bool:
        return self.grad is not None


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by (seed, stream labels); reproducible across runs."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            entropy.extend(part.encode("utf-8"))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def normal_init(rng: np.random.Generator, shape, dtype=DTYPE_DEFAULT, scale: float = INIT_SCALE) -> Tensor:
    return (rng.standard_normal(shape) * scale).astype(dtype)


def assert_finite(x: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN/Inf")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(grad_out: Tensor, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Gradients of out = a @ b wrt a and b."""
    return grad_out @ b.T, a.T @ grad_out


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax, max-subtracted for stability."""
    if np.isnan(m).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(grad_out: Tensor, probs: Tensor) -> Tensor:
    """Backward of row softmax given the forward probabilities."""
    return probs * (grad_out - (grad_out * probs).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization: (x - mean) / sqrt(var + eps) * gamma + beta."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def layer_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Forward returning (out, cache) for layer_norm_backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layer_norm_backward(grad_out: Tensor, cache) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients wrt (x, gamma, beta); sums gamma/beta grads over all leading axes."""
    xhat, inv_std, gamma = cache
    d = xhat.shape[-1]
    reduce_axes = tuple(range(xhat.ndim - 1))
    dgamma = (grad_out * xhat).sum(axis=reduce_axes)
    dbeta = grad_out.sum(axis=reduce_axes)
    dxhat = grad_out * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; gelu uses the tanh approximation."""
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "gelu":
        inner = _GELU_C * (x + _GELU_A * (x * x * x))
        return 0.5 * x * (1.0 + np.tanh(inner))
    raise ConfigError(f"unknown activation kind {kind!r}")


def activation_backward(grad_out: Tensor, x: Tensor, kind: str) -> Tensor:
    """Backward of activation(x, kind) given the pre-activation input."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1.0 - t * t)
    if kind == "gelu":
        x_sq = x * x
        inner = _GELU_C * (x + _GELU_A * (x_sq * x))
        t = np.tanh(inner)
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x_sq)
        return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)
    raise ConfigError(f"unknown activation kind {kind!r}")


def finite_diff_grad(f, x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x, one coordinate at a time.

    Mutates x in place during probing and restores it; use float64 inputs.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("objective returned NaN/Inf during finite differencing")
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def finite_diff_grad_sampled(f, x: Tensor, indices, eps: float = 1e-5) -> np.ndarray:
    """finite_diff_grad restricted to the given flat indices; returns one value per index."""
    flat = x.reshape(-1)
    out = np.zeros(len(indices), dtype=np.float64)
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("objective returned NaN/Inf during finite differencing")
        out[k] = (f_plus - f_minus) / (2.0 * eps)
    return out


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
