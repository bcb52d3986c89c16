"""Minimal differentiable core: dense layers, dropout, softmax CE, Adam.

All arrays are float64, shape (rows, cols), C-order. Randomness always comes
from an injected numpy Generator so identical seeds give identical runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_matrix(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


@dataclass
class Parameter:
    """A learnable tensor with its gradient and Adam state."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = _check_matrix("value", self.value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """out = x @ weight + bias, bias broadcast over rows."""
    x = _check_matrix("input", x)
    weight = _check_matrix("weight", weight)
    bias = _check_matrix("bias", bias)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias.shape != (1, weight.shape[1]):
        raise ValueError(f"bias shape {bias.shape} must be (1, {weight.shape[1]})")
    return x @ weight + bias


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_weight, d_bias); d_bias sums over batch rows."""
    grad_out = _check_matrix("grad_out", grad_out)
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ValueError(
            f"grad_out shape {grad_out.shape} incompatible with input {x.shape} "
            f"and weight {weight.shape}"
        )
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0, keepdims=True)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is taken as 0.
    return grad_out * (x > 0)


def dropout_forward(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns (out, mask); backward is grad * mask.

    Train mode zeroes each element with probability `rate` and scales
    survivors by 1/(1-rate); eval mode is the identity.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        mask = np.ones_like(x)
        return x, mask
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    logits = _check_matrix("logits", logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[target]; grad = (softmax - onehot) / B."""
    logits = _check_matrix("logits", logits)
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ValueError(f"targets shape {targets.shape} must be ({logits.shape[0]},)")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError(
            f"targets must lie in [0, {logits.shape[1]}), got range "
            f"[{targets.min()}, {targets.max()}]"
        )
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted[np.arange(b), targets] - log_z
    loss = float(-log_probs.mean())
    grad = softmax(logits)
    grad[np.arange(b), targets] -= 1.0
    return loss, grad / b


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot uniform: i.i.d. on [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]."""
    if rows < 1 or cols < 1:
        raise ValueError(f"dimensions must be positive, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def adam_step(params: list[Parameter], config: AdamConfig, t: int) -> None:
    """Canonical Adam with bias correction; zeroes gradients afterwards."""
    if t < 1:
        raise ValueError(f"step index t must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    for p in params:
        g = p.grad
        p.adam_m[...] = b1 * p.adam_m + (1.0 - b1) * g
        p.adam_v[...] = b2 * p.adam_v + (1.0 - b2) * g * g
        m_hat = p.adam_m / (1.0 - b1**t)
        v_hat = p.adam_v / (1.0 - b2**t)
        p.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        p.grad[...] = 0.0


def finite_difference_check(
    loss_fn,
    params: list[Parameter],
    epsilon: float = 1e-6,
    max_coords_per_tensor: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare populated analytic grads against central differences.

    loss_fn must be a deterministic function of the current parameter values.
    Large tensors are sampled (deterministically) down to
    max_coords_per_tensor coordinates. Returns the max relative error with
    denominator max(|analytic|, |numeric|, 1e-8); gradients in `params` must
    already hold the analytic values at the current point.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat_value = p.value.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        n = flat_value.size
        if n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        for i in coords:
            orig = flat_value[i]
            flat_value[i] = orig + epsilon
            f_plus = loss_fn()
            flat_value[i] = orig - epsilon
            f_minus = loss_fn()
            flat_value[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = flat_grad[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
