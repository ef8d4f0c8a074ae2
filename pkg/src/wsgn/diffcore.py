"""Dense numerical core with hand-written gradients.

Matrices are plain ``float64`` numpy arrays. Every differentiable primitive
comes as a ``*_forward`` / ``*_backward`` pair (or returns its gradient
directly), so the model can chain them without an autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

BCE_EPS = 1e-7


class DimensionError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def _check_linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> None:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply x{tuple(x.shape)} by w{tuple(w.shape)}")
    if b.shape[-1] != w.shape[1] or b.size != w.shape[1]:
        raise DimensionError(f"bias{tuple(b.shape)} does not match w{tuple(w.shape)}")


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_linear(x, w, b)
    return x @ w + b.reshape(1, -1)


def linear_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_b`` is a flat vector."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply x{tuple(x.shape)} by w{tuple(w.shape)}")
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"grad_out{tuple(grad_out.shape)} does not match output ({x.shape[0]}, {w.shape[1]})"
        )
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns the output and the boolean keep-mask."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    mask = rng.random(x.shape) >= rate
    return np.where(mask, x / (1.0 - rate), 0.0), mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    if rate == 0.0:
        return grad_out
    return np.where(mask, grad_out / (1.0 - rate), 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - (grad_p * p).sum(axis=1, keepdims=True))


def bce_loss(pred, target):
    """Mean binary cross entropy over classes and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [1e-7, 1 - 1e-7]; the gradient is the analytic
    derivative evaluated at the clamped value.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"pred{p.shape} and target{y.shape} differ")
    c = p.size
    loss = -float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))) / c
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / c
    return loss, grad


@dataclass
class ParamBlock:
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"gradient{self.grad.shape} != value{self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the velocity."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def step(self, params: Mapping[str, ParamBlock]) -> None:
        for name, block in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(block.value)
            elif v.shape != block.value.shape:
                raise DimensionError(f"velocity for {name!r} has shape {v.shape}")
            v *= self.momentum
            v += block.grad
            if self.weight_decay:
                v += self.weight_decay * block.value
            block.value -= self.learning_rate * v
            block.zero_grad()


def sgd_step(params: Mapping[str, ParamBlock], state: SGD) -> Mapping[str, ParamBlock]:
    state.step(params)
    return params


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_block: dict[str, float]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss_fn: Callable[[Mapping[str, ParamBlock]], float],
    params: Mapping[str, ParamBlock],
    h: float = 1e-5,
) -> GradCheckResult:
    """Compare the gradients stored in ``params`` against central differences.

    ``loss_fn`` must be deterministic and read only ``block.value``. Values are
    restored after each probe.
    """
    per_block = {}
    for name, block in params.items():
        analytic = block.grad.copy()
        flat = block.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn(params)
            flat[i] = orig - h
            f_minus = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientCheckError(f"non-finite loss while probing block {name!r} entry {i}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        per_block[name] = worst
    return GradCheckResult(max(per_block.values(), default=0.0), per_block)
