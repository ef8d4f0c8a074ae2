"""Two-stream weakly supervised localization model.

A classification head turns each frame feature into class probabilities
(softmax over classes), a selection head produces raw per-class selection
scores, and up to three normalizations turn those scores into frame weights:

* ``zloc``: Gaussian of the score standardized by the video's own per-class
  mean and population std.
* ``gloc``: same Gaussian with a learned per-class centre and scale.
* ``sloc``: softmax over time, per class.

The enabled weights are averaged and multiplied with the class
probabilities; the temporal mean of that product is the video prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, ParamBlock

NORMALIZATIONS = ("zloc", "gloc", "sloc")
HEAD_KEYS = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_classes: int
    hidden_dim: int | None = None
    dropout_rate: float = 0.5
    enabled_normalizations: tuple[str, ...] = NORMALIZATIONS
    epsilon_std: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.feature_dim)
        norms = tuple(n.lower() for n in self.enabled_normalizations)
        unknown = set(norms) - set(NORMALIZATIONS)
        if unknown:
            raise ValueError(f"unknown normalizations: {sorted(unknown)}")
        if not norms:
            raise ValueError("at least one normalization must be enabled")
        # canonical order keeps the fused mean's summation order fixed
        object.__setattr__(self, "enabled_normalizations", tuple(n for n in NORMALIZATIONS if n in norms))
        if self.hidden_dim < 1 or self.feature_dim < 1 or self.num_classes < 1:
            raise ValueError("feature_dim, num_classes and hidden_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epsilon_std <= 0:
            raise ValueError("epsilon_std must be positive")


class ModelParams(dict):
    """Named parameter blocks: ``cls.*`` and ``det.*`` heads, ``global_mean``, ``global_scale``."""

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        m, h, c = config.feature_dim, config.hidden_dim, config.num_classes
        params = cls()
        for head in ("cls", "det"):
            for name, fan_in, fan_out in (("1", m, h), ("2", h, c)):
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                params[f"{head}.w{name}"] = ParamBlock(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                params[f"{head}.b{name}"] = ParamBlock(np.zeros(fan_out))
        params["global_mean"] = ParamBlock(np.zeros(c))
        params["global_scale"] = ParamBlock(np.ones(c))
        return params

    def head(self, name: str) -> dict[str, np.ndarray]:
        return {k: self[f"{name}.{k}"].value for k in HEAD_KEYS}

    def zero_grad(self) -> None:
        for block in self.values():
            block.zero_grad()

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, b in self.items():
            out[k] = ParamBlock(b.value.copy(), b.grad.copy())
        return out


@dataclass
class ForwardTrace:
    X: np.ndarray | None
    P: np.ndarray
    Z: np.ndarray | None
    L: np.ndarray | None
    S: np.ndarray | None
    G: np.ndarray
    y_hat: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def fused(self) -> np.ndarray:
        return frame_scores(self.P, self.G)


# --- heads -----------------------------------------------------------------


def _head_forward(features, head, rate, rng, training):
    d, mask = dc.dropout_forward(features, rate, rng, training)
    h1 = dc.linear_forward(d, head["w1"], head["b1"])
    r = dc.relu_forward(h1)
    out = dc.linear_forward(r, head["w2"], head["b2"])
    return out, {"d": d, "mask": mask, "h1": h1, "r": r}


def _head_backward(grad_out, head, cache, params: ModelParams, prefix: str) -> None:
    _, gw2, gb2 = dc.linear_backward(cache["r"], head["w2"], grad_out)
    gr = grad_out @ head["w2"].T
    gh1 = dc.relu_backward(cache["h1"], gr)
    _, gw1, gb1 = dc.linear_backward(cache["d"], head["w1"], gh1)
    params[f"{prefix}.w1"].grad += gw1
    params[f"{prefix}.b1"].grad += gb1
    params[f"{prefix}.w2"].grad += gw2
    params[f"{prefix}.b2"].grad += gb2


def _check_features(features: np.ndarray, config: ModelConfig) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != config.feature_dim:
        raise DimensionError(f"features{f.shape} do not match feature_dim={config.feature_dim}")
    if f.shape[0] < 1:
        raise DimensionError("a video needs at least one frame")
    return f


def _class_forward(features, params, config, training, rng):
    logits, cache = _head_forward(features, params.head("cls"), config.dropout_rate, rng, training)
    return dc.softmax_rows(logits), cache


def class_probs(features, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> np.ndarray:
    f = _check_features(features, config)
    return _class_forward(f, params, config, training, rng)[0]


def select_scores(features, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> np.ndarray:
    f = _check_features(features, config)
    return _head_forward(f, params.head("det"), config.dropout_rate, rng, training)[0]


# --- normalizations ----------------------------------------------------------


# smallest positive normal double; keeps weights strictly positive where exp underflows
TINY = np.finfo(np.float64).tiny


def _gauss(u: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(-(u**2)), TINY)


def _centered(X: np.ndarray) -> np.ndarray:
    # shifting by the first row first makes constant columns centre to exactly zero
    D = X - X[:1]
    return D - D.mean(axis=0)


def zloc(X: np.ndarray, epsilon_std: float = 1e-5) -> np.ndarray:
    xc = _centered(X)
    s = np.sqrt((xc**2).mean(axis=0))
    return _gauss(xc / np.maximum(s, epsilon_std))


def zloc_backward(X: np.ndarray, grad_Z: np.ndarray, epsilon_std: float = 1e-5) -> np.ndarray:
    """Gradient through the Gaussian and through the per-video mean/std."""
    xc = _centered(X)
    s = np.sqrt((xc**2).mean(axis=0))
    floored = s <= epsilon_std
    s_eff = np.where(floored, epsilon_std, s)
    u = xc / s_eff
    gu = grad_Z * (-2.0 * u * np.exp(-(u**2)))
    gu_mean = gu.mean(axis=0)
    # with the std floored only the mean depends on X
    guu_mean = np.where(floored, 0.0, (gu * u).mean(axis=0))
    return (gu - gu_mean - u * guu_mean) / s_eff


def _gloc_scale(s_l: np.ndarray, epsilon_std: float) -> np.ndarray:
    return np.maximum(np.abs(s_l), epsilon_std)


def gloc(X: np.ndarray, global_mean: np.ndarray, global_scale: np.ndarray, epsilon_std: float = 1e-5) -> np.ndarray:
    if global_mean.shape != (X.shape[1],) or global_scale.shape != (X.shape[1],):
        raise DimensionError(f"global parameters must have length {X.shape[1]}")
    return _gauss((X - global_mean) / _gloc_scale(global_scale, epsilon_std))


def gloc_backward(X, global_mean, global_scale, grad_L, epsilon_std: float = 1e-5):
    """Returns ``(grad_X, grad_mean, grad_scale)``."""
    sigma = _gloc_scale(global_scale, epsilon_std)
    u = (X - global_mean) / sigma
    gu = grad_L * (-2.0 * u * np.exp(-(u**2)))
    grad_X = gu / sigma
    grad_mean = -grad_X.sum(axis=0)
    grad_sigma = -(gu * u).sum(axis=0) / sigma
    grad_scale = np.where(np.abs(global_scale) > epsilon_std, grad_sigma * np.sign(global_scale), 0.0)
    return grad_X, grad_mean, grad_scale


def sloc(X: np.ndarray) -> np.ndarray:
    e = np.exp(X - X.max(axis=0, keepdims=True))
    return np.maximum(e / e.sum(axis=0, keepdims=True), TINY)


def sloc_backward(S: np.ndarray, grad_S: np.ndarray) -> np.ndarray:
    return S * (grad_S - (grad_S * S).sum(axis=0, keepdims=True))


def fuse_weights(Z=None, L=None, S=None, enabled=NORMALIZATIONS) -> np.ndarray:
    parts = {"zloc": Z, "gloc": L, "sloc": S}
    chosen = [n for n in NORMALIZATIONS if n in enabled]
    if not chosen:
        raise ValueError("fuse_weights needs at least one enabled normalization")
    mats = []
    for n in chosen:
        if parts[n] is None:
            raise ValueError(f"{n} is enabled but its weights were not supplied")
        mats.append(parts[n])
    if any(m.shape != mats[0].shape for m in mats):
        raise DimensionError("normalization outputs differ in shape")
    if len(mats) == 1:
        return mats[0].copy()
    total = mats[0].copy()
    for m in mats[1:]:
        total += m
    return total / len(mats)


# --- predictions -------------------------------------------------------------


def video_predict(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    if P.shape != G.shape:
        raise DimensionError(f"P{P.shape} and G{G.shape} differ")
    if P.shape[0] == 0:
        raise DimensionError("cannot predict from an empty video")
    return (G * P).mean(axis=0)


def naive_predict(P: np.ndarray) -> np.ndarray:
    return P.mean(axis=0)


def frame_scores(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    if P.shape != G.shape:
        raise DimensionError(f"P{P.shape} and G{G.shape} differ")
    return G * P


def forward(features, params: ModelParams, config: ModelConfig, training=False, rng=None, naive=False) -> ForwardTrace:
    f = _check_features(features, config)
    P, cls_cache = _class_forward(f, params, config, training, rng)
    cache = {"cls": cls_cache}
    if naive:
        G = np.ones_like(P)
        return ForwardTrace(None, P, None, None, None, G, naive_predict(P), cache)
    X, det_cache = _head_forward(f, params.head("det"), config.dropout_rate, rng, training)
    cache["det"] = det_cache
    eps = config.epsilon_std
    norms = config.enabled_normalizations
    Z = zloc(X, eps) if "zloc" in norms else None
    L = gloc(X, params["global_mean"].value, params["global_scale"].value, eps) if "gloc" in norms else None
    S = sloc(X) if "sloc" in norms else None
    G = fuse_weights(Z, L, S, norms)
    return ForwardTrace(X, P, Z, L, S, G, video_predict(P, G), cache)


def _backward_from_P(grad_P, trace: ForwardTrace, params: ModelParams) -> None:
    grad_logits = dc.softmax_rows_backward(trace.P, grad_P)
    _head_backward(grad_logits, params.head("cls"), trace.cache["cls"], params, "cls")


def _check_labels(y, config: ModelConfig) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (config.num_classes,):
        raise DimensionError(f"label vector{y.shape} does not match num_classes={config.num_classes}")
    return y


def weak_forward_backward(features, y, params: ModelParams, config: ModelConfig, rng=None, training=False, naive=False):
    """Video-level BCE loss; gradients are added into ``params``."""
    y = _check_labels(y, config)
    trace = forward(features, params, config, training, rng, naive)
    loss, grad_yhat = dc.bce_loss(trace.y_hat, y)
    T = trace.P.shape[0]
    grad_F = np.broadcast_to(grad_yhat / T, trace.P.shape)
    _backward_from_P(grad_F * trace.G, trace, params)
    if naive:
        return loss, params, trace

    grad_G = grad_F * trace.P
    norms = config.enabled_normalizations
    share = grad_G / len(norms)
    eps = config.epsilon_std
    grad_X = np.zeros_like(trace.X)
    if "zloc" in norms:
        grad_X += zloc_backward(trace.X, share, eps)
    if "gloc" in norms:
        gx, gmu, gs = gloc_backward(
            trace.X, params["global_mean"].value, params["global_scale"].value, share, eps
        )
        grad_X += gx
        params["global_mean"].grad += gmu
        params["global_scale"].grad += gs
    if "sloc" in norms:
        grad_X += sloc_backward(trace.S, share)
    _head_backward(grad_X, params.head("det"), trace.cache["det"], params, "det")
    return loss, params, trace


def weak_loss(features, y, params, config, naive=False) -> float:
    trace = forward(features, params, config, training=False, naive=naive)
    return dc.bce_loss(trace.y_hat, _check_labels(y, config))[0]


def supervised_forward_backward(features, y, frame_labels, params: ModelParams, config: ModelConfig, rng=None, training=False):
    """Video BCE on the plain temporal mean plus the mean per-frame BCE.

    The selection stream is not used.
    """
    y = _check_labels(y, config)
    f = _check_features(features, config)
    if frame_labels is None:
        raise ValueError("supervised training needs per-frame labels")
    yt = np.asarray(frame_labels, dtype=np.float64)
    if yt.shape != (f.shape[0], config.num_classes):
        raise DimensionError(f"frame labels{yt.shape} do not match ({f.shape[0]}, {config.num_classes})")
    P, cache = _class_forward(f, params, config, training, rng)
    T = P.shape[0]
    loss, g_video = dc.bce_loss(P.mean(axis=0), y)
    grad_P = np.tile(g_video / T, (T, 1))
    for t in range(T):
        lt, gt = dc.bce_loss(P[t], yt[t])
        loss += lt / T
        grad_P[t] += gt / T
    trace = ForwardTrace(None, P, None, None, None, np.ones_like(P), naive_predict(P), {"cls": cache})
    _backward_from_P(grad_P, trace, params)
    return loss, params


def supervised_loss(features, y, frame_labels, params, config) -> float:
    P = class_probs(features, params, config)
    loss = dc.bce_loss(P.mean(axis=0), y)[0]
    yt = np.asarray(frame_labels, dtype=np.float64)
    return loss + sum(dc.bce_loss(P[t], yt[t])[0] for t in range(P.shape[0])) / P.shape[0]
