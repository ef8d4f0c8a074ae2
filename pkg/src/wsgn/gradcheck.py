"""Finite-difference checks of the full model on random small instances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as wm
from .diffcore import GradCheckResult, grad_check
from .model import ModelConfig, ModelParams


@dataclass
class Instance:
    features: np.ndarray
    labels: np.ndarray
    frame_labels: np.ndarray
    config: ModelConfig
    params: ModelParams


def random_instance(seed: int, normalizations=wm.NORMALIZATIONS) -> Instance:
    """Small random problem with dropout disabled and non-trivial global Gaussian parameters."""
    rng = np.random.default_rng(seed)
    T, M, C = int(rng.integers(2, 9)), int(rng.integers(3, 7)), int(rng.integers(2, 5))
    H = int(rng.integers(3, 7))
    cfg = ModelConfig(M, C, hidden_dim=H, dropout_rate=0.0, enabled_normalizations=normalizations)
    params = ModelParams.init(cfg, rng)
    for k, block in params.items():
        if ".b" in k:
            block.value[...] = rng.normal(0, 0.3, block.value.shape)
    params["global_mean"].value[...] = rng.normal(0, 0.5, C)
    params["global_scale"].value[...] = rng.choice([-1, 1], C) * rng.uniform(0.5, 2.0, C)
    feats = rng.standard_normal((T, M))
    labels = (rng.random(C) < 0.5).astype(float)
    frame_labels = (rng.random((T, C)) < 0.3).astype(float)
    return Instance(feats, labels, frame_labels, cfg, params)


def check_weak(inst: Instance, h: float = 1e-5, break_gradients: bool = False, naive: bool = False) -> GradCheckResult:
    inst.params.zero_grad()
    wm.weak_forward_backward(inst.features, inst.labels, inst.params, inst.config, naive=naive)
    if break_gradients:
        for b in inst.params.values():
            b.grad *= 2.0
    return grad_check(lambda p: wm.weak_loss(inst.features, inst.labels, p, inst.config, naive=naive), inst.params, h)


def check_supervised(inst: Instance, h: float = 1e-5, break_gradients: bool = False) -> GradCheckResult:
    inst.params.zero_grad()
    wm.supervised_forward_backward(inst.features, inst.labels, inst.frame_labels, inst.params, inst.config)
    if break_gradients:
        for b in inst.params.values():
            b.grad *= 2.0
    # the selection head and global Gaussian are unused here
    used = {k: v for k, v in inst.params.items() if k.startswith("cls.")}
    return grad_check(
        lambda p: wm.supervised_loss(inst.features, inst.labels, inst.frame_labels, inst.params, inst.config),
        used,
        h,
    )


def run_suite(n_instances: int = 50, seed: int = 0, h: float = 1e-5, break_gradients: bool = False):
    """Returns ``(max_error, per_block_max)`` over weak (all normalizations) and supervised checks."""
    per_block: dict[str, float] = {}
    for i in range(n_instances):
        inst = random_instance(seed * 100_003 + i)
        for prefix, res in (
            ("weak", check_weak(inst, h, break_gradients)),
            ("supervised", check_supervised(inst, h, break_gradients)),
        ):
            for k, v in res.per_block.items():
                key = f"{prefix}:{k}"
                per_block[key] = max(per_block.get(key, 0.0), v)
    return max(per_block.values()), per_block
