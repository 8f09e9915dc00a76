"""ADAM training with class-weighted pixelwise cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..attention import AttentionConfig
from ..tensor import backend
from .metrics import DiceReport, dice_report
from .scenes import NUM_CLASSES, Scene, stack
from .unet import UNet


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    attention: Optional[AttentionConfig] = None
    placement: str = "none"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weights: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def inverse_frequency_weights(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    counts = np.bincount(np.asarray(labels).ravel(), minlength=num_classes).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    w = counts.sum() / (num_classes * counts)
    return w / w.mean()


def cross_entropy(logits, labels, weights=None):
    """Weighted mean pixel cross-entropy and its gradient w.r.t. ``logits``."""
    n, k, h, w = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    pix_w = np.ones((n, h, w)) if weights is None else np.asarray(weights)[labels]
    norm = pix_w.sum()
    loss = float(-(pix_w * (onehot * log_p).sum(axis=1)).sum() / norm)
    grad = (np.exp(log_p) - onehot) * (pix_w / norm)[:, None]
    return loss, grad


@dataclass
class TrainResult:
    model: UNet
    losses: list[float]


def train(model: UNet, cfg: TrainConfig, scenes: list[Scene],
          log: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit ``model`` in place; returns it with the per-epoch mean loss."""
    if not scenes:
        raise ValueError("train needs at least one scene")
    images, labels = stack(scenes)
    weights = inverse_frequency_weights(labels) if cfg.class_weights else None
    opt = Adam(model.named_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    grads = model.named_grads()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    losses = []
    with backend("blas"):
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(scenes))
            total, count = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                model.zero_grad()
                logits = model.forward(images[idx], training=True)
                loss, g = cross_entropy(logits, labels[idx], weights)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}: "
                        f"check the learning rate ({cfg.lr}) and initialisation")
                model.backward(g)
                opt.step(grads)
                total += loss * len(idx)
                count += len(idx)
            losses.append(total / count)
            if log is not None:
                log(epoch, losses[-1])
    return TrainResult(model, losses)


def predict(model: UNet, scenes: list[Scene], batch_size: int = 16) -> np.ndarray:
    images, _ = stack(scenes)
    with backend("blas"):
        return np.concatenate([model.predict(images[i:i + batch_size])
                               for i in range(0, len(images), batch_size)])


def evaluate(model: UNet, scenes: list[Scene]) -> DiceReport:
    preds = predict(model, scenes)
    return dice_report(preds, [s.labels for s in scenes])
