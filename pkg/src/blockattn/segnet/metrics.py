"""Dice similarity per class and its summary over a test set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def dice(pred, truth, k: int) -> float:
    """``2 |P_k & T_k| / (|P_k| + |T_k|)``; 1.0 when class ``k`` is absent from both."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    p = pred == k
    t = truth == k
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


@dataclass
class DiceReport:
    classes: tuple[int, ...]
    per_scene: np.ndarray   # [scenes, classes]

    @property
    def mean(self) -> np.ndarray:
        return self.per_scene.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.per_scene.std(axis=0)

    def class_mean(self, k: int) -> float:
        return float(self.mean[self.classes.index(k)])


def dice_report(preds, truths, classes=(1, 2, 3, 4)) -> DiceReport:
    rows = [[dice(p, t, k) for k in classes] for p, t in zip(preds, truths)]
    return DiceReport(tuple(classes), np.array(rows, dtype=np.float64).reshape(len(rows), len(classes)))
