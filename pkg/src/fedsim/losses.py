"""Cross-entropy, temperature-scaled distillation, and their alpha-blend.

The distillation term is T^2 times the batch-mean KL divergence between the
teacher's softened distribution q = softmax(zt/T) and the student's softened
log-distribution p_hat = log_softmax(zs/T). Teacher logits are treated as
constants: no gradient ever flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, log_softmax_lastdim, mul, scale, tsum


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    def canonical(self) -> str:
        return f"alpha={self.alpha!r}\ntemperature={self.temperature!r}\n"


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes, via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, C), got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if y.shape[0] != b:
        raise ShapeError(f"{y.shape[0]} labels for batch of {b}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    picker = np.zeros((b, c))
    picker[np.arange(b), y] = -1.0 / b
    return tsum(mul(log_softmax_lastdim(logits, 1.0), Tensor(picker)))


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """T^2 * mean_i KL(q_i || p_i) with softened teacher/student distributions."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    zt = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != zt.shape:
        raise ShapeError(f"student {student_logits.shape} vs teacher {zt.shape} logits")
    b = zt.shape[0] if zt.ndim > 1 else 1
    log_q = _log_softmax_np(zt / temperature)
    q = np.exp(log_q)
    factor = temperature * temperature / b
    entropy_term = float((q * log_q).sum()) * factor
    p_hat = log_softmax_lastdim(student_logits, temperature)
    cross_term = scale(tsum(mul(p_hat, Tensor(q))), -factor)
    return cross_term + entropy_term


def total_loss(student_logits: Tensor, teacher_logits: Tensor | None, labels,
               config: DistillConfig) -> tuple[Tensor, dict[str, float]]:
    """alpha * CE + (1 - alpha) * KD, plus a per-component breakdown."""
    ce = cross_entropy(student_logits, labels)
    if config.alpha == 1.0:
        kd = Tensor(0.0)
    else:
        if teacher_logits is None:
            raise ConfigError("alpha < 1 requires teacher logits")
        kd = kd_loss(student_logits, teacher_logits, config.temperature)
    total = scale(ce, config.alpha) + scale(kd, 1.0 - config.alpha)
    breakdown = {
        "cross_entropy": ce.item(),
        "distillation": kd.item(),
        "total": total.item(),
    }
    return total, breakdown


class TeacherHandle:
    """A frozen logits producer; outputs are constants for the student's tape."""

    def __init__(self, model, name: str = "toy-teacher"):
        model.freeze_all()
        self._model = model
        self.name = name

    def logits(self, images: Tensor) -> Tensor:
        out = self._model.forward(images, train=False)
        return Tensor(out.data)

    def __call__(self, images: Tensor) -> Tensor:
        return self.logits(images)
