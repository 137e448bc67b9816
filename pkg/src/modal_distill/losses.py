"""Label smoothing, clipped cross-entropy and the hard-distillation objective.

All functions work on the last axis of torch tensors, so they accept a single
2-vector or a ``(B, 2)`` batch; array-likes are converted.
"""

from __future__ import annotations

import torch

PROB_FLOOR = 1e-12
TIE_TOLERANCE = 1e-12


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def one_hot(labels, num_classes: int = 2, dtype=torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(_t(labels).long(), num_classes).to(dtype)


def smooth_labels(y, alpha: float) -> torch.Tensor:
    """``(1 - alpha) * y + alpha / K`` with ``K`` classes."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"label smoothing alpha must lie in [0, 1), got {alpha}")
    y = _t(y)
    # same value as (1 - alpha) * y + alpha / K, but exact for one-hot rows
    return y + alpha * (1.0 / y.shape[-1] - y)


def cross_entropy(p, q) -> torch.Tensor:
    """``-sum(q * log p)`` over the last axis, with ``p`` floored at 1e-12."""
    p, q = _t(p), _t(q)
    return -(q * torch.log(p.clamp_min(PROB_FLOOR))).sum(dim=-1)


def harden(p) -> torch.Tensor:
    """One-hot at the argmax; an exact tie (|p1 - p0| < 1e-12) goes to class 0 (ABC)."""
    p = _t(p).detach()
    if p.shape[-1] != 2:
        raise ValueError("harden expects two-class probabilities")
    idx = (p[..., 1] - p[..., 0] > TIE_TOLERANCE).long()
    return one_hot(idx, 2, p.dtype)


def distill_loss(student_p, y, teacher_p, beta: float, gamma: float, alpha: float) -> torch.Tensor:
    """``beta * CE(smooth(y), s) + gamma * CE(smooth(harden(t)), s)`` per sample.

    ``teacher_p=None`` drops the teacher term, which is how a run without a
    teacher is expressed.
    """
    if beta < 0 or gamma < 0:
        raise ValueError("beta and gamma must be non-negative")
    student_p = _t(student_p)
    y = _t(y).to(student_p.dtype)
    loss = beta * cross_entropy(student_p, smooth_labels(y, alpha))
    if teacher_p is not None:
        target = smooth_labels(harden(teacher_p).to(student_p.dtype), alpha)
        loss = loss + gamma * cross_entropy(student_p, target)
    return loss
