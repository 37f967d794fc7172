"""Training objectives: HR/LR reconstruction, triplet contrastive, and noise prediction."""

from __future__ import annotations

import torch


class LossError(ValueError):
    pass


def _mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 0 or pred.shape[0] < 1:
        raise LossError("batch must contain at least one item")
    return ((pred - target) ** 2).mean()


def loss_rh(pred_hr: torch.Tensor, gt_hr: torch.Tensor) -> torch.Tensor:
    """HR reconstruction loss: squared error averaged over batch, channels and pixels."""
    return _mse(pred_hr, gt_hr)


def loss_rl(pred_lr: torch.Tensor, gt_lr: torch.Tensor) -> torch.Tensor:
    """LR reconstruction loss; same form as :func:`loss_rh` on LR-sized batches."""
    return _mse(pred_lr, gt_lr)


def loss_eps(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps_true.shape != eps_pred.shape:
        raise LossError(f"shape mismatch: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    return ((eps_true - eps_pred) ** 2).mean()


def _dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # sqrt(sum + tiny) keeps the gradient finite at a == b
    return torch.sqrt(((a - b) ** 2).sum(-1) + 1e-24)


def loss_cl(anchor, positives, negatives, margin: float = 0.01) -> torch.Tensor:
    """Triplet hinge ``sum_i max(0, d(a, p_i) - d(a, n_i) + margin)``.

    ``anchor`` is ``(D,)`` or ``(B, D)``; ``positives``/``negatives`` are
    sequences (or stacked tensors) of ``n`` reps shaped like ``anchor``.
    Positive ``i`` is paired with negative ``i``. The sum over ``i`` is
    averaged over the batch dimension when one is present.
    """
    if margin < 0:
        raise LossError("margin must be non-negative")
    pos = torch.stack(list(positives)) if not torch.is_tensor(positives) else positives
    neg = torch.stack(list(negatives)) if not torch.is_tensor(negatives) else negatives
    if pos.shape[0] != neg.shape[0] or pos.shape[0] < 1:
        raise LossError(f"need equal, non-zero numbers of positives and negatives ({pos.shape[0]} vs {neg.shape[0]})")
    if pos.shape[1:] != anchor.shape or neg.shape[1:] != anchor.shape:
        raise LossError("representation shapes differ from the anchor")
    a = anchor.unsqueeze(0)
    hinge = torch.clamp(_dist(a, pos) - _dist(a, neg) + margin, min=0.0)
    total = hinge.sum(0)
    return total.mean() if total.dim() else total
