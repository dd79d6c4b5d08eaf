"""Training objectives and count metrics."""

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossBreakdown:
    density: torch.Tensor
    v_kd: torch.Tensor
    l_kd: torch.Tensor
    total: torch.Tensor
    alpha: float

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("density", "v_kd", "l_kd", "total")} | {"alpha": self.alpha}


def density_loss(pred, gt, counts):
    """(1 / 2B) * sum_k ||G_k - R_k||^2 / max(N_k, 1)."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    counts = torch.as_tensor(counts, dtype=pred.dtype).reshape(-1)
    if counts.numel() != pred.shape[0]:
        raise ValueError("one object count per batch element is required")
    sq = ((gt - pred) ** 2).flatten(1).sum(1)
    return (sq / counts.clamp(min=1)).sum() / (2 * pred.shape[0])


def kd_loss(target, proto, squared=False):
    """Batch mean of the Euclidean distance between teacher and student vectors."""
    target = torch.as_tensor(target)
    proto = torch.as_tensor(proto, dtype=target.dtype)
    if target.shape != proto.shape:
        raise ValueError(f"teacher {tuple(target.shape)} and prototype {tuple(proto.shape)} differ")
    diff = (target - proto).reshape(target.shape[0], -1) if target.dim() > 1 else (target - proto)[None]
    sq = (diff**2).sum(-1)
    return sq.mean() if squared else sq.sqrt().mean()


def total_loss(density, v_kd, l_kd, alpha=0.9):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    density, v_kd, l_kd = (torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x for x in (density, v_kd, l_kd))
    total = density + alpha * v_kd + (1 - alpha) * l_kd
    return LossBreakdown(density, v_kd, l_kd, total, alpha)


def mae_rmse(gt_counts, pred_counts):
    gt = [float(c) for c in gt_counts]
    pred = [float(c) for c in pred_counts]
    if not gt:
        raise ValueError("no counts to compare")
    if len(gt) != len(pred):
        raise ValueError(f"{len(gt)} ground-truth counts but {len(pred)} predictions")
    err = [c - p for c, p in zip(gt, pred)]
    n = len(err)
    return sum(abs(e) for e in err) / n, math.sqrt(sum(e * e for e in err) / n)
