"""Smooth l-infinity projection of generator outputs around clean anchors."""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from ttp.errors import BudgetViolation, ShapeMismatch

# slack for float32 rounding of anchor +/- eps
BUDGET_TOLERANCE = 2.0 ** -20


@dataclass(frozen=True)
class SmoothingKernel:
    """3x3 binomial kernel ([1,2,1]^T [1,2,1]) / 16, applied depthwise with reflect padding."""

    size: int = 3

    def weights(self, channels: int, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
        row = torch.tensor([1.0, 2.0, 1.0], dtype=dtype, device=device)
        k = torch.outer(row, row) / 16.0
        return k.expand(channels, 1, self.size, self.size).contiguous()


@dataclass(frozen=True)
class Budget:
    """l-infinity radius on the [0, 1] pixel scale."""

    epsilon: float

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    @classmethod
    def from_pixels(cls, eps: float) -> "Budget":
        return cls(float(eps) / 255.0)

    @property
    def pixels(self) -> float:
        return self.epsilon * 255.0


def smooth(batch: torch.Tensor, kernel: SmoothingKernel = SmoothingKernel()) -> torch.Tensor:
    c = batch.shape[1]
    pad = kernel.size // 2
    w = kernel.weights(c, batch.dtype, batch.device)
    return F.conv2d(F.pad(batch, (pad, pad, pad, pad), mode="reflect"), w, groups=c)


def project(
    raw: torch.Tensor,
    anchor: torch.Tensor,
    budget: Budget,
    kernel: Optional[SmoothingKernel] = SmoothingKernel(),
) -> torch.Tensor:
    """clip(min(anchor + eps, max(W * raw, anchor - eps))) with the outer clip to [0, 1].

    Smoothing happens before clamping, so it can never break the bound.
    Pass kernel=None to disable smoothing.
    """
    if raw.shape != anchor.shape:
        raise ShapeMismatch(f"raw {tuple(raw.shape)} vs anchor {tuple(anchor.shape)}")
    x = smooth(raw, kernel) if kernel is not None else raw
    x = torch.max(x, anchor - budget.epsilon)
    x = torch.min(x, anchor + budget.epsilon)
    return x.clamp(0.0, 1.0)


def assert_within_budget(
    adv: torch.Tensor, anchor: torch.Tensor, budget: Budget, tol: float = BUDGET_TOLERANCE
) -> None:
    with torch.no_grad():
        gap = (adv - anchor).abs().max().item() if adv.numel() else 0.0
        lo, hi = (adv.min().item(), adv.max().item()) if adv.numel() else (0.0, 0.0)
    if gap > budget.epsilon + tol:
        raise BudgetViolation(f"max |adv - anchor| = {gap:.8f} exceeds eps = {budget.epsilon:.8f}")
    if lo < 0.0 or hi > 1.0:
        raise BudgetViolation(f"adversary leaves [0, 1]: min={lo:.6f} max={hi:.6f}")
