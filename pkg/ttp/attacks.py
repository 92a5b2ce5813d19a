"""Inference-time adversaries, iterative baselines and input-processing defenses."""

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ttp.errors import BadWindow, ShapeMismatch
from ttp.models import generator_forward
from ttp.projection import Budget, SmoothingKernel, assert_within_budget, project


@dataclass
class AdversarialBatch:
    images: torch.Tensor  # x'_s
    anchors: torch.Tensor  # x_s
    budget: Budget
    source_tag: str = ""
    target_class: Optional[int] = None

    def __post_init__(self) -> None:
        if self.images.shape != self.anchors.shape:
            raise ShapeMismatch(f"images {tuple(self.images.shape)} vs anchors {tuple(self.anchors.shape)}")
        assert_within_budget(self.images, self.anchors, self.budget)


@torch.no_grad()
def craft(
    gen: nn.Module,
    batch: torch.Tensor,
    budget: Budget,
    kernel: Optional[SmoothingKernel] = SmoothingKernel(),
    source_tag: str = "",
    target_class: Optional[int] = None,
) -> AdversarialBatch:
    """One generator pass plus projection; no augmentation at inference."""
    was_training = gen.training
    gen.eval()
    try:
        adv = project(generator_forward(gen, batch), batch, budget, kernel)
    finally:
        gen.train(was_training)
    return AdversarialBatch(adv, batch, budget, source_tag, target_class)


def _target_grad(surrogate: nn.Module, x: torch.Tensor, target_class: int) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    t = torch.full((x.shape[0],), target_class, dtype=torch.long, device=x.device)
    loss = F.cross_entropy(surrogate(x), t)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def _clip_to_ball(x: torch.Tensor, x0: torch.Tensor, budget: Budget) -> torch.Tensor:
    return torch.min(torch.max(x, x0 - budget.epsilon), x0 + budget.epsilon).clamp(0.0, 1.0)


def pgd_targeted(
    surrogate: nn.Module,
    batch: torch.Tensor,
    target_class: int,
    budget: Budget,
    steps: int = 100,
    alpha: float = 2 / 255,
    source_tag: str = "",
) -> AdversarialBatch:
    """x <- Proj(x - alpha * sign(grad CE(x, t))), starting from the clean image."""
    x0 = batch.detach()
    x = x0.clone()
    for _ in range(steps):
        g = _target_grad(surrogate, x, target_class)
        x = _clip_to_ball(x - alpha * g.sign(), x0, budget).detach()
    return AdversarialBatch(x, x0, budget, source_tag, target_class)


def mim_targeted(
    surrogate: nn.Module,
    batch: torch.Tensor,
    target_class: int,
    budget: Budget,
    steps: int = 100,
    alpha: float = 2 / 255,
    mu: float = 1.0,
    source_tag: str = "",
) -> AdversarialBatch:
    """Momentum variant: g <- mu * g + grad / ||grad||_1 per sample, sign step on g."""
    x0 = batch.detach()
    x = x0.clone()
    momentum = torch.zeros_like(x0)
    for _ in range(steps):
        grad = _target_grad(surrogate, x, target_class)
        l1 = grad.abs().flatten(1).sum(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)
        momentum = mu * momentum + grad / l1
        x = _clip_to_ball(x - alpha * momentum.sign(), x0, budget).detach()
    return AdversarialBatch(x, x0, budget, source_tag, target_class)


def median_blur(batch: torch.Tensor, window: int = 5) -> torch.Tensor:
    """Per-channel median filter with reflect padding; shape preserved."""
    if window < 1 or window % 2 == 0:
        raise BadWindow(f"median window must be a positive odd integer, got {window}")
    if window == 1:
        return batch.clone()
    pad = window // 2
    n, c, h, w = batch.shape
    padded = F.pad(batch, (pad, pad, pad, pad), mode="reflect")
    patches = padded.unfold(2, window, 1).unfold(3, window, 1)
    return patches.reshape(n, c, h, w, window * window).median(dim=-1).values


def identity(batch: torch.Tensor) -> torch.Tensor:
    return batch


def make_defense(name: Optional[str], window: int = 5) -> Callable[[torch.Tensor], torch.Tensor]:
    if name in (None, "none", "identity"):
        return identity
    if name == "median-blur":
        if window < 1 or window % 2 == 0:
            raise BadWindow(f"median window must be a positive odd integer, got {window}")
        return lambda x: median_blur(x, window)
    raise ValueError(f"unknown defense {name!r}")


@torch.no_grad()
def predict(
    model: nn.Module,
    images: torch.Tensor,
    batch_size: int = 256,
    defense: Callable[[torch.Tensor], torch.Tensor] = identity,
) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        out = [model(defense(images[i : i + batch_size])).argmax(dim=1) for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def clean_accuracy(model: nn.Module, data, batch_size: int = 256, defense: Optional[str] = None, window: int = 5) -> float:
    """Top-1 accuracy on clean images, optionally behind an input-processing defense."""
    if len(data) == 0:
        return 0.0
    preds = predict(model, data.images, batch_size, make_defense(defense, window))
    return float((preds == data.labels).float().mean().item())
