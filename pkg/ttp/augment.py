"""Augmented source copies for the distribution-matching regularizer.

Each sample gets its own transform parameters drawn from a caller-supplied
torch.Generator, so a batch is a pure function of (batch, policy, rng state).
"""

import math
from typing import Callable, Dict

import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from ttp.config import AugmentPolicy

# ITU-R 601 luma weights
_LUMA = (0.299, 0.587, 0.114)


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=g).item()


def _coin(g: torch.Generator, p: float) -> bool:
    return torch.rand((), generator=g).item() < p


def rotate(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    angle = _uniform(g, -policy.rotation_max_deg, policy.rotation_max_deg)
    if angle == 0.0:
        return img
    return TF.rotate(img, angle, interpolation=InterpolationMode.BILINEAR, fill=[0.0] * img.shape[0])


def crop_resize(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    _, h, w = img.shape
    area = _uniform(g, *policy.crop_area_range)
    side = math.sqrt(area)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    top = int(torch.randint(0, h - ch + 1, (), generator=g))
    left = int(torch.randint(0, w - cw + 1, (), generator=g))
    if (ch, cw) == (h, w):
        return img
    return TF.resized_crop(img, top, left, ch, cw, [h, w], interpolation=InterpolationMode.BILINEAR, antialias=True)


def hflip(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    return img.flip(-1)


def color_jitter(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    s = policy.jitter_strength
    brightness, contrast, saturation = (_uniform(g, 1.0 - s, 1.0 + s) for _ in range(3))
    if s == 0.0:
        return img
    out = TF.adjust_brightness(img, brightness)
    if img.shape[0] == 3:
        out = TF.adjust_contrast(out, contrast)
        out = TF.adjust_saturation(out, saturation)
    return out


def grayscale(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    c = img.shape[0]
    if c == 1:
        return img
    w = torch.tensor(_LUMA, dtype=img.dtype, device=img.device)
    luma = (img[:3] * w[:, None, None]).sum(0, keepdim=True) / w.sum()
    return luma.expand(c, -1, -1).clone()


TRANSFORMS: Dict[str, Callable[[torch.Tensor, AugmentPolicy, torch.Generator], torch.Tensor]] = {
    "rotate": rotate,
    "crop": crop_resize,
    "flip": hflip,
    "jitter": color_jitter,
    "grayscale": grayscale,
}


def _compose(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    for name in policy.transforms:
        if name == "flip" and not _coin(g, policy.flip_prob):
            continue
        if name == "grayscale" and not _coin(g, policy.grayscale_prob):
            continue
        img = TRANSFORMS[name](img, policy, g)
    return img


def augment_batch(batch: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator) -> torch.Tensor:
    """Return an augmented copy of an N x C x H x W batch in [0, 1]; same shape, clamped to [0, 1]."""
    out = []
    for img in batch:
        if policy.selection == "choose-one":
            pick = int(torch.randint(0, len(policy.transforms), (), generator=generator))
            img = TRANSFORMS[policy.transforms[pick]](img, policy, generator)
        else:
            img = _compose(img, policy, generator)
        out.append(img)
    if not out:
        return batch.clone()
    return torch.stack(out).clamp(0.0, 1.0)
