"""Generator objectives: paired symmetric KL, neighbourhood similarity, cross-entropy baseline."""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from ttp.errors import BadClassIndex, ShapeMismatch, ZeroNormRow

Features = Union[torch.Tensor, Sequence[torch.Tensor]]


@dataclass
class SimilarityMatrix:
    values: torch.Tensor  # N x N
    normalized: bool = False
    log_values: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.values.dim() != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeMismatch(f"similarity matrix must be N x N, got {tuple(self.values.shape)}")

    @property
    def logs(self) -> torch.Tensor:
        return self.log_values if self.log_values is not None else torch.log(self.values)


@dataclass
class LossBreakdown:
    l_dist: torch.Tensor
    l_aug: torch.Tensor
    l_sim: torch.Tensor
    total: torch.Tensor

    def as_record(self, step: int, **extra) -> Dict[str, float]:
        return {
            "step": step,
            **extra,
            "l_dist": float(self.l_dist),
            "l_aug": float(self.l_aug),
            "l_sim": float(self.l_sim),
            "total": float(self.total),
        }


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.dim() != 2 or a.shape != b.shape:
        raise ShapeMismatch(f"expected two N x n feature batches, got {tuple(a.shape)} and {tuple(b.shape)}")


def paired_symmetric_kl(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """KL(A||B) + KL(B||A) with row i of `a` paired to row i of `b`, averaged over rows.

    Written as sum_j (p_j - q_j)(log p_j - log q_j), which equals the two KL terms
    summed and is symmetric and non-negative term by term.
    """
    _same_shape(a, b)
    la = F.log_softmax(a, dim=1)
    lb = F.log_softmax(b, dim=1)
    return ((la.exp() - lb.exp()) * (la - lb)).sum(dim=1).mean()


def _mean_over_members(fn, adv: Features, target: Features) -> torch.Tensor:
    if isinstance(adv, torch.Tensor):
        return fn(adv, target)
    if len(adv) != len(target) or not adv:
        raise ShapeMismatch(f"{len(adv)} adversarial vs {len(target)} target feature sets")
    return torch.stack([fn(a, t) for a, t in zip(adv, target)]).mean()


def distribution_loss(feat_adv: Features, feat_target: Features) -> torch.Tensor:
    """L = KL(P'||Q) + KL(Q||P'); for an ensemble, the mean over members."""
    return _mean_over_members(paired_symmetric_kl, feat_adv, feat_target)


def augmented_distribution_loss(feat_aug_adv: Features, feat_target: Features) -> torch.Tensor:
    """L^aug over the augmented-adversarial branch; targets stay un-augmented."""
    return _mean_over_members(paired_symmetric_kl, feat_aug_adv, feat_target)


def similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> SimilarityMatrix:
    """S_ij = cos(a_i, b_j)."""
    _same_shape(a, b)
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroNormRow("cosine similarity is undefined for a zero feature row")
    s = (a / na) @ (b / nb).t()
    return SimilarityMatrix(s.clamp(-1.0, 1.0), normalized=False)


def row_softmax(s: SimilarityMatrix) -> SimilarityMatrix:
    logs = F.log_softmax(s.values, dim=1)
    return SimilarityMatrix(logs.exp(), normalized=True, log_values=logs)


def neighbourhood_loss(s_src_norm: SimilarityMatrix, s_tgt_norm: SimilarityMatrix) -> torch.Tensor:
    """sum_ij St log(St/Ss) + sum_ij Ss log(Ss/St); no 1/N factor."""
    if s_src_norm.values.shape != s_tgt_norm.values.shape:
        raise ShapeMismatch(
            f"similarity matrices differ: {tuple(s_src_norm.values.shape)} vs {tuple(s_tgt_norm.values.shape)}"
        )
    if not (s_src_norm.normalized and s_tgt_norm.normalized):
        raise ValueError("neighbourhood_loss expects row-normalized matrices")
    return ((s_tgt_norm.values - s_src_norm.values) * (s_tgt_norm.logs - s_src_norm.logs)).sum()


def similarity_loss(feat_adv: torch.Tensor, feat_aug_adv: torch.Tensor, feat_target: torch.Tensor) -> torch.Tensor:
    s_src = row_softmax(similarity_matrix(feat_adv, feat_aug_adv))
    s_tgt = row_softmax(similarity_matrix(feat_target, feat_target))
    return neighbourhood_loss(s_src, s_tgt)


def total_loss(
    l_dist: torch.Tensor,
    l_aug: Optional[torch.Tensor] = None,
    l_sim: Optional[torch.Tensor] = None,
    use_aug: bool = True,
    use_sim: bool = True,
) -> LossBreakdown:
    """L_G = L + L^aug + L^sim; a switched-off or missing term is an exact zero."""
    zero = torch.zeros((), dtype=l_dist.dtype, device=l_dist.device)
    l_aug = l_aug if (use_aug and l_aug is not None) else zero
    l_sim = l_sim if (use_sim and l_sim is not None) else zero
    return LossBreakdown(l_dist, l_aug, l_sim, l_dist + l_aug + l_sim)


def ce_target_loss(feat_adv: torch.Tensor, target_class: int) -> torch.Tensor:
    """Mean over the batch of -log softmax(feat_i)[t]."""
    if feat_adv.dim() != 2:
        raise ShapeMismatch(f"expected N x n logits, got {tuple(feat_adv.shape)}")
    if not 0 <= target_class < feat_adv.shape[1]:
        raise BadClassIndex(f"target class {target_class} outside [0, {feat_adv.shape[1]})")
    t = torch.full((feat_adv.shape[0],), target_class, dtype=torch.long, device=feat_adv.device)
    return F.cross_entropy(feat_adv, t)


def generator_objective(
    feats_adv: Sequence[torch.Tensor],
    feats_aug_adv: Optional[Sequence[torch.Tensor]],
    feats_target: Sequence[torch.Tensor],
    objective: str = "ttp",
    use_aug: bool = True,
    use_sim: bool = True,
    target_class: Optional[int] = None,
) -> LossBreakdown:
    """Per-member losses averaged across the ensemble, then summed into L_G.

    The cross-entropy baseline reports its loss in the l_dist slot.
    """
    if objective == "ce":
        if target_class is None:
            raise BadClassIndex("the cross-entropy objective needs a target class")
        ce = torch.stack([ce_target_loss(f, target_class) for f in feats_adv]).mean()
        return total_loss(ce, use_aug=False, use_sim=False)
    if objective != "ttp":
        raise ValueError(f"unknown objective {objective!r}")

    l_dist = distribution_loss(list(feats_adv), list(feats_target))
    l_aug = l_sim = None
    if feats_aug_adv is not None:
        if use_aug:
            l_aug = augmented_distribution_loss(list(feats_aug_adv), list(feats_target))
        if use_sim:
            l_sim = torch.stack(
                [similarity_loss(a, aa, t) for a, aa, t in zip(feats_adv, feats_aug_adv, feats_target)]
            ).mean()
    return total_loss(l_dist, l_aug, l_sim, use_aug=use_aug, use_sim=use_sim)
