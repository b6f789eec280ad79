"""Training losses: soft Dice, BCE, confidence MSE, and the one-sided
hierarchical consistency penalty, combined with a lambda1 weight.

All operations take probability tensors (post-sigmoid) and are pure, so
batch items can be evaluated concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .decoder import DecoderOutput
from .errors import ShapeMismatchError
from .hierarchy import ConceptHierarchy
from .scenes import PROVENANCE_GT, Sample


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5  # weight of the hierarchical consistency term
    epsilon: float = 1e-6  # log/denominator stability; our addition
    dice_smooth: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda1) and self.lambda1 >= 0):
            raise ValueError(f"lambda1 must be finite and >= 0, got {self.lambda1}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be finite and > 0, got {self.epsilon}")
        if not (math.isfinite(self.dice_smooth) and self.dice_smooth >= 0):
            raise ValueError(f"dice_smooth must be finite and >= 0, got {self.dice_smooth}")


@dataclass
class LossReport:
    """Scalar decomposition of one loss evaluation.

    total = dice + bce + mse + lambda1 * hc by construction.
    """

    dice: float
    bce: float
    mse: float
    hc: float
    total: float

    @classmethod
    def combine(cls, dice: float, bce: float, mse: float, hc: float, lambda1: float):
        return cls(dice=dice, bce=bce, mse=mse, hc=hc, total=dice + bce + mse + lambda1 * hc)

    def as_row(self) -> list[float]:
        return [self.dice, self.bce, self.mse, self.hc, self.total]


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth), mean over masks.

    Leading dimensions index masks; the last two are spatial.
    """
    _check_shapes(probs, targets, "dice_loss")
    p = probs.flatten(-2)
    t = targets.flatten(-2)
    inter = (p * t).sum(-1)
    denom = p.sum(-1) + t.sum(-1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def bce_loss(probs: torch.Tensor, targets: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Mean binary cross-entropy with epsilon-clamped logs."""
    _check_shapes(probs, targets, "bce_loss")
    p = probs.clamp(epsilon, 1.0 - epsilon)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p)).mean()


def hierarchy_consistency_loss(
    parent_probs: torch.Tensor,
    child_probs: torch.Tensor,
    hierarchy: ConceptHierarchy,
    cfg: LossConfig = LossConfig(),
    parent_level: int = 0,
) -> torch.Tensor:
    """One-sided KL-style penalty: a parent map exceeding the pixelwise max
    of its children's maps is penalized; the reverse is not.

    Per parent: mean over pixels of max(0, y_p * (log(y_p + eps) -
    log(max_child + eps))); averaged over the level's parents (leaves
    contribute 0), summed over level pairs.
    """
    parent_ids = hierarchy.level_ids(parent_level)
    child_ids = hierarchy.level_ids(parent_level + 1)
    if parent_probs.shape[0] != len(parent_ids) or child_probs.shape[0] != len(child_ids):
        raise ShapeMismatchError(
            f"expected {len(parent_ids)}/{len(child_ids)} maps, "
            f"got {parent_probs.shape[0]}/{child_probs.shape[0]}"
        )
    if parent_probs.shape[1:] != child_probs.shape[1:]:
        raise ShapeMismatchError(
            f"spatial shapes differ: {tuple(parent_probs.shape[1:])} vs "
            f"{tuple(child_probs.shape[1:])}"
        )
    child_slot = {nid: j for j, nid in enumerate(child_ids)}
    per_parent = []
    for i, parent_id in enumerate(parent_ids):
        kids = hierarchy.children(parent_id)
        if not kids:
            per_parent.append(parent_probs.new_zeros(()))
            continue
        max_child = child_probs[[child_slot[c] for c in kids]].max(dim=0).values
        y = parent_probs[i]
        term = y * (torch.log(y + cfg.epsilon) - torch.log(max_child + cfg.epsilon))
        per_parent.append(term.clamp_min(0.0).mean())
    return torch.stack(per_parent).mean()


def dice_targets(
    mask_logits: torch.Tensor, gt_masks: torch.Tensor, threshold: float = 0.5
) -> torch.Tensor:
    """Per-mask Dice of the binarized prediction against ground truth.

    Both-empty pairs score 1.0. Returned detached: the confidence head
    regresses onto this value as a constant.
    """
    _check_shapes(mask_logits, gt_masks, "dice_targets")
    with torch.no_grad():
        pred = (torch.sigmoid(mask_logits) > threshold).to(gt_masks.dtype)
        inter = (pred * gt_masks).flatten(-2).sum(-1)
        denom = pred.flatten(-2).sum(-1) + gt_masks.flatten(-2).sum(-1)
        out = torch.where(denom > 0, 2.0 * inter / denom.clamp_min(1.0), torch.ones_like(denom))
    return out


def confidence_mse_loss(
    pred_conf: torch.Tensor,
    mask_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    targets: torch.Tensor | None = None,
) -> torch.Tensor:
    """MSE between predicted confidences and the masks' true Dice scores,
    normalized by mask count. ``targets`` may be precomputed (they are
    constants either way)."""
    if targets is None:
        targets = dice_targets(mask_logits, gt_masks)
    if pred_conf.shape != targets.shape:
        raise ShapeMismatchError(
            f"confidence_mse_loss: {tuple(pred_conf.shape)} vs {tuple(targets.shape)}"
        )
    return ((pred_conf - targets) ** 2).mean()


def gt_masks_for_level(
    sample: Sample, hierarchy: ConceptHierarchy, level: int,
    dtype=torch.float32, device=None,
) -> torch.Tensor:
    """Binary ground-truth mask stack (n_level, H, W) in slot order."""
    level_map = torch.as_tensor(
        sample.level_maps[level].astype("int64"), device=device
    )
    ids = hierarchy.level_ids(level)
    return torch.stack([(level_map == nid) for nid in ids]).to(dtype)


def total_loss(
    output: DecoderOutput,
    sample: Sample,
    hierarchy: ConceptHierarchy,
    cfg: LossConfig = LossConfig(),
    conf_targets: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Dice + BCE per concept at both levels, confidence MSE, and the
    lambda1-weighted consistency term.

    Pseudo-labeled samples do not supervise the confidence head (their
    Dice targets would be self-referential), so their MSE term is 0.
    Returns the differentiable total plus a scalar report.
    """
    parent_probs = torch.sigmoid(output.parent_logits)
    child_probs = torch.sigmoid(output.child_logits)
    dtype, device = parent_probs.dtype, parent_probs.device
    gt_parent = gt_masks_for_level(sample, hierarchy, 0, dtype=dtype, device=device)
    gt_child = gt_masks_for_level(sample, hierarchy, 1, dtype=dtype, device=device)
    _check_shapes(parent_probs, gt_parent, "total_loss parent")
    _check_shapes(child_probs, gt_child, "total_loss child")

    all_probs = torch.cat([parent_probs, child_probs], dim=0)
    all_gt = torch.cat([gt_parent, gt_child], dim=0)
    dice = dice_loss(all_probs, all_gt, smooth=cfg.dice_smooth)
    bce = bce_loss(all_probs, all_gt, epsilon=cfg.epsilon)

    if sample.provenance == PROVENANCE_GT:
        all_conf = torch.cat([output.parent_conf, output.child_conf], dim=0)
        all_logits = torch.cat([output.parent_logits, output.child_logits], dim=0)
        if conf_targets is not None:
            targets = torch.cat(conf_targets, dim=0)
        else:
            targets = None
        mse = confidence_mse_loss(all_conf, all_logits, all_gt, targets=targets)
    else:
        mse = all_probs.new_zeros(())

    hc = hierarchy_consistency_loss(parent_probs, child_probs, hierarchy, cfg)
    total = dice + bce + mse + cfg.lambda1 * hc
    report = LossReport.combine(
        dice=float(dice.detach()), bce=float(bce.detach()), mse=float(mse.detach()),
        hc=float(hc.detach()), lambda1=cfg.lambda1,
    )
    return total, report
