"""Losses (Dice+CE, consistency L1, pseudo-label) and training schedules
(exponential consistency-weight ramp, linear unlabeled-fraction ramps,
polynomial learning-rate decay)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    total_epochs: int

    def __post_init__(self):
        if not (0 <= self.epoch <= self.total_epochs):
            raise ValueError(f"epoch {self.epoch} outside [0, {self.total_epochs}]")


@dataclass(frozen=True)
class LossWeights:
    consistency_weight: float = 50.0     # W_CR
    pseudo_weight: float = 0.1           # W_PL
    confidence_threshold: float = 0.75   # lambda_conf

    def __post_init__(self):
        if self.consistency_weight < 0 or self.pseudo_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0 < self.confidence_threshold < 1):
            raise ValueError("confidence threshold must lie in (0, 1)")


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def ramp_weight(state: ScheduleState, weight: float, ramp_fraction: float = 0.2) -> float:
    """Exponential ramp from 0 at epoch 0 to `weight` at ramp_fraction * total_epochs."""
    if not (0 < ramp_fraction <= 1):
        raise ValueError("ramp_fraction must lie in (0, 1]")
    if state.epoch == 0:
        return 0.0
    ramp_epochs = ramp_fraction * state.total_epochs
    if state.epoch >= ramp_epochs:
        return float(weight)
    tau = state.epoch / ramp_epochs
    return float(weight * math.exp(-5.0 * (1.0 - tau) ** 2))


def unlabeled_fraction(state: ScheduleState, start: float, end: float = 0.5,
                       ramp_fraction: float = 0.4) -> float:
    """Linear ramp of the unlabeled-batch proportion from `start` to `end`."""
    if not (0 <= start <= end <= 1):
        raise ValueError("need 0 <= start <= end <= 1")
    ramp_epochs = ramp_fraction * state.total_epochs
    if ramp_epochs == 0 or state.epoch >= ramp_epochs:
        return float(end)
    return float(start + (end - start) * state.epoch / ramp_epochs)


def poly_lr(state: ScheduleState, lr0: float = 0.01, exponent: float = 0.9) -> float:
    if lr0 <= 0:
        raise ValueError("initial learning rate must be positive")
    return float(lr0 * (1.0 - state.epoch / state.total_epochs) ** exponent)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _soft_dice(probs: torch.Tensor, onehot: torch.Tensor, include: torch.Tensor) -> torch.Tensor:
    """Mean soft Dice over foreground classes; probs/onehot are (C, V)."""
    inter = (probs * onehot * include).sum(dim=1)
    denom = ((probs + onehot) * include).sum(dim=1)
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    return dice[1:].mean()   # foreground classes only


def dice_ce_loss(logits: torch.Tensor, labels: torch.Tensor,
                 ignore_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Equal-weight sum of cross-entropy and (1 - mean soft Dice).

    logits: (C, *spatial) or (B, C, *spatial); labels: matching index grid.
    ignore_mask marks voxels excluded from both terms. Returns 0 when every
    voxel is ignored.
    """
    if logits.dim() == labels.dim():
        raise ValueError("logits must carry a class dimension that labels lack")
    batched = logits.dim() == labels.dim() + 1 and logits.dim() == 5
    if not batched:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
        if ignore_mask is not None:
            ignore_mask = ignore_mask.unsqueeze(0)

    num_classes = logits.shape[1]
    flat_logits = logits.reshape(logits.shape[0], num_classes, -1)   # (B, C, V)
    flat_labels = labels.reshape(labels.shape[0], -1).long()         # (B, V)
    if ignore_mask is None:
        include = torch.ones_like(flat_labels, dtype=flat_logits.dtype)
    else:
        include = (~ignore_mask.reshape(flat_labels.shape)).to(flat_logits.dtype)
    n_included = include.sum()
    if n_included == 0:
        return flat_logits.sum() * 0.0

    log_probs = F.log_softmax(flat_logits, dim=1)
    ce_per_voxel = -log_probs.gather(1, flat_labels.unsqueeze(1)).squeeze(1)
    ce = (ce_per_voxel * include).sum() / n_included

    probs = log_probs.exp()
    onehot = F.one_hot(flat_labels, num_classes).permute(0, 2, 1).to(probs.dtype)
    dice = torch.stack([
        _soft_dice(probs[b], onehot[b], include[b].unsqueeze(0))
        for b in range(probs.shape[0])
    ]).mean()
    return ce + (1.0 - dice)


def consistency_loss(unperturbed_probs: torch.Tensor,
                     perturbed_probs: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two softmax probability maps. The
    unperturbed branch is the target and must be detached by the caller."""
    if unperturbed_probs.shape != perturbed_probs.shape:
        raise ValueError("probability map shapes differ")
    return (unperturbed_probs - perturbed_probs).abs().mean()


def pseudo_label(probs: torch.Tensor, confidence_threshold: float
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """Confidence-thresholded hard labels from a probability map.

    probs: (C, *spatial) or (B, C, *spatial). A voxel is kept when its argmax
    class is foreground and its max probability exceeds the threshold; all
    other voxels become background and are excluded from the loss.
    """
    with torch.no_grad():
        max_prob, argmax = probs.max(dim=-4)
        keep = (max_prob > confidence_threshold) & (argmax != 0)
        labels = torch.where(keep, argmax, torch.zeros_like(argmax))
    return labels, keep


def pseudo_loss(logits: torch.Tensor, pseudo_labels: torch.Tensor,
                keep_mask: torch.Tensor) -> torch.Tensor:
    """Dice+CE restricted to kept voxels; exactly zero when none are kept."""
    return dice_ce_loss(logits, pseudo_labels, ignore_mask=~keep_mask)


def total_loss(stage: str, components: dict, weights: LossWeights,
               state: ScheduleState, ramp_fraction: float = 0.2) -> torch.Tensor:
    """Combine loss components per training stage.

    pretrain -> reconstruction loss alone; cr -> supervised + ramped
    consistency; pl -> cr composition plus weighted pseudo-label loss.
    """
    if stage == "pretrain":
        return components["reconstruction"]
    omega = ramp_weight(state, weights.consistency_weight, ramp_fraction)
    if stage == "cr":
        return components["supervised"] + omega * components["consistency"]
    if stage == "pl":
        return (components["supervised"] + omega * components["consistency"]
                + weights.pseudo_weight * components["pseudo"])
    raise ValueError(f"unknown stage {stage!r}")
