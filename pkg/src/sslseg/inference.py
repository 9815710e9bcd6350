"""Sliding-window whole-volume prediction: evenly spaced tile placement,
Gaussian or uniform stitching weights, and mirror-flip test-time augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .volumes import SegLabel, Volume


@dataclass
class InferenceConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    step_fraction: float = 0.5
    mirror_axes: tuple[int, ...] = ()
    stitch_weighting: str = "gaussian"   # or "uniform"

    def __post_init__(self):
        if not (0 < self.step_fraction <= 1):
            raise ValueError("step_fraction must lie in (0, 1]")
        if not set(self.mirror_axes) <= {0, 1, 2}:
            raise ValueError("mirror axes must be a subset of {0, 1, 2}")
        if self.stitch_weighting not in ("gaussian", "uniform"):
            raise ValueError(f"unknown weighting {self.stitch_weighting!r}")


def tile_positions(volume_extent, patch_size, step_fraction: float) -> list[tuple[int, int, int]]:
    """Evenly spaced tile offsets covering the whole (padded) volume: per axis,
    ceil((extent - patch) / (step_fraction * patch)) + 1 steps stretched from 0
    to extent - patch inclusive; Cartesian product across axes."""
    per_axis = []
    for extent, patch in zip(volume_extent, patch_size):
        if extent < patch:
            raise ValueError(f"extent {extent} < patch {patch}; pad the volume first")
        span = extent - patch
        if span == 0:
            per_axis.append([0])
            continue
        num = int(np.ceil(span / (step_fraction * patch))) + 1
        per_axis.append([int(round(v)) for v in np.linspace(0, span, num)])
    return [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]


def stitch_weight(patch_size, weighting: str = "gaussian") -> np.ndarray:
    """Per-voxel stitching weights: separable centered Gaussian with sigma =
    patch/8 (max 1, floored at 1e-8), or all ones."""
    if weighting == "uniform":
        return np.ones(tuple(patch_size), dtype=np.float32)
    axes = []
    for p in patch_size:
        coords = np.arange(p, dtype=np.float64)
        center = (p - 1) / 2.0
        sigma = p / 8.0
        axes.append(np.exp(-0.5 * ((coords - center) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    return np.maximum(w, 1e-8).astype(np.float32)


def tta_mirror(model, patch: torch.Tensor, mirror_axes) -> torch.Tensor:
    """Average softmax outputs over all flip combinations of the given axes,
    un-flipping each output before averaging. patch: (B, 1, D, H, W)."""
    mirror_axes = tuple(sorted(set(mirror_axes)))
    combos = [()]
    for ax in mirror_axes:
        combos += [c + (ax,) for c in combos]
    acc = None
    for combo in combos:
        dims = tuple(ax + 2 for ax in combo)   # spatial dims follow (B, C)
        flipped = torch.flip(patch, dims) if dims else patch
        probs = torch.softmax(model(flipped), dim=1)
        if dims:
            probs = torch.flip(probs, dims)
        acc = probs if acc is None else acc + probs
    return acc / len(combos)


def sliding_window_predict(model, volume: Volume, cfg: InferenceConfig,
                           num_classes: int | None = None) -> np.ndarray:
    """Tiled prediction over a preprocessed volume. Returns per-voxel class
    probabilities (C, D, H, W) summing to 1; argmax is the predicted label."""
    data = torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))
    orig_shape = tuple(data.shape)
    pad = [max(0, p - s) for p, s in zip(cfg.patch_size, orig_shape)]
    if any(pad):
        data = F.pad(data, (0, pad[2], 0, pad[1], 0, pad[0]))
    shape = tuple(data.shape)

    weights = torch.from_numpy(stitch_weight(cfg.patch_size, cfg.stitch_weighting))
    offsets = tile_positions(shape, cfg.patch_size, cfg.step_fraction)

    prob_acc = None
    weight_acc = torch.zeros(shape, dtype=torch.float32)
    model_eval = model.eval() if hasattr(model, "eval") else model
    with torch.no_grad():
        for off in offsets:
            sl = tuple(slice(off[i], off[i] + cfg.patch_size[i]) for i in range(3))
            tile = data[sl].unsqueeze(0).unsqueeze(0)
            probs = tta_mirror(model_eval, tile, cfg.mirror_axes)[0]   # (C, d, h, w)
            if prob_acc is None:
                prob_acc = torch.zeros((probs.shape[0],) + shape, dtype=torch.float32)
            prob_acc[(slice(None),) + sl] += probs * weights
            weight_acc[sl] += weights
    out = (prob_acc / weight_acc.clamp_min(1e-12)).numpy()
    out = out[:, : orig_shape[0], : orig_shape[1], : orig_shape[2]]
    return out


def predict_label(model, volume: Volume, cfg: InferenceConfig,
                  num_classes: int) -> SegLabel:
    probs = sliding_window_predict(model, volume, cfg)
    return SegLabel(np.argmax(probs, axis=0).astype(np.uint8), num_classes)
