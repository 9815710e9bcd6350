"""Input-space perturbations for unlabeled consistency branches (strictly
non-spatial: a voxel's output depends only on a local neighborhood of the same
voxel), feature-space perturbations applied before skip connections, and the
standard labeled-data augmentation pipeline (which does move voxels, applied
identically to data and label)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

FEATURE_MODES = ("spatial_dropout", "activation_dropout", "noise_injection", "random_per_map")
# "none" additionally accepted in configs to disable feature perturbation entirely


@dataclass
class PerturbationConfig:
    # per-transform application probability; 0 disables a transform
    p_median: float = 0.5
    p_blur: float = 0.5
    p_noise: float = 0.5
    p_brightness: float = 0.5
    p_contrast: float = 0.5
    p_lowres: float = 0.5
    p_sharpen: float = 0.5
    median_kernel: int = 3
    blur_sigma_range: tuple[float, float] = (0.5, 1.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    brightness_range: tuple[float, float] = (0.75, 1.25)
    contrast_range: tuple[float, float] = (0.75, 1.25)
    lowres_factor_range: tuple[float, float] = (1.0, 2.0)
    sharpen_range: tuple[float, float] = (0.5, 1.5)
    feature_mode: str = "random_per_map"
    channel_dropout_p: float = 0.5

    def __post_init__(self):
        probs = [self.p_median, self.p_blur, self.p_noise, self.p_brightness,
                 self.p_contrast, self.p_lowres, self.p_sharpen]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("transform probabilities must lie in [0, 1]")
        if self.median_kernel % 2 == 0:
            raise ValueError("median kernel must be odd")
        if self.feature_mode not in FEATURE_MODES + ("none",):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")

    @classmethod
    def identity(cls, **kw) -> "PerturbationConfig":
        zeros = {k: 0.0 for k in ("p_median", "p_blur", "p_noise", "p_brightness",
                                  "p_contrast", "p_lowres", "p_sharpen")}
        zeros.update(kw)
        return cls(**zeros)


# ---------------------------------------------------------------------------
# Input perturbations (intensity only, never spatial)
# ---------------------------------------------------------------------------

def _lowres(x: np.ndarray, factor: float) -> np.ndarray:
    small = tuple(max(1, int(round(s / factor))) for s in x.shape)
    down = ndimage.zoom(x, [s / o for s, o in zip(small, x.shape)], order=1, mode="nearest")
    return ndimage.zoom(down, [o / s for s, o in zip(small, x.shape)], order=1,
                        mode="nearest", grid_mode=False)[: x.shape[0], : x.shape[1], : x.shape[2]]


def perturb_input(x: np.ndarray, cfg: PerturbationConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Apply a random subset of the seven intensity transforms. Spatial
    transforms are deliberately absent so voxel-to-label correspondence is
    preserved by construction."""
    out = x.astype(np.float32, copy=True)
    if rng.random() < cfg.p_median:
        out = ndimage.median_filter(out, size=cfg.median_kernel, mode="nearest")
    if rng.random() < cfg.p_blur:
        out = ndimage.gaussian_filter(out, sigma=float(rng.uniform(*cfg.blur_sigma_range)),
                                      mode="nearest")
    if rng.random() < cfg.p_noise:
        out = out + rng.normal(0, float(rng.uniform(*cfg.noise_sigma_range)),
                               size=out.shape).astype(np.float32)
    if rng.random() < cfg.p_brightness:
        out = out * float(rng.uniform(*cfg.brightness_range))
    if rng.random() < cfg.p_contrast:
        mean = out.mean()
        out = (out - mean) * float(rng.uniform(*cfg.contrast_range)) + mean
    if rng.random() < cfg.p_lowres:
        factor = float(rng.uniform(*cfg.lowres_factor_range))
        if factor > 1:
            lr = _lowres(out, factor)
            out = lr if lr.shape == out.shape else out
    if rng.random() < cfg.p_sharpen:
        blurred = ndimage.gaussian_filter(out, sigma=1.0, mode="nearest")
        out = out + float(rng.uniform(*cfg.sharpen_range)) * (out - blurred)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Feature perturbations (torch, applied mid-graph)
# ---------------------------------------------------------------------------

def spatial_dropout(z: torch.Tensor, p: float = 0.5,
                    rng: np.random.Generator | None = None) -> torch.Tensor:
    """Channel-wise dropout: each channel zeroed independently with probability
    p; survivors rescaled by 1/(1-p). z: (B, F, d, h, w)."""
    if not 0 <= p < 1:
        raise ValueError("p must lie in [0, 1)")
    if p == 0:
        return z
    rng = rng if rng is not None else np.random.default_rng()
    keep = torch.from_numpy((rng.random((z.shape[0], z.shape[1])) >= p)
                            .astype(np.float32)).to(z.dtype)
    return z * keep.view(z.shape[0], z.shape[1], 1, 1, 1) / (1.0 - p)


def activation_dropout(z: torch.Tensor,
                       rng: np.random.Generator | None = None,
                       gamma: float | None = None) -> torch.Tensor:
    """Zero every activation strictly above a per-sample quantile drawn from
    U(0.7, 0.9) (overridable via `gamma`), i.e. drop the top 10-30%."""
    rng = rng if rng is not None else np.random.default_rng()
    out = z.clone()
    for b in range(z.shape[0]):
        g = gamma if gamma is not None else float(rng.uniform(0.7, 0.9))
        threshold = torch.quantile(z[b].detach().float().reshape(-1), g)
        out[b] = torch.where(z[b] > threshold, torch.zeros_like(z[b]), z[b])
    return out


def inject_noise(z: torch.Tensor,
                 rng: np.random.Generator | None = None) -> torch.Tensor:
    """Multiplicative uniform noise: z * (1 + U(-0.3, 0.3)) element-wise, so
    the perturbation magnitude stays proportional to the activation."""
    rng = rng if rng is not None else np.random.default_rng()
    noise = torch.from_numpy(rng.uniform(-0.3, 0.3, size=tuple(z.shape))
                             .astype(np.float32)).to(z.dtype)
    return z + z * noise


def perturb_features(features: list[torch.Tensor], cfg: PerturbationConfig,
                     rng: np.random.Generator) -> list[torch.Tensor]:
    """Perturb every encoder map feeding a skip connection plus the bottleneck
    map, one perturbation per map chosen per cfg.feature_mode."""
    if cfg.feature_mode == "none":
        return list(features)
    out = []
    for z in features:
        mode = cfg.feature_mode
        if mode == "random_per_map":
            mode = FEATURE_MODES[rng.integers(3)]
        if mode == "spatial_dropout":
            out.append(spatial_dropout(z, cfg.channel_dropout_p, rng))
        elif mode == "activation_dropout":
            out.append(activation_dropout(z, rng))
        else:
            out.append(inject_noise(z, rng))
    return out


# ---------------------------------------------------------------------------
# Labeled-data augmentation (spatial + intensity, label-consistent)
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    p_rotate: float = 0.3
    p_scale: float = 0.3
    p_mirror: float = 0.5
    p_noise: float = 0.2
    p_blur: float = 0.2
    p_brightness: float = 0.2
    p_contrast: float = 0.2
    p_lowres: float = 0.2
    rotate_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(p_rotate=0, p_scale=0, p_mirror=0, p_noise=0, p_blur=0,
                   p_brightness=0, p_contrast=0, p_lowres=0)


def _scale_keep_shape(arr: np.ndarray, factor: float, order: int) -> np.ndarray:
    zoomed = ndimage.zoom(arr, factor, order=order, mode="nearest")
    out = np.zeros_like(arr)
    src_lo = [max(0, (z - s) // 2) for z, s in zip(zoomed.shape, arr.shape)]
    dst_lo = [max(0, (s - z) // 2) for z, s in zip(zoomed.shape, arr.shape)]
    span = [min(z, s) for z, s in zip(zoomed.shape, arr.shape)]
    out[dst_lo[0]:dst_lo[0]+span[0], dst_lo[1]:dst_lo[1]+span[1], dst_lo[2]:dst_lo[2]+span[2]] = \
        zoomed[src_lo[0]:src_lo[0]+span[0], src_lo[1]:src_lo[1]+span[1], src_lo[2]:src_lo[2]+span[2]]
    return out


def augment_labeled(data: np.ndarray, label: np.ndarray,
                    cfg: AugmentConfig, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Spatial transforms applied identically to data (linear) and label
    (nearest neighbor); intensity transforms to data only."""
    data = data.astype(np.float32, copy=True)
    label = label.copy()

    if rng.random() < cfg.p_rotate:
        angle = float(rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg))
        axes = tuple(rng.choice(3, size=2, replace=False))
        data = ndimage.rotate(data, angle, axes=axes, reshape=False, order=1, mode="nearest")
        label = ndimage.rotate(label, angle, axes=axes, reshape=False, order=0, mode="nearest")
    if rng.random() < cfg.p_scale:
        factor = float(rng.uniform(*cfg.scale_range))
        data = _scale_keep_shape(data, factor, order=1)
        label = _scale_keep_shape(label, factor, order=0)
    if rng.random() < cfg.p_mirror:
        axis = int(rng.integers(3))
        data = np.flip(data, axis=axis).copy()
        label = np.flip(label, axis=axis).copy()

    if rng.random() < cfg.p_noise:
        data = data + rng.normal(0, 0.1, size=data.shape).astype(np.float32)
    if rng.random() < cfg.p_blur:
        data = ndimage.gaussian_filter(data, sigma=float(rng.uniform(0.5, 1.0)), mode="nearest")
    if rng.random() < cfg.p_brightness:
        data = data * float(rng.uniform(0.75, 1.25))
    if rng.random() < cfg.p_contrast:
        mean = data.mean()
        data = (data - mean) * float(rng.uniform(0.75, 1.25)) + mean
    if rng.random() < cfg.p_lowres:
        factor = float(rng.uniform(1.0, 2.0))
        if factor > 1:
            lr = _lowres(data, factor)
            data = lr if lr.shape == data.shape else data
    return data.astype(np.float32), label
