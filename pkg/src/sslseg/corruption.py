"""Stage-1 self-supervised corruptions: additive Gaussian noise, resolution
degradation, and cube masking, plus the L1 reconstruction objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class CorruptionConfig:
    noise_sigma_range: tuple[float, float] = (0.0, 0.2)
    downsample_factor_range: tuple[float, float] = (1.0, 2.0)
    cube_size: tuple[int, int, int] = (4, 4, 4)
    mask_ratio: float = 0.3

    def __post_init__(self):
        if not (0 <= self.mask_ratio <= 0.5):
            raise ValueError("mask_ratio must lie in [0, 0.5]")
        if self.downsample_factor_range[0] < 1:
            raise ValueError("downsample factors must be >= 1")

    def validate_against_patch(self, patch_size) -> None:
        if not all(c < p for c, p in zip(self.cube_size, patch_size)):
            raise ValueError(f"cube size {self.cube_size} must be strictly smaller "
                             f"than patch size {tuple(patch_size)} on every axis")

    @classmethod
    def for_patch(cls, patch_size, **kw) -> "CorruptionConfig":
        cube = tuple(max(1, p // 8) for p in patch_size)
        return cls(cube_size=cube, **kw)


def add_noise(x: torch.Tensor, sigma: float, rng: np.random.Generator) -> torch.Tensor:
    """i.i.d. additive Gaussian noise per voxel; sigma = 0 is bit-exact identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x
    noise = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(x.shape)).astype(np.float32))
    return x + noise.to(x.dtype)


def degrade_resolution(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Trilinear downsample by `factor` then upsample back to the original
    extents; simulates low-resolution acquisition."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x
    orig_shape = tuple(x.shape)
    small = tuple(max(1, int(round(s / factor))) for s in orig_shape)
    v = x.unsqueeze(0).unsqueeze(0)
    v = F.interpolate(v, size=small, mode="trilinear", align_corners=False)
    v = F.interpolate(v, size=orig_shape, mode="trilinear", align_corners=False)
    return v.squeeze(0).squeeze(0)


def mask_cubes(x: torch.Tensor, cfg: CorruptionConfig,
               rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero out random axis-aligned cubes until at least mask_ratio of the
    voxels are masked; cubes may overlap. Returns (masked patch, mask)."""
    shape = tuple(x.shape)
    mask = torch.zeros(shape, dtype=torch.bool)
    total = int(np.prod(shape))
    target = cfg.mask_ratio * total
    while mask.sum().item() < target:
        offset = [int(rng.integers(0, shape[i] - cfg.cube_size[i] + 1)) for i in range(3)]
        sl = tuple(slice(offset[i], offset[i] + cfg.cube_size[i]) for i in range(3))
        mask[sl] = True
    out = x.clone()
    out[mask] = 0.0
    return out, mask


def corrupt(x: torch.Tensor, cfg: CorruptionConfig,
            rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Full corruption chain: noise, then resolution degradation, then cube
    masking (so masked voxels end exactly zero)."""
    sigma = float(rng.uniform(*cfg.noise_sigma_range))
    factor = float(rng.uniform(*cfg.downsample_factor_range))
    out = add_noise(x, sigma, rng)
    out = degrade_resolution(out, factor)
    return mask_cubes(out, cfg, rng)


def dae_loss(reconstruction: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error over all voxels."""
    if reconstruction.shape != original.shape:
        raise ValueError(f"shape mismatch {tuple(reconstruction.shape)} vs "
                         f"{tuple(original.shape)}")
    return (reconstruction - original).abs().mean()
