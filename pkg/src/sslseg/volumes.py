"""3D volume data model, raw+JSON file IO, preprocessing and patch sampling.

Axis order is (depth, height, width) everywhere in this package.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class DataError(Exception):
    """Raised for malformed or inconsistent on-disk cases."""


@dataclass(frozen=True)
class Volume:
    """3D scalar intensity grid with voxel spacing metadata (mm)."""

    data: np.ndarray                       # (D, H, W) float32
    spacing: tuple[float, float, float]    # per-axis voxel size, mm
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"volume must be 3D with positive extents, got {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise DataError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class SegLabel:
    """3D class-index grid; index 0 is background."""

    data: np.ndarray      # (D, H, W) uint8
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")
        if self.data.min() < 0 or self.data.max() >= self.num_classes:
            raise DataError("label indices out of range [0, num_classes)")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Case:
    """One scan, optionally labeled. A present label means membership in the labeled set."""

    volume: Volume
    label: SegLabel | None
    id: str

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.volume.shape:
            raise DataError(
                f"case {self.id}: label shape {self.label.shape} != volume shape {self.volume.shape}"
            )

    @property
    def is_labeled(self) -> bool:
        return self.label is not None


@dataclass
class Patch:
    """Fixed-size crop; out-of-bounds regions are zero-padded."""

    data: np.ndarray                 # (D, H, W) float32, extent == patch_size
    label: np.ndarray | None         # (D, H, W) uint8 or None
    source_offset: tuple[int, int, int]
    pad_mask: np.ndarray | None = None   # True where padding was inserted


# ---------------------------------------------------------------------------
# File IO: raw little-endian voxels + JSON sidecar
# ---------------------------------------------------------------------------

def _write_raw(path: Path, arr: np.ndarray, spacing, extra: dict | None = None) -> None:
    arr = np.ascontiguousarray(arr)
    arr.astype(arr.dtype.newbyteorder("<")).tofile(path)
    sidecar = {
        "shape": list(arr.shape),
        "spacing": list(spacing),
        "dtype": "float32" if arr.dtype == np.float32 else "uint8",
    }
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def _read_raw(path: Path) -> tuple[np.ndarray, dict]:
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise DataError(f"missing file or sidecar for {path}")
    meta = json.loads(sidecar_path.read_text())
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    arr = np.fromfile(path, dtype=dtype).astype(meta["dtype"])
    expected = int(np.prod(meta["shape"]))
    if arr.size != expected:
        raise DataError(f"{path}: voxel count {arr.size} != sidecar shape product {expected}")
    return arr.reshape(meta["shape"]), meta


def save_case(case: Case, directory: str | os.PathLike) -> Path:
    """Write a case as <id>.vol.raw(+.json) and optionally <id>.seg.raw(+.json)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vol_path = directory / f"{case.id}.vol.raw"
    _write_raw(vol_path, case.volume.data.astype(np.float32), case.volume.spacing,
               {"origin": list(case.volume.origin)})
    if case.label is not None:
        _write_raw(directory / f"{case.id}.seg.raw", case.label.data.astype(np.uint8),
                   case.volume.spacing, {"num_classes": case.label.num_classes})
    return vol_path


def load_case(path: str | os.PathLike) -> Case:
    """Load a case from its volume file path (<id>.vol.raw). A sibling
    <id>.seg.raw makes the case labeled."""
    path = Path(path)
    vol_arr, vol_meta = _read_raw(path)
    spacing = tuple(float(s) for s in vol_meta["spacing"])
    if any(s <= 0 for s in spacing):
        raise DataError(f"{path}: non-positive spacing {spacing}")
    origin = tuple(vol_meta.get("origin", (0.0, 0.0, 0.0)))
    volume = Volume(vol_arr.astype(np.float32), spacing, origin)

    case_id = path.name[: -len(".vol.raw")]
    seg_path = path.parent / f"{case_id}.seg.raw"
    label = None
    if seg_path.exists():
        seg_arr, seg_meta = _read_raw(seg_path)
        label = SegLabel(seg_arr.astype(np.uint8), int(seg_meta["num_classes"]))
    return Case(volume=volume, label=label, id=case_id)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resample(v: Volume, target_spacing) -> Volume:
    """Trilinear resample to the target spacing.

    New extents are round(old_extent * old_spacing / target_spacing), min 1.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    new_shape = tuple(
        max(1, int(round(e * s / t)))
        for e, s, t in zip(v.shape, v.spacing, target_spacing)
    )
    if new_shape == v.shape and target_spacing == v.spacing:
        return Volume(v.data.copy(), target_spacing, v.origin)
    zoom = [n / o for n, o in zip(new_shape, v.shape)]
    data = ndimage.zoom(v.data.astype(np.float32), zoom, order=1, mode="nearest")
    assert data.shape == new_shape
    return Volume(data.astype(np.float32), target_spacing, v.origin)


def resample_label(lab: SegLabel, old_spacing, target_spacing) -> SegLabel:
    """Nearest-neighbor resample for class-index grids."""
    target_spacing = tuple(float(s) for s in target_spacing)
    new_shape = tuple(
        max(1, int(round(e * s / t)))
        for e, s, t in zip(lab.shape, old_spacing, target_spacing)
    )
    if new_shape == lab.shape:
        return SegLabel(lab.data.copy(), lab.num_classes)
    zoom = [n / o for n, o in zip(new_shape, lab.shape)]
    data = ndimage.zoom(lab.data, zoom, order=0, mode="nearest")
    assert data.shape == new_shape
    return SegLabel(data.astype(np.uint8), lab.num_classes)


def clip_normalize(v: Volume, p_low: float = 0.5, p_high: float = 99.5) -> Volume:
    """Clip to the [p_low, p_high] percentiles of this volume, then z-score."""
    if not (0 <= p_low < p_high <= 100):
        raise ValueError(f"bad percentiles ({p_low}, {p_high})")
    lo, hi = np.percentile(v.data, [p_low, p_high])
    data = np.clip(v.data, lo, hi)
    std = max(float(data.std()), 1e-8)
    data = (data - data.mean()) / std
    return Volume(data.astype(np.float32), v.spacing, v.origin)


def median_spacing(cases) -> tuple[float, float, float]:
    spacings = np.array([c.volume.spacing for c in cases])
    return tuple(float(s) for s in np.median(spacings, axis=0))


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def _crop_with_padding(arr: np.ndarray, offset, size, order_value=0):
    """Crop arr at offset (may be negative / overflow); pad out-of-bounds with zeros."""
    out = np.zeros(size, dtype=arr.dtype)
    pad = np.ones(size, dtype=bool)
    src_lo = [max(0, o) for o in offset]
    src_hi = [min(arr.shape[i], offset[i] + size[i]) for i in range(3)]
    dst_lo = [src_lo[i] - offset[i] for i in range(3)]
    dst_hi = [dst_lo[i] + (src_hi[i] - src_lo[i]) for i in range(3)]
    if all(src_hi[i] > src_lo[i] for i in range(3)):
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            arr[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
        pad[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = False
    return out, pad


def sample_patch(case: Case, patch_size, foreground_bias: float = 0.33,
                 rng: np.random.Generator | None = None,
                 include_label: bool = True) -> Patch:
    """Random crop of patch_size; with probability foreground_bias the crop is
    centered on a uniformly chosen foreground voxel (labeled cases only).
    include_label=False never touches label voxels (reconstruction training)."""
    rng = rng if rng is not None else np.random.default_rng()
    patch_size = tuple(int(p) for p in patch_size)
    shape = case.volume.shape

    offset = None
    if case.is_labeled and foreground_bias > 0 and rng.random() < foreground_bias:
        fg = np.argwhere(case.label.data > 0)
        if len(fg):   # zero-foreground cases silently fall back to uniform
            center = fg[rng.integers(len(fg))]
            offset = tuple(int(center[i]) - patch_size[i] // 2 for i in range(3))
    if offset is None:
        offset = tuple(
            int(rng.integers(0, max(shape[i] - patch_size[i], 0) + 1)) for i in range(3)
        )

    data, pad = _crop_with_padding(case.volume.data, offset, patch_size)
    label = None
    if include_label and case.is_labeled:
        label, _ = _crop_with_padding(case.label.data, offset, patch_size)
    return Patch(data=data, label=label, source_offset=offset, pad_mask=pad)


# ---------------------------------------------------------------------------
# Synthetic data: bright ellipsoids ("teeth") with dimmer nested cores ("pulp")
# over noisy background. Deterministic per seed; this is the desk-scale test
# substrate, not a CBCT simulator.
# ---------------------------------------------------------------------------

def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def generate_synthetic_case(seed: int, extent=(32, 32, 32), num_teeth: int = 3,
                            num_classes: int = 3, spacing=(1.0, 1.0, 1.0),
                            case_id: str | None = None,
                            noise_sigma: float = 0.0,
                            noise_scale: float = 0.0,
                            smooth_sigma: float = 0.0) -> Case:
    """Deterministic labeled toy case. Teeth take the lower foreground class
    indices, pulp cores the upper ones; pulp is strictly inside its tooth.
    noise_sigma adds global Gaussian intensity noise on top of the scene,
    lowering the contrast-to-noise ratio for harder variants. noise_scale > 0
    low-pass filters that noise to the given correlation length in voxels,
    turning it into a smooth bias-field-like inhomogeneity of the same
    amplitude. smooth_sigma > 0 low-pass filters the assembled scene itself,
    removing fine-grained texture so every structure varies smoothly in
    space."""
    extent = tuple(int(e) for e in extent)
    if min(extent) < 16:
        raise ValueError(f"extent must be >= 16 per axis, got {extent}")
    if num_classes < 3:
        raise ValueError(f"need >= 3 classes (background, tooth, pulp), got {num_classes}")
    rng = np.random.default_rng(seed)

    n_fg = num_classes - 1
    n_tooth_classes = max(1, (n_fg + 1) // 2)
    n_pulp_classes = n_fg - n_tooth_classes
    if n_pulp_classes == 0:
        n_tooth_classes, n_pulp_classes = 1, n_fg - 1

    data = rng.normal(-0.4, 0.15, size=extent).astype(np.float32)
    label = np.zeros(extent, dtype=np.uint8)
    occupied = np.zeros(extent, dtype=bool)

    placed = 0
    attempts = 0
    while placed < num_teeth and attempts < 50 * max(num_teeth, 1):
        attempts += 1
        radii = rng.uniform(0.12, 0.2, size=3) * np.array(extent)
        radii = np.maximum(radii, 2.5)
        center = [rng.uniform(r + 1, e - r - 1) if e > 2 * (r + 1) else e / 2
                  for r, e in zip(radii, extent)]
        tooth = _ellipsoid_mask(extent, center, radii)
        if (tooth & occupied).any():
            continue
        pulp = _ellipsoid_mask(extent, center, radii * 0.45)
        tooth_class = 1 + placed % n_tooth_classes
        pulp_class = 1 + n_tooth_classes + placed % n_pulp_classes
        data[tooth] = 1.2 + rng.normal(0, 0.05, size=int(tooth.sum()))
        data[pulp] = 0.3 + rng.normal(0, 0.05, size=int(pulp.sum()))
        label[tooth] = tooth_class
        label[pulp] = pulp_class
        occupied |= tooth
        placed += 1

    if smooth_sigma > 0:
        data = ndimage.gaussian_filter(data, smooth_sigma)

    if noise_sigma > 0:
        noise = rng.normal(0, 1.0, size=extent)
        if noise_scale > 0:
            noise = ndimage.gaussian_filter(noise, noise_scale)
            noise /= max(float(noise.std()), 1e-8)
        data = data + (noise_sigma * noise).astype(np.float32)

    cid = case_id if case_id is not None else f"synth{seed:05d}"
    case = Case(
        volume=Volume(data, tuple(float(s) for s in spacing)),
        label=SegLabel(label, num_classes),
        id=cid,
    )
    case.num_teeth_placed = placed
    return case
