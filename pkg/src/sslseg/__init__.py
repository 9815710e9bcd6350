"""Semi-supervised 3D segmentation toolkit: reconstruction pre-training,
consistency regularization, pseudo-labeling, sliding-window inference and a
segmentation metric suite."""

from .volumes import Case, Patch, SegLabel, Volume, generate_synthetic_case, load_case, save_case

__all__ = [
    "Case", "Patch", "SegLabel", "Volume",
    "generate_synthetic_case", "load_case", "save_case",
]
