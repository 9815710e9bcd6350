"""Configurable 3D U-Net with a bidirectional selective state-space scan at the
bottleneck, exposing per-stage encoder feature maps for skip-connection
perturbation. Supports a segmentation head or a single-channel reconstruction
head; heads can be swapped while keeping the trunk bit-identical."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn


@dataclass
class ModelConfig:
    num_stages: int = 4
    base_channels: int = 8
    channel_growth: float = 2.0
    patch_size: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 4
    bottleneck_state_dim: int = 8
    head: str = "segmentation"   # or "reconstruction"

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError("need at least 2 stages")
        div = 2 ** (self.num_stages - 1)
        if any(p % div for p in self.patch_size):
            raise ValueError(
                f"patch size {self.patch_size} not divisible by 2^{self.num_stages - 1}"
            )
        if self.head not in ("segmentation", "reconstruction"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def stage_channels(self) -> list[int]:
        return [int(round(self.base_channels * self.channel_growth ** s))
                for s in range(self.num_stages)]

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.head == "segmentation" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch_size"] = tuple(d["patch_size"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Selective scalar-decay state-space scan
# ---------------------------------------------------------------------------

def ssd_scan(x: torch.Tensor, a: torch.Tensor, b: torch.Tensor,
             c: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Linear-time scan h_t = a_t h_{t-1} + b_t (x) x_t, y_t = c_t . h_t + d * x_t.

    x: (L, F); a: (L,) decay in (0,1); b, c: (L, N); d: (F,).
    The hidden state is the rank-accumulating (N, F) matrix of outer products.
    """
    L, feat = x.shape
    state_dim = b.shape[1]
    h = x.new_zeros(state_dim, feat)
    outputs = []
    for t in range(L):
        h = a[t] * h + b[t].unsqueeze(1) * x[t].unsqueeze(0)
        outputs.append(c[t] @ h + d * x[t])
    return torch.stack(outputs)


def ssd_materialize(x: torch.Tensor, a: torch.Tensor, b: torch.Tensor,
                    c: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Quadratic-time oracle: build the L x L lower-triangular semiseparable
    operator explicitly and apply it. Matches ssd_scan for any parameters."""
    L = x.shape[0]
    mat = x.new_zeros(L, L)
    for t in range(L):
        decay = x.new_tensor(1.0)
        for s in range(t, -1, -1):
            if s < t:
                decay = decay * a[s + 1]
            mat[t, s] = (c[t] * b[s]).sum() * decay
    return mat @ x + d * x


class SSMBlock(nn.Module):
    """Bidirectional selective scan over the flattened (raster-order) deepest
    feature map, residual-added back."""

    def __init__(self, channels: int, state_dim: int):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        self.norm = nn.LayerNorm(channels)
        # per direction: input-dependent decay gate, input and output projections
        self.a_proj = nn.ModuleList([nn.Linear(channels, 1) for _ in range(2)])
        self.b_proj = nn.ModuleList([nn.Linear(channels, state_dim) for _ in range(2)])
        self.c_proj = nn.ModuleList([nn.Linear(channels, state_dim) for _ in range(2)])
        self.d = nn.Parameter(torch.ones(channels))
        self.out_proj = nn.Linear(channels, channels)

    def mix_sequence(self, seq: torch.Tensor) -> torch.Tensor:
        """seq: (L, F) -> (L, F); forward and reversed scans summed."""
        mixed = seq.new_zeros(seq.shape)
        for direction in range(2):
            s = seq if direction == 0 else seq.flip(0)
            a = torch.sigmoid(self.a_proj[direction](s)).squeeze(-1)
            b = self.b_proj[direction](s)
            c = self.c_proj[direction](s)
            y = ssd_scan(s, a, b, c, self.d)
            mixed = mixed + (y if direction == 0 else y.flip(0))
        return mixed

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z: (B, F, d, h, w)."""
        batch, channels, *spatial = z.shape
        seq = z.reshape(batch, channels, -1).permute(0, 2, 1)   # (B, L, F)
        out = torch.stack([
            self.out_proj(self.mix_sequence(self.norm(seq[i]))) for i in range(batch)
        ])
        return z + out.permute(0, 2, 1).reshape(z.shape)


# ---------------------------------------------------------------------------
# U-Net trunk
# ---------------------------------------------------------------------------

def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(out_ch, out_ch, 3, padding=1),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class SegmentationModel(nn.Module):
    """Encoder-decoder with strided-conv downsampling, transposed-conv
    upsampling, channel-concat skips and an SSM-mixed bottleneck."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = config.stage_channels

        self.enc_blocks = nn.ModuleList()
        self.down = nn.ModuleList()
        for s in range(config.num_stages):
            in_ch = 1 if s == 0 else chans[s - 1]
            if s > 0:
                self.down.append(nn.Conv3d(in_ch, in_ch, 2, stride=2))
            self.enc_blocks.append(_conv_block(in_ch if s == 0 else in_ch, chans[s]))

        self.bottleneck = SSMBlock(chans[-1], config.bottleneck_state_dim)

        self.up = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for s in range(config.num_stages - 2, -1, -1):
            self.up.append(nn.ConvTranspose3d(chans[s + 1], chans[s], 2, stride=2))
            self.dec_blocks.append(_conv_block(2 * chans[s], chans[s]))

        self.head = nn.Conv3d(chans[0], config.out_channels, 1)

    # -- forward pieces ----------------------------------------------------

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (B, 1, D, H, W) -> per-stage features shallow->deep; the deepest
        map has already passed through the bottleneck mixer."""
        if tuple(x.shape[-3:]) != tuple(self.config.patch_size):
            raise ValueError(
                f"input spatial shape {tuple(x.shape[-3:])} != configured "
                f"patch size {self.config.patch_size}"
            )
        feats = []
        for s in range(self.config.num_stages):
            if s > 0:
                x = self.down[s - 1](x)
            x = self.enc_blocks[s](x)
            feats.append(x)
        feats[-1] = self.bottleneck(feats[-1])
        return feats

    def decode(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for i, s in enumerate(range(self.config.num_stages - 2, -1, -1)):
            x = self.up[i](x)
            x = self.dec_blocks[i](torch.cat([x, feats[s]], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def build_model(config: ModelConfig, seed: int | None = None) -> SegmentationModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SegmentationModel(config)


def convert_head(model: SegmentationModel, new_head: str,
                 num_classes: int | None = None, seed: int = 0) -> SegmentationModel:
    """Copy the trunk bit-exact and re-initialize only the final head layer."""
    cfg = copy.deepcopy(model.config)
    cfg.head = new_head
    if num_classes is not None:
        cfg.num_classes = num_classes
    torch.manual_seed(seed)
    new_model = SegmentationModel(cfg)
    trunk = {k: v for k, v in model.state_dict().items() if not k.startswith("head.")}
    missing = new_model.load_state_dict(trunk, strict=False)
    assert all(k.startswith("head.") for k in missing.missing_keys)
    return new_model
