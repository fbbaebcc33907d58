"""Feature pyramid extractor: grayscale image -> coarse (1/8) and fine (1/2)
dense feature maps.

Encoder: three stride-2 stages of conv -> batch-norm -> GELU blocks.
Decoder: two-level top-down path with 1x1 laterals and bilinear upsampling.
Plain conv heads emit the output maps so feature values are unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .validation import COARSE_STRIDE, FINE_STRIDE, as_image


@dataclass
class FeaturePyramid:
    """Channels-last feature maps; coarse is (H/8, W/8, Dc), fine (H/2, W/2, Df)."""

    coarse: torch.Tensor
    fine: torch.Tensor
    strides: dict = None

    def __post_init__(self):
        if self.strides is None:
            self.strides = {"coarse": COARSE_STRIDE, "fine": FINE_STRIDE}

    @property
    def coarse_grid(self) -> tuple[int, int]:
        return self.coarse.shape[0], self.coarse.shape[1]

    @property
    def fine_grid(self) -> tuple[int, int]:
        return self.fine.shape[0], self.fine.shape[1]

    def coarse_flat(self) -> torch.Tensor:
        return self.coarse.reshape(-1, self.coarse.shape[-1])


class ConvBlock(nn.Module):
    """conv3x3 -> batch norm -> GELU (tanh approximation).

    The batch-norm statistics are frozen at their initial values (mean 0,
    var 1) and only the affine terms train. With one image per step and
    per-image photometric jitter, batch statistics diverge wildly from any
    running average, which would make eval features inconsistent with the
    features the losses were trained on; pinning the statistics keeps the
    two passes identical and keeps eval strictly local."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(cout)
        self.norm.eval()
        self.act = nn.GELU(approximate="tanh")

    def train(self, mode: bool = True):
        super().train(mode)
        self.norm.eval()  # statistics stay frozen in both modes
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class FeaturePyramidExtractor(nn.Module):
    """Three encoder stages (strides 2, 2, 2) plus a two-level FPN decoder.

    ``widths`` are the per-stage channel counts; the last entry is the
    coarse output width and ``fine_dim`` the fine output width.
    """

    def __init__(self, widths: tuple[int, int, int] = (32, 64, 128), fine_dim: int = 64):
        super().__init__()
        if len(widths) != 3 or any(w <= 0 for w in widths) or fine_dim <= 0:
            raise ShapeError(f"need three positive stage widths, got {widths}/{fine_dim}")
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.fine_dim = fine_dim
        self.stem = ConvBlock(1, w1, stride=2)
        self.enc1b = ConvBlock(w1, w1)
        self.down2 = ConvBlock(w1, w2, stride=2)
        self.enc2b = ConvBlock(w2, w2)
        self.down3 = ConvBlock(w2, w3, stride=2)
        self.enc3b = ConvBlock(w3, w3)
        self.coarse_head = nn.Conv2d(w3, w3, 3, padding=1)
        self.top2 = nn.Conv2d(w3, w2, 1)
        self.lat2 = nn.Conv2d(w2, w2, 1)
        self.smooth2 = ConvBlock(w2, w2)
        self.top1 = nn.Conv2d(w2, w1, 1)
        self.lat1 = nn.Conv2d(w1, w1, 1)
        self.smooth1 = ConvBlock(w1, w1)
        self.fine_head = nn.Conv2d(w1, fine_dim, 3, padding=1)

    @property
    def coarse_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f2 = self.enc1b(self.stem(x))
        f4 = self.enc2b(self.down2(f2))
        f8 = self.enc3b(self.down3(f4))
        coarse = self.coarse_head(f8)
        up4 = nn.functional.interpolate(f8, scale_factor=2, mode="bilinear", align_corners=False)
        m4 = self.smooth2(self.lat2(f4) + self.top2(up4))
        up2 = nn.functional.interpolate(m4, scale_factor=2, mode="bilinear", align_corners=False)
        m2 = self.smooth1(self.lat1(f2) + self.top1(up2))
        fine = self.fine_head(m2)
        return coarse, fine


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically re-initialize every parameter of ``module``.

    Weight tensors get fan-in-scaled normal draws from a private generator
    (He scaling for convs, 1/sqrt(fan_in) for dense layers); biases and
    normalization offsets are zeroed, normalization gains set to one.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() == 4:  # conv kernels
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            elif p.dim() >= 2:  # dense / embedding weights
                fan_in = p.shape[-1]
                p.normal_(0.0, (1.0 / fan_in) ** 0.5, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:  # normalization gains
                p.fill_(1.0)
        for m in module.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
    return module


def init_backbone(
    seed: int, widths: tuple[int, int, int] = (32, 64, 128), fine_dim: int = 64
) -> FeaturePyramidExtractor:
    """Build a backbone with deterministic fan-in-scaled initialization."""
    return init_parameters(FeaturePyramidExtractor(widths, fine_dim), seed)


def extract_pyramid(
    img, params: FeaturePyramidExtractor, mode: str = "eval"
) -> FeaturePyramid:
    """Run the backbone on one grayscale image.

    ``mode='eval'`` freezes batch-norm statistics, ``'train'`` uses (and
    updates) batch statistics. The image must have dims divisible by 8.
    """
    if isinstance(img, torch.Tensor):
        arr = img
    else:
        arr = torch.from_numpy(np.ascontiguousarray(as_image(img)))
    if arr.dim() != 2:
        raise ShapeError(f"expected a 2D image, got shape {tuple(arr.shape)}")
    h, w = arr.shape
    if h % COARSE_STRIDE or w % COARSE_STRIDE:
        raise ShapeError(f"image dims ({h}, {w}) must be divisible by {COARSE_STRIDE}")
    if mode not in ("train", "eval"):
        raise ShapeError(f"mode must be 'train' or 'eval', got {mode!r}")
    params.train(mode == "train")
    dtype = next(params.parameters()).dtype
    x = arr.to(dtype).unsqueeze(0).unsqueeze(0)
    ctx = torch.enable_grad() if mode == "train" else torch.no_grad()
    with ctx:
        coarse, fine = params(x)
    return FeaturePyramid(
        coarse=coarse[0].permute(1, 2, 0), fine=fine[0].permute(1, 2, 0)
    )


def parameter_count(widths: tuple[int, int, int], fine_dim: int) -> int:
    """Closed-form parameter count of :class:`FeaturePyramidExtractor`."""

    def block(cin, cout):  # conv (no bias) + BN affine
        return 9 * cin * cout + 2 * cout

    def conv1x1(cin, cout):
        return cin * cout + cout

    def conv3x3(cin, cout):
        return 9 * cin * cout + cout

    w1, w2, w3 = widths
    return (
        block(1, w1)
        + block(w1, w1)
        + block(w1, w2)
        + block(w2, w2)
        + block(w2, w3)
        + block(w3, w3)
        + conv3x3(w3, w3)
        + conv1x1(w3, w2)
        + conv1x1(w2, w2)
        + block(w2, w2)
        + conv1x1(w2, w1)
        + conv1x1(w1, w1)
        + block(w1, w1)
        + conv3x3(w1, fine_dim)
    )
