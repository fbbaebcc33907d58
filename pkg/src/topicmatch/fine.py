"""Fine-level dynamic refinement.

Each coarse match is upscaled onto the 1/2-resolution map, a w x w patch
is cropped around it in both images, two shared MLP-Mixer blocks
transform the patches, a mixer-based detector scores the first patch,
and soft-argmax expectations produce subpixel keypoints: the detected
keypoint in A and its similarity-weighted counterpart in B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .coarse import CoarseMatchSet
from .counting import CountedLinear, counted_matmul
from .errors import AllMasked, ShapeError

UPSCALE = 4  # coarse grid index -> fine grid index (stride 8 -> stride 2)


def grid_map(window: int, dtype=torch.float64) -> torch.Tensor:
    """(w*w, 2) patch-cell coordinates (x, y) relative to the patch origin,
    enumerated row-major."""
    n = torch.arange(window * window)
    return torch.stack([(n % window).to(dtype), (n // window).to(dtype)], dim=1)


@dataclass
class PatchPair:
    """One cropped patch pair, flattened row-major to (w*w, D)."""

    patch_a: torch.Tensor
    patch_b: torch.Tensor
    mask_a: torch.Tensor
    mask_b: torch.Tensor
    center_a: tuple[int, int]
    center_b: tuple[int, int]


@dataclass
class PatchPairBatch:
    patch_a: torch.Tensor  # (M, w*w, D)
    patch_b: torch.Tensor
    mask_a: torch.Tensor  # (M, w*w) bool
    mask_b: torch.Tensor
    centers_a: np.ndarray  # (M, 2) fine-grid (x, y)
    centers_b: np.ndarray
    window: int

    def __len__(self) -> int:
        return self.patch_a.shape[0]

    def __getitem__(self, i: int) -> PatchPair:
        return PatchPair(
            self.patch_a[i],
            self.patch_b[i],
            self.mask_a[i],
            self.mask_b[i],
            tuple(self.centers_a[i]),
            tuple(self.centers_b[i]),
        )


def crop_one_map(
    fine_map: torch.Tensor, centers: np.ndarray, window: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather w x w windows centered at fine-grid (x, y) coordinates.

    Out-of-bounds cells are zero-filled and masked invalid."""
    if window % 2 == 0 or window < 1:
        raise ShapeError(f"window must be odd and positive, got {window}")
    rows, cols, dim = fine_map.shape
    half = window // 2
    offsets = np.arange(-half, half + 1)
    ox, oy = np.meshgrid(offsets, offsets)  # row-major over (dy, dx)
    cell_x = centers[:, 0][:, None] + ox.ravel()[None, :]
    cell_y = centers[:, 1][:, None] + oy.ravel()[None, :]
    valid = (cell_x >= 0) & (cell_x < cols) & (cell_y >= 0) & (cell_y < rows)
    flat = np.clip(cell_y, 0, rows - 1) * cols + np.clip(cell_x, 0, cols - 1)
    gathered = fine_map.reshape(-1, dim)[torch.from_numpy(flat.ravel()).long()]
    patches = gathered.reshape(len(centers), window * window, dim)
    mask = torch.from_numpy(valid)
    patches = patches * mask.unsqueeze(-1).to(patches.dtype)
    return patches, mask


def crop_patches(
    fine_a: torch.Tensor,
    fine_b: torch.Tensor,
    matches: CoarseMatchSet,
    coarse_grid_a: tuple[int, int],
    coarse_grid_b: tuple[int, int],
    window: int = 5,
) -> PatchPairBatch:
    """Crop patch pairs around upscaled coarse-match coordinates."""
    rows_a, cols_a = coarse_grid_a
    rows_b, cols_b = coarse_grid_b
    ia = matches.indices_a
    ib = matches.indices_b
    centers_a = np.stack([(ia % cols_a) * UPSCALE, (ia // cols_a) * UPSCALE], axis=1)
    centers_b = np.stack([(ib % cols_b) * UPSCALE, (ib // cols_b) * UPSCALE], axis=1)
    if len(matches) == 0:
        d = fine_a.shape[-1]
        empty = fine_a.new_zeros((0, window * window, d))
        no_mask = torch.zeros((0, window * window), dtype=torch.bool)
        return PatchPairBatch(empty, empty.clone(), no_mask, no_mask.clone(),
                              centers_a, centers_b, window)
    pa, ma = crop_one_map(fine_a, centers_a, window)
    pb, mb = crop_one_map(fine_b, centers_b, window)
    return PatchPairBatch(pa, pb, ma, mb, centers_a, centers_b, window)


class TokenChannelMixer(nn.Module):
    """MLP-Mixer block: token-mixing then channel-mixing, both pre-norm
    residual two-layer perceptrons."""

    def __init__(self, tokens: int, dim: int, hidden_mult: int = 2):
        super().__init__()
        self.tokens = tokens
        self.norm_tok = nn.LayerNorm(dim)
        self.tok_in = CountedLinear(tokens, tokens * hidden_mult)
        self.tok_out = CountedLinear(tokens * hidden_mult, tokens)
        self.norm_ch = nn.LayerNorm(dim)
        self.ch_in = CountedLinear(dim, dim * hidden_mult)
        self.ch_out = CountedLinear(dim * hidden_mult, dim)
        self.act = nn.GELU(approximate="tanh")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.tokens:
            raise ShapeError(f"expected {self.tokens} tokens, got {x.shape[-2]}")
        y = self.norm_tok(x).transpose(-1, -2)
        y = self.tok_out(self.act(self.tok_in(y))).transpose(-1, -2)
        x = x + y
        return x + self.ch_out(self.act(self.ch_in(self.norm_ch(x))))


@dataclass
class ScoreHeat:
    """Raw detector scores and their tempered softmax heatmap."""

    score: torch.Tensor
    heat: torch.Tensor
    temperature: float


def heat_from_scores(
    scores: torch.Tensor, mask: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Masked softmax(scores / temperature); masked cells get zero heat."""
    if temperature <= 0:
        raise ShapeError(f"temperature must be positive, got {temperature}")
    if (~mask).all(dim=-1).any():
        raise AllMasked("a patch has no valid cells")
    filled = scores / temperature
    filled = filled.masked_fill(~mask, float("-inf"))
    return torch.softmax(filled, dim=-1)


def expectation_over_heat(
    heat: torch.Tensor, grid: torch.Tensor, patch: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Heat-weighted expectations of grid coordinates and patch features."""
    coords = counted_matmul(heat.unsqueeze(-2), grid.to(heat.dtype)).squeeze(-2)
    desc = counted_matmul(heat.unsqueeze(-2), patch).squeeze(-2)
    return coords, desc


class FineRefiner(nn.Module):
    """Shared patch transform plus the keypoint detector head."""

    def __init__(self, dim: int, window: int = 5, hidden_mult: int = 2,
                 heat_temperature: float = 0.1):
        super().__init__()
        if window % 2 == 0:
            raise ShapeError("patch window must be odd")
        tokens = window * window
        self.window = window
        self.heat_temperature = heat_temperature
        self.shared = nn.Sequential(
            TokenChannelMixer(tokens, dim, hidden_mult),
            TokenChannelMixer(tokens, dim, hidden_mult),
        )
        # bounds the transformed feature scale so downstream similarity
        # and score softmaxes keep usable gradients as the backbone's
        # feature norms grow during training
        self.norm_out = nn.LayerNorm(dim)
        self.detector_mixers = nn.Sequential(
            TokenChannelMixer(tokens, dim, hidden_mult),
            TokenChannelMixer(tokens, dim, hidden_mult),
        )
        self.detector_head = CountedLinear(dim, 1)

    def transform(self, patches: torch.Tensor) -> torch.Tensor:
        return self.norm_out(self.shared(patches))

    def score_map(self, patches: torch.Tensor) -> torch.Tensor:
        return self.detector_head(self.detector_mixers(patches)).squeeze(-1)

    def detect_keypoint(
        self, patch: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, ScoreHeat]:
        """Score an (already transformed) A-patch and take expectations.

        Returns local (x, y) coordinates, the expected descriptor, and the
        score/heat pair. Accepts a single patch or a batch."""
        squeeze = patch.dim() == 2
        if squeeze:
            patch = patch.unsqueeze(0)
            mask = mask.unsqueeze(0)
        scores = self.score_map(patch)
        heat = heat_from_scores(scores, mask, self.heat_temperature)
        grid = grid_map(self.window, dtype=patch.dtype)
        coords, desc = expectation_over_heat(heat, grid, patch)
        sh = ScoreHeat(score=scores, heat=heat, temperature=self.heat_temperature)
        if squeeze:
            return coords[0], desc[0], ScoreHeat(scores[0], heat[0], sh.temperature)
        return coords, desc, sh


def match_in_patch(
    desc_a: torch.Tensor, patch_b: torch.Tensor, mask_b: torch.Tensor, window: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Similarity heatmap of desc_a against a transformed B-patch, then
    expectations. Returns local (x, y), descriptor, and peak confidence."""
    squeeze = patch_b.dim() == 2
    if squeeze:
        desc_a = desc_a.unsqueeze(0)
        patch_b = patch_b.unsqueeze(0)
        mask_b = mask_b.unsqueeze(0)
    # 1/sqrt(D) keeps similarity logits width-independent; without it the
    # softmax saturates for any learned feature scale and stops training
    scale = float(patch_b.shape[-1]) ** -0.5
    logits = counted_matmul(patch_b, desc_a.unsqueeze(-1)).squeeze(-1) * scale
    if (~mask_b).all(dim=-1).any():
        raise AllMasked("a patch has no valid cells")
    heat = torch.softmax(logits.masked_fill(~mask_b, float("-inf")), dim=-1)
    grid = grid_map(window, dtype=patch_b.dtype)
    coords, desc = expectation_over_heat(heat, grid, patch_b)
    conf = heat.max(dim=-1).values
    if squeeze:
        return coords[0], desc[0], conf[0]
    return coords, desc, conf


@dataclass
class FineMatchSet:
    """Subpixel matches in original-image pixel coordinates."""

    xy_a: torch.Tensor  # (M, 2)
    xy_b: torch.Tensor
    desc_a: torch.Tensor
    desc_b: torch.Tensor
    confidence: torch.Tensor  # (M,) peak B-side heat
    source_a: np.ndarray  # originating coarse flat indices
    source_b: np.ndarray
    n_dropped: int = 0

    def __len__(self) -> int:
        return self.xy_a.shape[0]

    def to_numpy(self) -> np.ndarray:
        """(M, 5) array of xa, ya, xb, yb, confidence."""
        return np.concatenate(
            [
                self.xy_a.detach().cpu().numpy(),
                self.xy_b.detach().cpu().numpy(),
                self.confidence.detach().cpu().numpy()[:, None],
            ],
            axis=1,
        )


def refine_matches(
    pyr_a,
    pyr_b,
    coarse_matches: CoarseMatchSet,
    refiner: FineRefiner,
    fine_stride: int = 2,
) -> FineMatchSet:
    """Full fine stage: crop, shared mixers, detect in A, match in B, and
    map local coordinates to original-image pixels."""
    window = refiner.window
    batch = crop_patches(
        pyr_a.fine, pyr_b.fine, coarse_matches, pyr_a.coarse_grid, pyr_b.coarse_grid, window
    )
    m = len(batch)
    dim = pyr_a.fine.shape[-1]
    dtype = pyr_a.fine.dtype
    if m == 0:
        return FineMatchSet(
            torch.zeros(0, 2, dtype=dtype), torch.zeros(0, 2, dtype=dtype),
            torch.zeros(0, dim, dtype=dtype), torch.zeros(0, dim, dtype=dtype),
            torch.zeros(0, dtype=dtype),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
        )
    usable = batch.mask_a.any(dim=-1) & batch.mask_b.any(dim=-1)
    n_dropped = int(m - usable.sum())
    keep = usable.numpy()
    pa, pb = batch.patch_a[usable], batch.patch_b[usable]
    ma, mb = batch.mask_a[usable], batch.mask_b[usable]
    stacked = refiner.transform(torch.cat([pa, pb], dim=0))
    ta, tb = stacked[: len(pa)], stacked[len(pa):]
    local_a, desc_a, _ = refiner.detect_keypoint(ta, ma)
    local_b, desc_b, conf = match_in_patch(desc_a, tb, mb, window)
    half = window // 2
    origin_a = torch.from_numpy(batch.centers_a[keep] - half).to(dtype)
    origin_b = torch.from_numpy(batch.centers_b[keep] - half).to(dtype)
    xy_a = (origin_a + local_a) * fine_stride
    xy_b = (origin_b + local_b) * fine_stride
    return FineMatchSet(
        xy_a=xy_a,
        xy_b=xy_b,
        desc_a=desc_a,
        desc_b=desc_b,
        confidence=conf,
        source_a=coarse_matches.indices_a[keep],
        source_b=coarse_matches.indices_b[keep],
        n_dropped=n_dropped,
    )
