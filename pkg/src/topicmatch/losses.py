"""Training objectives: topic matching, coarse feature matching, fine
symmetric-epipolar, and their weighted combination.

All logarithms are clamped at a small floor so losses stay finite (and
differentiable) for degenerate inputs; the epipolar denominators get the
same treatment, mirroring the guard described in :mod:`.geometry` for
training use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NoGroundTruth, NoMatches, NonFinite
from .fine import FineMatchSet
from .geometry import FundamentalMatrix

LOG_FLOOR = 1e-6
DENOM_FLOOR = 1e-12


@dataclass
class LossWeights:
    coarse: float = 0.25
    fine: float = 0.25

    def __post_init__(self):
        if self.coarse < 0 or self.fine < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class SupervisionBundle:
    """Ground truth for one training pair."""

    gt_coarse: np.ndarray  # (M, 2) flat coarse index pairs
    fundamental: FundamentalMatrix | None = None
    n_negatives: int = 5
    epsilon: float = LOG_FLOOR

    def __post_init__(self):
        self.gt_coarse = np.asarray(self.gt_coarse, dtype=np.int64).reshape(-1, 2)
        if self.n_negatives < 1:
            raise ValueError("need at least one negative per ground-truth pair")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")


def sample_negatives(
    gt_coarse: np.ndarray, num_b: int, n_negatives: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """For each gt pair (i, j), draw unmatched B indices uniformly without
    replacement. Returns parallel (anchor_i, negative_j) index arrays."""
    rng = np.random.default_rng(seed)
    matched_by_i: dict[int, set[int]] = {}
    for i, j in gt_coarse:
        matched_by_i.setdefault(int(i), set()).add(int(j))
    anchors, negatives = [], []
    for i, _ in gt_coarse:
        banned = matched_by_i[int(i)]
        pool = np.setdiff1d(np.arange(num_b), np.fromiter(banned, dtype=np.int64))
        if pool.size == 0:
            continue
        take = min(n_negatives, pool.size)
        picked = rng.choice(pool, size=take, replace=False)
        anchors.extend([int(i)] * take)
        negatives.extend(int(p) for p in picked)
    return np.asarray(anchors, dtype=np.int64), np.asarray(negatives, dtype=np.int64)


def topic_matching_loss(
    theta_a: torch.Tensor,
    theta_b: torch.Tensor,
    sup: SupervisionBundle,
    seed: int = 0,
) -> torch.Tensor:
    """Negative log of co-assignment probability over gt pairs plus negative
    log of non-co-assignment over sampled unmatched pairs."""
    gt = sup.gt_coarse
    if gt.size == 0:
        raise NoGroundTruth("topic matching loss needs ground-truth pairs")
    eps = sup.epsilon
    pos = (theta_a[gt[:, 0]] * theta_b[gt[:, 1]]).sum(dim=-1)
    loss = -torch.log(pos.clamp(min=eps)).mean()
    anchors, negs = sample_negatives(gt, theta_b.shape[0], sup.n_negatives, seed)
    if anchors.size:
        p_neg = (theta_a[anchors] * theta_b[negs]).sum(dim=-1)
        loss = loss + -torch.log((1.0 - p_neg).clamp(min=eps)).mean()
    return loss


def coarse_feature_loss(
    p_c: torch.Tensor, gt_coarse: np.ndarray, epsilon: float = LOG_FLOOR
) -> torch.Tensor:
    """Mean negative log confidence at the ground-truth cells."""
    gt = np.asarray(gt_coarse, dtype=np.int64).reshape(-1, 2)
    if gt.size == 0:
        raise NoGroundTruth("coarse feature loss needs ground-truth pairs")
    picked = p_c[gt[:, 0], gt[:, 1]]
    return -torch.log(picked.clamp(min=epsilon)).mean()


def epipolar_terms(
    xy_a: torch.Tensor, xy_b: torch.Tensor, f: torch.Tensor, floor: float = DENOM_FLOOR
) -> torch.Tensor:
    """Per-match symmetric epipolar distance with floored denominators.

    Matches the geometry-module metric wherever the denominators are away
    from zero, but stays finite (and differentiable) at epipoles."""
    ones = torch.ones(xy_a.shape[0], 1, dtype=xy_a.dtype)
    ha = torch.cat([xy_a, ones], dim=1)
    hb = torch.cat([xy_b, ones], dim=1)
    line_b = ha @ f  # rows: F^T x
    line_a = hb @ f.transpose(0, 1)  # rows: F y
    num = (ha * line_a).sum(dim=1) ** 2
    d1 = (line_b[:, 0] ** 2 + line_b[:, 1] ** 2).clamp(min=floor)
    d2 = (line_a[:, 0] ** 2 + line_a[:, 1] ** 2).clamp(min=floor)
    return num / d1 + num / d2


def fine_epipolar_loss(
    matches: FineMatchSet | tuple[torch.Tensor, torch.Tensor],
    f: FundamentalMatrix,
) -> torch.Tensor:
    """Mean symmetric epipolar distance of the refined matches."""
    if isinstance(matches, FineMatchSet):
        xy_a, xy_b = matches.xy_a, matches.xy_b
    else:
        xy_a, xy_b = matches
    if xy_a.shape[0] == 0:
        raise NoMatches("fine epipolar loss needs at least one match")
    f_t = torch.as_tensor(f.f, dtype=xy_a.dtype)
    return epipolar_terms(xy_a, xy_b, f_t).mean()


def total_loss(
    l_coarse_feat: torch.Tensor | float,
    l_topic: torch.Tensor | float,
    l_fine: torch.Tensor | float,
    w: LossWeights | None = None,
) -> torch.Tensor:
    """lambda_c (feature + topic) + lambda_f fine."""
    w = w or LossWeights()
    parts = [torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
             for x in (l_coarse_feat, l_topic, l_fine)]
    for p in parts:
        if not torch.isfinite(p).all():
            raise NonFinite("loss component is not finite")
    return w.coarse * (parts[0] + parts[1]) + w.fine * parts[2]
