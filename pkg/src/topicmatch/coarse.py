"""Coarse-level topic-assisted matching.

Pipeline pieces: context pooling (cross-attention from a learnable topic
bank into image features), per-feature topic distributions, covisible
topic selection, two context-merging variants (expectation-based "fast"
merge and per-topic self/cross attention "plus" augmentation), dual
softmax scoring, and mutual-nearest-neighbor match extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import AttentionBlock, FeedForward
from .counting import CountedLinear, counted_matmul
from .errors import EmptyTopic, ShapeError

VARIANTS = ("fast", "plus")


@dataclass
class PooledTopics:
    """Image-conditioned topic embeddings (one row per topic)."""

    local: torch.Tensor
    source_image_id: str | None = None


@dataclass
class TopicDistribution:
    """Per-feature simplex over topics plus the aggregated image-level simplex."""

    theta: torch.Tensor
    image_level: torch.Tensor


@dataclass
class CoarseMatchSet:
    """Mutually-exclusive coarse matches as flat grid indices."""

    indices_a: np.ndarray
    indices_b: np.ndarray
    confidence: np.ndarray

    def __len__(self) -> int:
        return len(self.indices_a)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.indices_a.tolist(), self.indices_b.tolist()))

    @classmethod
    def empty(cls) -> "CoarseMatchSet":
        return cls(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
        )


class TopicBank(nn.Module):
    """Learnable global topic embeddings with row dropout for training."""

    def __init__(self, num_topics: int, dim: int, dropout_rate: float = 0.1):
        super().__init__()
        if num_topics < 1:
            raise ShapeError("need at least one topic")
        if not 0.0 <= dropout_rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.dropout_rate = dropout_rate
        self.embeddings = nn.Parameter(torch.zeros(num_topics, dim))

    @property
    def num_topics(self) -> int:
        return self.embeddings.shape[0]

    def rows(self, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
        """Bank rows, with inverted row dropout applied in train mode."""
        if not train or self.dropout_rate == 0.0:
            return self.embeddings
        keep = (
            torch.rand(self.num_topics, generator=generator)
            >= self.dropout_rate
        ).to(self.embeddings.dtype)
        scale = 1.0 / (1.0 - self.dropout_rate)
        return self.embeddings * (keep * scale).unsqueeze(1)


class ContextPooler(nn.Module):
    """Cross-attention with topic queries over flattened image features."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.block = AttentionBlock(dim, heads, ffn_mult=ffn_mult)

    def forward(
        self,
        bank: TopicBank,
        features: torch.Tensor,
        train: bool = False,
        generator: torch.Generator | None = None,
        image_id: str | None = None,
    ) -> PooledTopics:
        if features.shape[-1] != bank.embeddings.shape[-1]:
            raise ShapeError(
                f"feature width {features.shape[-1]} != bank width {bank.embeddings.shape[-1]}"
            )
        rows = bank.rows(train, generator)
        return PooledTopics(local=self.block(rows, features), source_image_id=image_id)


def infer_topic_distribution(pooled: PooledTopics, features: torch.Tensor) -> TopicDistribution:
    """Softmax over topic/feature dot products, plus the image-level simplex.

    The image-level distribution is the L1-normalized column sum of the
    per-feature distributions.
    """
    if features.shape[-1] != pooled.local.shape[-1]:
        raise ShapeError("feature/topic width mismatch")
    logits = counted_matmul(features, pooled.local.transpose(0, 1))
    theta = torch.softmax(logits, dim=-1)
    image_level = theta.sum(dim=0)
    image_level = image_level / image_level.sum()
    return TopicDistribution(theta=theta, image_level=image_level)


def coassign_probability(theta_i, theta_j) -> tuple[float, float]:
    """Probability that two features share a topic, and that they do not."""
    a = np.asarray(theta_i, dtype=np.float64)
    b = np.asarray(theta_j, dtype=np.float64)
    p_same = float(np.dot(a, b))
    return p_same, 1.0 - p_same


def covisible_topics(
    dist_a: TopicDistribution, dist_b: TopicDistribution, k_covis: int
) -> list[int]:
    """Indices of the k largest entries of the image-level product,
    descending by score with ties broken toward the lower index."""
    scores = (dist_a.image_level * dist_b.image_level).detach().cpu().numpy()
    k = int(k_covis)
    if not 1 <= k <= len(scores):
        raise ShapeError(f"k_covis must be in [1, {len(scores)}], got {k}")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:k]]


def assign_topics(
    theta: TopicDistribution | torch.Tensor,
    mode: str = "eval",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Per-feature topic labels: categorical samples in train mode, argmax
    (ties toward the lower index) in eval mode."""
    t = theta.theta if isinstance(theta, TopicDistribution) else theta
    if mode == "train":
        return torch.multinomial(t.detach(), 1, generator=generator).squeeze(1)
    if mode == "eval":
        labels = np.argmax(t.detach().cpu().numpy(), axis=-1)
        return torch.from_numpy(np.ascontiguousarray(labels)).long()
    raise ShapeError(f"mode must be 'train' or 'eval', got {mode!r}")


@dataclass
class AugmentDiagnostics:
    skipped_topics: list[int] = field(default_factory=list)


def in_topic_augment(
    f_a: torch.Tensor,
    f_b: torch.Tensor,
    labels_a: torch.Tensor,
    labels_b: torch.Tensor,
    covis: list[int],
    self_block: AttentionBlock,
    cross_block: AttentionBlock,
) -> tuple[torch.Tensor, torch.Tensor, AugmentDiagnostics]:
    """Per-topic self attention then cross attention, within covisible topics.

    Features whose topic is not covisible (or whose topic is empty in
    either image) pass through bitwise unchanged; skipped topics are
    recorded in the diagnostics.
    """
    if not covis:
        raise EmptyTopic("no covisible topics to augment within")
    out_a = f_a.clone()
    out_b = f_b.clone()
    diag = AugmentDiagnostics()
    for k in covis:
        in_a = labels_a == k
        in_b = labels_b == k
        if not bool(in_a.any()) or not bool(in_b.any()):
            diag.skipped_topics.append(int(k))
            continue
        sub_a = f_a[in_a]
        sub_b = f_b[in_b]
        sub_a = self_block(sub_a, sub_a)
        sub_b = self_block(sub_b, sub_b)
        out_a[in_a] = cross_block(sub_a, sub_b)
        out_b[in_b] = cross_block(sub_b, sub_a)
    return out_a, out_b, diag


class ContextMerger(nn.Module):
    """Expectation-weighted topic mixing: f_i + W (sum_k theta_ik T_k),
    followed by a pre-norm feed-forward sublayer.

    The mixing weights are exactly the topic distribution, so two features
    with equal distributions receive bitwise-equal context."""

    def __init__(self, dim: int, ffn_mult: int = 2):
        super().__init__()
        self.proj = CountedLinear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)

    def forward(
        self, features: torch.Tensor, pooled: PooledTopics, theta: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (merged features, per-feature expected context)."""
        if theta.shape != (features.shape[0], pooled.local.shape[0]):
            raise ShapeError(
                f"theta shape {tuple(theta.shape)} inconsistent with "
                f"{features.shape[0]} features x {pooled.local.shape[0]} topics"
            )
        context = counted_matmul(theta, pooled.local)
        merged = features + self.proj(context)
        merged = merged + self.ffn(self.norm(merged))
        return merged, context


def merge_context(
    f_c: torch.Tensor,
    pooled: PooledTopics,
    theta: TopicDistribution | torch.Tensor,
    merger: ContextMerger,
) -> torch.Tensor:
    t = theta.theta if isinstance(theta, TopicDistribution) else theta
    merged, _ = merger(f_c, pooled, t)
    return merged


def dual_softmax(f_a: torch.Tensor, f_b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Row softmax times column softmax of the scaled similarity matrix."""
    if temperature <= 0:
        raise ShapeError(f"temperature must be positive, got {temperature}")
    scores = counted_matmul(f_a, f_b.transpose(0, 1)) / temperature
    return torch.softmax(scores, dim=1) * torch.softmax(scores, dim=0)


def extract_coarse_matches(p_c, tau: float) -> CoarseMatchSet:
    """Thresholded mutual nearest neighbors of the confidence matrix.

    A pair (i, j) is kept when P[i, j] >= tau, j is the argmax of row i,
    and i is the argmax of column j; argmax ties resolve to the lower
    index, which makes the output one-to-one."""
    probs = p_c.detach().cpu().numpy() if isinstance(p_c, torch.Tensor) else np.asarray(p_c)
    if probs.ndim != 2:
        raise ShapeError(f"expected a 2D confidence matrix, got shape {probs.shape}")
    if probs.size == 0:
        return CoarseMatchSet.empty()
    best_j = probs.argmax(axis=1)
    best_i = probs.argmax(axis=0)
    rows = np.arange(probs.shape[0])
    mutual = best_i[best_j] == rows
    conf = probs[rows, best_j]
    keep = mutual & (conf >= tau)
    return CoarseMatchSet(
        indices_a=rows[keep].astype(np.int64),
        indices_b=best_j[keep].astype(np.int64),
        confidence=conf[keep].astype(np.float64),
    )
