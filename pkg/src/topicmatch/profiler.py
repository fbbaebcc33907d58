"""Analytic efficiency model and its instrumented cross-check.

Counts multiply-accumulates (MACs) of every matrix product in the matcher
under the convention of :mod:`topicmatch.counting`: an ``n x k`` by
``k x m`` product costs ``n*k*m``; bias adds, softmaxes, normalizations,
and elementwise ops are free. The closed-form totals here must equal the
instrumented tallies of an actual forward pass exactly; see
docs/cost_model.md for the derivations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import coarse as C
from .counting import MacCounter, count_macs
from .errors import PopulationMismatch, ShapeError
from .fine import FineRefiner, match_in_patch
from .model import MatcherConfig

COARSE_STAGES = ("context_pooling", "topic_inference", "context_merging", "dual_softmax")


@dataclass
class CostModel:
    """Per-stage MAC totals for one image pair at one shape."""

    stages: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    @property
    def coarse_total(self) -> int:
        return sum(v for k, v in self.stages.items() if k in COARSE_STAGES)


def attention_block_macs(n_q: int, n_k: int, dim: int, ffn_mult: int) -> int:
    """One pre-norm attention block: q/k/v/out projections, score and
    value products, and the feed-forward sublayer."""
    proj = dim * dim * (2 * n_q + 2 * n_k)
    attn = 2 * n_q * n_k * dim
    ffn = 2 * ffn_mult * n_q * dim * dim
    return proj + attn + ffn


def mixer_block_macs(n_patches: int, tokens: int, dim: int, hidden_mult: int) -> int:
    """One token/channel mixer block over a batch of flattened patches."""
    token_mix = 2 * hidden_mult * n_patches * dim * tokens * tokens
    channel_mix = 2 * hidden_mult * n_patches * tokens * dim * dim
    return token_mix + channel_mix


def _covisible_from_populations(
    pop_a: np.ndarray, pop_b: np.ndarray, k_covis: int
) -> list[int]:
    """Top-k topics by population product, ties toward the lower index.

    Mirrors covisible-topic selection when the image-level distributions
    are proportional to the assignment populations."""
    scores = pop_a.astype(np.float64) * pop_b.astype(np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:k_covis]]


def count_ops(
    cfg: MatcherConfig,
    n_a: int,
    n_b: int,
    matches: int = 0,
    populations_a=None,
    populations_b=None,
) -> CostModel:
    """Closed-form per-stage MAC counts for one pair.

    ``populations_*`` give the per-topic feature counts used by the plus
    variant's augmentation; they must sum to the feature counts."""
    if n_a < 0 or n_b < 0 or matches < 0:
        raise ShapeError("counts must be nonnegative")
    if n_a == 0 and n_b == 0 and matches == 0:  # vacuous pair: nothing runs
        return CostModel(stages={s: 0 for s in (*COARSE_STAGES, "fine_refine")})
    d = cfg.coarse_dim
    k = cfg.num_topics
    e = cfg.ffn_mult
    stages: dict[str, int] = {}
    stages["context_pooling"] = attention_block_macs(k, n_a, d, e) + attention_block_macs(
        k, n_b, d, e
    )
    stages["topic_inference"] = (n_a + n_b) * d * k
    if cfg.variant == "fast":
        stages["context_merging"] = sum(
            n * k * d + n * d * d * (1 + 2 * e) for n in (n_a, n_b)
        )
    else:
        pop_a = np.zeros(k, dtype=np.int64) if populations_a is None else np.asarray(populations_a)
        pop_b = np.zeros(k, dtype=np.int64) if populations_b is None else np.asarray(populations_b)
        if pop_a.shape != (k,) or pop_b.shape != (k,):
            raise PopulationMismatch(f"populations must have length {k}")
        if pop_a.sum() != n_a or pop_b.sum() != n_b:
            raise PopulationMismatch(
                f"populations sum to {pop_a.sum()}/{pop_b.sum()}, expected {n_a}/{n_b}"
            )
        covis = _covisible_from_populations(pop_a, pop_b, cfg.num_covisible)
        total = 0
        for topic in covis:
            a_k, b_k = int(pop_a[topic]), int(pop_b[topic])
            if a_k == 0 or b_k == 0:
                continue  # skipped by the augmenter
            total += attention_block_macs(a_k, a_k, d, e)
            total += attention_block_macs(b_k, b_k, d, e)
            total += attention_block_macs(a_k, b_k, d, e)
            total += attention_block_macs(b_k, a_k, d, e)
        stages["context_merging"] = total
    stages["dual_softmax"] = n_a * n_b * d
    tokens = cfg.patch_window**2
    df = cfg.fine_dim
    m = cfg.mixer_hidden_mult
    fine = 6 * mixer_block_macs(matches, tokens, df, m)
    fine += 4 * matches * tokens * df  # detector head, two descriptor expectations, similarity
    fine += 4 * matches * tokens  # two coordinate expectations
    stages["fine_refine"] = fine
    return CostModel(stages=stages)


def plus_augment_closed_form(pop_a, pop_b, covis, dim: int, ffn_mult: int) -> int:
    """Equivalent compact form of the augmentation cost:
    sum over joint populations s_k of 2*D*s_k^2 + (8 + 4*ffn)*D^2*s_k."""
    total = 0
    for topic in covis:
        a_k, b_k = int(pop_a[topic]), int(pop_b[topic])
        if a_k == 0 or b_k == 0:
            continue
        s = a_k + b_k
        total += 2 * dim * s * s + (8 + 4 * ffn_mult) * dim * dim * s
    return total


def measure_reference(
    cfg: MatcherConfig,
    n_a: int,
    n_b: int,
    matches: int = 0,
    populations_a=None,
    populations_b=None,
    seed: int = 0,
) -> CostModel:
    """Run the actual matcher modules on synthetic tensors and tally MACs.

    For the plus variant, topic labels are injected so the per-topic
    populations match the requested ones."""
    if n_a == 0 and n_b == 0 and matches == 0:
        return CostModel(stages={s: 0 for s in (*COARSE_STAGES, "fine_refine")})
    d = cfg.coarse_dim
    k = cfg.num_topics
    gen = torch.Generator().manual_seed(seed)
    fa = torch.randn(n_a, d, generator=gen)
    fb = torch.randn(n_b, d, generator=gen)
    bank = C.TopicBank(k, d, cfg.dropout_rate)
    pooler = C.ContextPooler(d, cfg.attention_heads, cfg.ffn_mult)
    counter = MacCounter()
    with torch.no_grad(), count_macs(counter):
        with counter.stage("context_pooling"):
            pooled_a = pooler(bank, fa)
            pooled_b = pooler(bank, fb)
        with counter.stage("topic_inference"):
            dist_a = C.infer_topic_distribution(pooled_a, fa)
            dist_b = C.infer_topic_distribution(pooled_b, fb)
        with counter.stage("context_merging"):
            if cfg.variant == "fast":
                merger = C.ContextMerger(d, cfg.ffn_mult)
                merged_a, _ = merger(fa, pooled_a, dist_a.theta)
                merged_b, _ = merger(fb, pooled_b, dist_b.theta)
            else:
                pop_a = np.asarray(populations_a, dtype=np.int64)
                pop_b = np.asarray(populations_b, dtype=np.int64)
                labels_a = torch.from_numpy(np.repeat(np.arange(k), pop_a))
                labels_b = torch.from_numpy(np.repeat(np.arange(k), pop_b))
                covis = _covisible_from_populations(pop_a, pop_b, cfg.num_covisible)
                self_block = C.AttentionBlock(d, cfg.attention_heads, cfg.ffn_mult)
                cross_block = C.AttentionBlock(d, cfg.attention_heads, cfg.ffn_mult)
                merged_a, merged_b, _ = C.in_topic_augment(
                    fa, fb, labels_a, labels_b, covis, self_block, cross_block
                )
        with counter.stage("dual_softmax"):
            C.dual_softmax(merged_a, merged_b, cfg.dual_softmax_temperature)
        with counter.stage("fine_refine"):
            if matches > 0:
                refiner = FineRefiner(
                    cfg.fine_dim, cfg.patch_window, cfg.mixer_hidden_mult, cfg.heat_temperature
                )
                tokens = cfg.patch_window**2
                pa = torch.randn(matches, tokens, cfg.fine_dim, generator=gen)
                pb = torch.randn(matches, tokens, cfg.fine_dim, generator=gen)
                mask = torch.ones(matches, tokens, dtype=torch.bool)
                stacked = refiner.transform(torch.cat([pa, pb], dim=0))
                ta, tb = stacked[:matches], stacked[matches:]
                _, desc_a, _ = refiner.detect_keypoint(ta, mask)
                match_in_patch(desc_a, tb, mask, cfg.patch_window)
    model = CostModel(stages={s: counter.by_stage.get(s, 0) for s in (*COARSE_STAGES, "fine_refine")})
    return model
