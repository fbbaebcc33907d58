"""Full matcher assembly: backbone + coarse topic matcher + fine refiner,
with a single config object and deterministic initialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import coarse as C
from .backbone import FeaturePyramid, FeaturePyramidExtractor, extract_pyramid, init_parameters
from .errors import ConfigError
from .fine import FineMatchSet, FineRefiner, refine_matches
from .validation import FINE_STRIDE


@dataclass
class MatcherConfig:
    """Model hyperparameters. Defaults are the full desk-scale setup; the
    acceptance experiments shrink widths and topic count."""

    num_topics: int = 100
    match_threshold: float = 0.2
    num_covisible: int = 8
    variant: str = "fast"
    dual_softmax_temperature: float = 0.1
    attention_heads: int = 4
    mc_samples: int = 1
    dropout_rate: float = 0.1
    ffn_mult: int = 2
    backbone_widths: tuple = (32, 64, 128)
    fine_dim: int = 64
    patch_window: int = 5
    heat_temperature: float = 0.1
    mixer_hidden_mult: int = 2

    @property
    def coarse_dim(self) -> int:
        return self.backbone_widths[-1]

    def validate(self) -> None:
        if self.variant not in C.VARIANTS:
            raise ConfigError(f"variant must be one of {C.VARIANTS}, got {self.variant!r}")
        if not 1 <= self.num_covisible <= self.num_topics:
            raise ConfigError(
                f"num_covisible must be in [1, {self.num_topics}], got {self.num_covisible}"
            )
        if not 0.0 < self.match_threshold < 1.0:
            raise ConfigError(f"match threshold must be in (0, 1), got {self.match_threshold}")
        if self.dual_softmax_temperature <= 0 or self.heat_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if self.num_topics < 1 or self.mc_samples < 1:
            raise ConfigError("num_topics and mc_samples must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.coarse_dim % self.attention_heads:
            raise ConfigError("coarse width must divide evenly into attention heads")
        if self.patch_window % 2 == 0 or self.patch_window < 1:
            raise ConfigError("patch window must be odd and positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown matcher config keys: {sorted(unknown)}")
        d = dict(d)
        if "backbone_widths" in d:
            d["backbone_widths"] = tuple(d["backbone_widths"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class CoarseResult:
    """Intermediates of one coarse matching pass (kept for losses and viz)."""

    matches: C.CoarseMatchSet
    dist_a: C.TopicDistribution
    dist_b: C.TopicDistribution
    confidence: torch.Tensor  # dual-softmax matrix
    pooled_a: C.PooledTopics
    pooled_b: C.PooledTopics
    merged_a: torch.Tensor
    merged_b: torch.Tensor
    covisible: list[int] = field(default_factory=list)
    skipped_topics: list[int] = field(default_factory=list)


class MatcherModel(nn.Module):
    """End-to-end two-view matcher."""

    def __init__(self, cfg: MatcherConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.coarse_dim
        self.backbone = FeaturePyramidExtractor(tuple(cfg.backbone_widths), cfg.fine_dim)
        self.bank = C.TopicBank(cfg.num_topics, d, cfg.dropout_rate)
        self.pooler = C.ContextPooler(d, cfg.attention_heads, cfg.ffn_mult)
        if cfg.variant == "fast":
            self.merger = C.ContextMerger(d, cfg.ffn_mult)
        else:
            self.self_block = C.AttentionBlock(d, cfg.attention_heads, cfg.ffn_mult)
            self.cross_block = C.AttentionBlock(d, cfg.attention_heads, cfg.ffn_mult)
        self.refiner = FineRefiner(
            cfg.fine_dim, cfg.patch_window, cfg.mixer_hidden_mult, cfg.heat_temperature
        )

    def extract(self, img, mode: str = "eval") -> FeaturePyramid:
        return extract_pyramid(img, self.backbone, mode)

    def match_coarse(
        self,
        pyr_a: FeaturePyramid,
        pyr_b: FeaturePyramid,
        mode: str = "eval",
        generator: torch.Generator | None = None,
        match_threshold: float | None = None,
    ) -> CoarseResult:
        """Context pooling, topic inference, variant-specific merging,
        dual softmax, and mutual-NN extraction."""
        cfg = self.cfg
        train = mode == "train"
        fa = pyr_a.coarse_flat()
        fb = pyr_b.coarse_flat()
        pooled_a = self.pooler(self.bank, fa, train, generator, image_id="a")
        pooled_b = self.pooler(self.bank, fb, train, generator, image_id="b")
        dist_a = C.infer_topic_distribution(pooled_a, fa)
        dist_b = C.infer_topic_distribution(pooled_b, fb)
        covis: list[int] = []
        skipped: list[int] = []
        if cfg.variant == "fast":
            merged_a, _ = self.merger(fa, pooled_a, dist_a.theta)
            merged_b, _ = self.merger(fb, pooled_b, dist_b.theta)
        else:
            labels_a = C.assign_topics(dist_a, mode, generator)
            labels_b = C.assign_topics(dist_b, mode, generator)
            covis = C.covisible_topics(dist_a, dist_b, cfg.num_covisible)
            merged_a, merged_b, diag = C.in_topic_augment(
                fa, fb, labels_a, labels_b, covis, self.self_block, self.cross_block
            )
            skipped = diag.skipped_topics
        # scale by 1/sqrt(D) so similarity magnitudes are width-independent
        scale = float(cfg.coarse_dim) ** -0.5
        p_c = C.dual_softmax(merged_a * scale, merged_b * scale, cfg.dual_softmax_temperature)
        tau = cfg.match_threshold if match_threshold is None else match_threshold
        matches = C.extract_coarse_matches(p_c, tau)
        return CoarseResult(
            matches=matches,
            dist_a=dist_a,
            dist_b=dist_b,
            confidence=p_c,
            pooled_a=pooled_a,
            pooled_b=pooled_b,
            merged_a=merged_a,
            merged_b=merged_b,
            covisible=covis,
            skipped_topics=skipped,
        )

    def match_fine(
        self, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid, coarse_matches: C.CoarseMatchSet
    ) -> FineMatchSet:
        return refine_matches(pyr_a, pyr_b, coarse_matches, self.refiner, FINE_STRIDE)

    def match_images(
        self,
        img_a,
        img_b,
        match_threshold: float | None = None,
    ) -> tuple[FineMatchSet, CoarseResult]:
        """Eval-mode pipeline on a pair of grayscale arrays."""
        with torch.no_grad():
            pyr_a = self.extract(img_a, "eval")
            pyr_b = self.extract(img_b, "eval")
            result = self.match_coarse(pyr_a, pyr_b, "eval", match_threshold=match_threshold)
            fine = self.match_fine(pyr_a, pyr_b, result.matches)
        return fine, result


def build_model(cfg: MatcherConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> MatcherModel:
    """Construct and deterministically initialize a matcher."""
    model = MatcherModel(cfg)
    init_parameters(model, seed)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model


def coarse_match(
    model: MatcherModel,
    pyr_a: FeaturePyramid,
    pyr_b: FeaturePyramid,
    mode: str = "eval",
    generator: torch.Generator | None = None,
) -> CoarseResult:
    """Functional wrapper over :meth:`MatcherModel.match_coarse`."""
    return model.match_coarse(pyr_a, pyr_b, mode, generator)


def upscaled_coarse_coords(indices: np.ndarray, grid: tuple[int, int], cell_px: int = 8) -> np.ndarray:
    """Continuous pixel centers (x, y) of flat coarse indices."""
    rows, cols = grid
    xs = (indices % cols + 0.5) * cell_px - 0.5
    ys = (indices // cols + 0.5) * cell_px - 0.5
    return np.stack([xs, ys], axis=1)
