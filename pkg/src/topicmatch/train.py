"""Single-process training loop over synthetic pairs.

Adam (bias-corrected first/second moments) with cosine learning-rate decay
and global gradient-norm clipping; one image pair per optimizer step, with
optional gradient accumulation. Deterministic given the config seed: model
init, data order, topic dropout/sampling, and negative sampling all derive
from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .checkpoint import save_checkpoint
from .coarse import CoarseMatchSet
from .errors import ConfigError, NoGroundTruth, NonFiniteLoss
from .geometry import (
    CorrespondenceSet,
    auc_at_thresholds,
    corner_error,
    estimate_homography_ransac,
)
from .model import MatcherConfig, MatcherModel, build_model
from .synth import DatasetManifest, ScenePair, load_pair


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 10
    batch_pairs: int = 1  # pairs accumulated per optimizer step
    seed: int = 0
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    n_negatives: int = 5
    grad_clip: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    cosine_decay: bool = True
    fine_loss_warmup_steps: int = 0  # fine term joins after coarse settles
    train_split: str = "train"  # "train" | "all" (held-in overfit runs)
    val_split: str = "val"
    validate_every: int = 1  # epochs; 0 disables validation
    max_steps: int | None = None
    checkpoint_every: int = 0  # epochs; 0 = final only
    ransac_threshold_px: float = 3.0
    ransac_iters: int = 500
    ransac_seed: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_pairs < 1:
            raise ConfigError("batch_pairs must be >= 1")
        self.matcher.validate()


@dataclass
class StepRecord:
    step: int
    pair_id: str
    total: float
    coarse_feat: float
    topic: float
    fine: float
    n_coarse: int
    n_fine: int


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    checkpoint_path: str | None = None
    stopped_early: bool = False

    @property
    def step_totals(self) -> list[float]:
        return [s.total for s in self.steps]

    def save_jsonl(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def pair_losses(
    model: MatcherModel,
    scene: ScenePair,
    cfg: TrainConfig,
    generator: torch.Generator,
    negative_seed: int,
    step: int = 0,
) -> tuple[torch.Tensor, dict]:
    """Forward pass and loss assembly for one training pair."""
    pyr_a = model.extract(scene.image_a, "train")
    pyr_b = model.extract(scene.image_b, "train")
    result = model.match_coarse(pyr_a, pyr_b, "train", generator)
    sup = L.SupervisionBundle(
        gt_coarse=scene.gt_coarse,
        fundamental=scene.fundamental,
        n_negatives=cfg.n_negatives,
    )
    l_topic = L.topic_matching_loss(
        result.dist_a.theta, result.dist_b.theta, sup, seed=negative_seed
    )
    l_feat = L.coarse_feature_loss(result.confidence, scene.gt_coarse)
    fine_active = step >= cfg.fine_loss_warmup_steps
    fine = model.match_fine(pyr_a, pyr_b, result.matches) if fine_active else []
    if fine_active and len(fine):
        l_fine = L.fine_epipolar_loss(fine, scene.fundamental)
    else:
        l_fine = torch.zeros((), dtype=result.confidence.dtype)
    total = L.total_loss(l_feat, l_topic, l_fine, cfg.loss_weights)
    info = {
        "coarse_feat": float(l_feat.detach()),
        "topic": float(l_topic.detach()),
        "fine": float(l_fine.detach()),
        "n_coarse": len(result.matches),
        "n_fine": len(fine),
    }
    return total, info


def validate_model(
    model: MatcherModel,
    scenes: list[tuple[str, ScenePair]],
    cfg: TrainConfig,
    thresholds=(3.0, 5.0, 10.0),
) -> dict:
    """Corner-error AUC of the full match -> RANSAC pipeline."""
    errors = []
    match_counts = []
    for _, scene in scenes:
        fine, _ = model.match_images(scene.image_a, scene.image_b)
        match_counts.append(len(fine))
        arr = fine.to_numpy()
        if len(arr) < 4:
            errors.append(float("inf"))
            continue
        try:
            h_est = estimate_homography_ransac(
                CorrespondenceSet(arr[:, :2], arr[:, 2:4]),
                cfg.ransac_threshold_px,
                cfg.ransac_iters,
                cfg.ransac_seed,
            )
            h, w = scene.image_a.shape
            errors.append(corner_error(h_est, scene.homography, w, h))
        except Exception:
            errors.append(float("inf"))
    finite = [min(e, 1e9) for e in errors]
    aucs = auc_at_thresholds(finite, list(thresholds))
    return {
        "auc": {str(int(t)): a for t, a in zip(thresholds, aucs)},
        "mean_matches": float(np.mean(match_counts)) if match_counts else 0.0,
        "corner_errors": [float(e) for e in errors],
    }


def load_split(manifest: DatasetManifest, split: str) -> list[tuple[str, ScenePair]]:
    return [(pid, load_pair(manifest, pid)) for pid in manifest.split_ids(split)]


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir: Path | str,
    epoch_callback: Callable[[MatcherModel, int, dict], bool] | None = None,
) -> TrainReport:
    """Optimize a fresh model on the manifest's training split.

    ``epoch_callback(model, epoch, record) -> stop`` can end training early
    (used by the acceptance harness once its targets are met). Raises
    NonFiniteLoss with a diagnostic dump if any loss goes non-finite.
    """
    cfg.validate()
    if manifest.kind != "synthetic":
        raise ConfigError("training requires a synthetic manifest with ground truth")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_scenes = load_split(manifest, cfg.train_split)
    if not train_scenes:
        raise NoGroundTruth(f"no pairs in split {cfg.train_split!r}")
    val_scenes = load_split(manifest, cfg.val_split) if cfg.validate_every else []

    model = build_model(cfg.matcher, cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    torch_gen = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = math.ceil(len(train_scenes) / cfg.batch_pairs)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    report = TrainReport()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_scenes))
        epoch_totals = []
        accumulated = 0
        optimizer.zero_grad()
        for pos, scene_idx in enumerate(order):
            pair_id, scene = train_scenes[scene_idx]
            total, info = pair_losses(
                model,
                scene,
                cfg,
                torch_gen,
                negative_seed=cfg.seed * 1000003 + step * 131 + pos,
                step=step,
            )
            if not torch.isfinite(total.detach()):
                dump = out_dir / "nonfinite_dump.json"
                dump.write_text(json.dumps({"pair_id": pair_id, "step": step, **info}))
                raise NonFiniteLoss(f"non-finite loss on pair {pair_id} (dump: {dump})")
            (total / cfg.batch_pairs).backward()
            accumulated += 1
            total_value = float(total.detach())
            epoch_totals.append(total_value)
            report.steps.append(
                StepRecord(step=step, pair_id=pair_id, total=total_value, **info)
            )
            if accumulated == cfg.batch_pairs or pos == len(order) - 1:
                if cfg.cosine_decay and total_steps > 1:
                    frac = step / max(total_steps - 1, 1)
                    lr_now = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
                else:
                    lr_now = cfg.lr
                for group in optimizer.param_groups:
                    group["lr"] = lr_now
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
                accumulated = 0
                step += 1
                for p in model.parameters():
                    if not torch.isfinite(p).all():
                        raise NonFiniteLoss(f"non-finite parameter after step {step}")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
        record = {
            "epoch": epoch,
            "step": step,
            "mean_total": float(np.mean(epoch_totals)) if epoch_totals else float("nan"),
            "first_step_total": report.steps[0].total if report.steps else float("nan"),
            "lr": float(optimizer.param_groups[0]["lr"]),
            "variant": cfg.matcher.variant,
        }
        if val_scenes and cfg.validate_every and (epoch + 1) % cfg.validate_every == 0:
            record["val"] = validate_model(model, val_scenes, cfg)
        report.epochs.append(record)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_ep{epoch:04d}.ckpt", model, optimizer, step)
        if epoch_callback is not None and epoch_callback(model, epoch, record):
            report.stopped_early = True
            done = True

    final_path = save_checkpoint(out_dir / "checkpoint_final.ckpt", model, optimizer, step)
    report.checkpoint_path = str(final_path)
    report.save_jsonl(out_dir / "train_report.jsonl")
    return report


def matches_to_correspondences(matches: CoarseMatchSet, grid: tuple[int, int]) -> np.ndarray:
    """Flat coarse indices -> pixel centers, for RANSAC baselines."""
    from .model import upscaled_coarse_coords

    a = upscaled_coarse_coords(matches.indices_a, grid)
    b = upscaled_coarse_coords(matches.indices_b, grid)
    return np.concatenate([a, b], axis=1)
