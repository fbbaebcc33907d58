"""Evaluation: homography accuracy of the full pipeline, match precision,
epipolar statistics, topic-overlay rendering, and the covisible-topic
sweep."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from .coarse import TopicDistribution, assign_topics
from .errors import ConfigError
from .model import MatcherModel, upscaled_coarse_coords
from .profiler import count_ops
from .synth import DatasetManifest, ScenePair, load_pair
from .validation import COARSE_STRIDE


@dataclass
class EvalConfig:
    split: str = "val"
    auc_thresholds: tuple = (3.0, 5.0, 10.0)
    precision_thresholds: tuple = (1.0, 3.0, 5.0)
    ransac_threshold_px: float = 3.0
    ransac_iters: int = 1000
    ransac_seed: int = 0
    oracle: bool = False
    match_threshold: float | None = None


@dataclass
class PairEval:
    pair_id: str
    corner_error: float
    n_coarse: int
    n_fine: int
    precision: dict = field(default_factory=dict)
    median_fine_epipolar: float = float("nan")
    median_coarse_epipolar: float = float("nan")
    failed: bool = False


@dataclass
class EvalReport:
    pairs: list[PairEval] = field(default_factory=list)
    auc: dict = field(default_factory=dict)
    mean_precision: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)
    n_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "mean_precision": self.mean_precision,
            "stage_seconds": self.stage_seconds,
            "n_failures": self.n_failures,
            "pairs": [vars(p) for p in self.pairs],
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def oracle_matches(scene: ScenePair, step_px: int = COARSE_STRIDE) -> np.ndarray:
    """Exact correspondences sampled from the ground-truth homography."""
    h, w = scene.image_a.shape
    xs = np.arange(step_px / 2, w - step_px / 2 + 1, step_px)
    ys = np.arange(step_px / 2, h - step_px / 2 + 1, step_px)
    gx, gy = np.meshgrid(xs, ys)
    pts_a = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts_b = geo.warp_points(scene.homography, pts_a)
    inside = (
        (pts_b[:, 0] >= 0) & (pts_b[:, 0] <= w - 1) & (pts_b[:, 1] >= 0) & (pts_b[:, 1] <= h - 1)
    )
    out = np.concatenate([pts_a[inside], pts_b[inside], np.ones((inside.sum(), 1))], axis=1)
    return out


def _median_epipolar(f: geo.FundamentalMatrix, pts_a: np.ndarray, pts_b: np.ndarray) -> float:
    if len(pts_a) == 0:
        return float("nan")
    dists = [geo.symmetric_epipolar_distance(f, a, b) for a, b in zip(pts_a, pts_b)]
    return float(np.median(dists))


def evaluate_pairs(
    model: MatcherModel | None,
    scenes: list[tuple[str, ScenePair]],
    cfg: EvalConfig | None = None,
) -> EvalReport:
    """Match each pair, fit a homography, and aggregate accuracy metrics.

    With ``cfg.oracle`` the matcher is replaced by exact ground-truth
    correspondences (an upper bound for the rest of the pipeline)."""
    cfg = cfg or EvalConfig()
    report = EvalReport()
    stage = {"extract_and_match": 0.0, "ransac": 0.0}
    errors = []
    for pair_id, scene in scenes:
        t0 = time.perf_counter()
        if cfg.oracle:
            arr = oracle_matches(scene)
            n_coarse = len(arr)
            coarse_px = arr[:, :4]
        else:
            fine, coarse_res = model.match_images(
                scene.image_a, scene.image_b, match_threshold=cfg.match_threshold
            )
            arr = fine.to_numpy()
            n_coarse = len(coarse_res.matches)
            grid = (scene.image_a.shape[0] // COARSE_STRIDE, scene.image_a.shape[1] // COARSE_STRIDE)
            coarse_px = np.concatenate(
                [
                    upscaled_coarse_coords(coarse_res.matches.indices_a, grid),
                    upscaled_coarse_coords(coarse_res.matches.indices_b, grid),
                ],
                axis=1,
            )
        stage["extract_and_match"] += time.perf_counter() - t0

        pe = PairEval(pair_id=pair_id, corner_error=float("inf"), n_coarse=n_coarse, n_fine=len(arr))
        t0 = time.perf_counter()
        if len(arr) >= 4:
            try:
                h_est = geo.estimate_homography_ransac(
                    geo.CorrespondenceSet(arr[:, :2], arr[:, 2:4]),
                    cfg.ransac_threshold_px,
                    cfg.ransac_iters,
                    cfg.ransac_seed,
                )
                hh, ww = scene.image_a.shape
                pe.corner_error = geo.corner_error(h_est, scene.homography, ww, hh)
            except (geo.NoConsensus, geo.DegenerateWarp):
                pe.failed = True
        else:
            pe.failed = True
        stage["ransac"] += time.perf_counter() - t0

        if len(arr):
            reproj = geo.warp_points(scene.homography, arr[:, :2]) - arr[:, 2:4]
            reproj_err = np.sqrt((reproj**2).sum(axis=1))
            pe.precision = {
                str(int(t)): float((reproj_err < t).mean()) for t in cfg.precision_thresholds
            }
            pe.median_fine_epipolar = _median_epipolar(
                scene.fundamental, arr[:, :2], arr[:, 2:4]
            )
        if not cfg.oracle and len(coarse_px):
            pe.median_coarse_epipolar = _median_epipolar(
                scene.fundamental, coarse_px[:, :2], coarse_px[:, 2:4]
            )
        errors.append(min(pe.corner_error, 1e9))
        report.pairs.append(pe)

    if errors:
        aucs = geo.auc_at_thresholds(errors, list(cfg.auc_thresholds))
        report.auc = {str(int(t)): a for t, a in zip(cfg.auc_thresholds, aucs)}
    for t in cfg.precision_thresholds:
        vals = [p.precision.get(str(int(t))) for p in report.pairs if p.precision]
        report.mean_precision[str(int(t))] = float(np.mean(vals)) if vals else 0.0
    report.stage_seconds = stage
    report.n_failures = sum(p.failed for p in report.pairs)
    return report


def evaluate(
    manifest: DatasetManifest, model: MatcherModel | None, cfg: EvalConfig | None = None
) -> EvalReport:
    cfg = cfg or EvalConfig()
    scenes = [(pid, load_pair(manifest, pid)) for pid in manifest.split_ids(cfg.split)]
    if not scenes:
        raise ConfigError(f"no pairs in split {cfg.split!r}")
    return evaluate_pairs(model, scenes, cfg)


def render_topic_overlay(
    theta: TopicDistribution | np.ndarray,
    image: np.ndarray,
    palette_seed: int = 0,
    cell_px: int = COARSE_STRIDE,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Per-cell argmax topic map, upsampled and alpha-blended over the image.

    Returns (index map (h, w) uint8, overlay (H, W, 3) uint8, palette)."""
    t = theta.theta if isinstance(theta, TopicDistribution) else torch.as_tensor(theta)
    labels = assign_topics(t, "eval").numpy().astype(np.uint8)
    h, w = image.shape
    grid = (h // cell_px, w // cell_px)
    if labels.size != grid[0] * grid[1]:
        raise ConfigError(
            f"theta rows ({labels.size}) do not tile the image grid {grid}"
        )
    index_map = labels.reshape(grid)
    k = t.shape[-1]
    rng = np.random.default_rng(palette_seed)
    palette = rng.integers(32, 256, size=(k, 3), dtype=np.int64).astype(np.uint8)
    upsampled = np.repeat(np.repeat(index_map, cell_px, axis=0), cell_px, axis=1)
    colors = palette[upsampled]
    gray = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    overlay = np.rint(0.5 * gray[..., None] + 0.5 * colors).astype(np.uint8)
    palette_json = {str(i): [int(c) for c in palette[i]] for i in range(k)}
    return index_map, overlay, palette_json


def covis_sweep(
    manifest: DatasetManifest,
    model: MatcherModel,
    k_values: list[int],
    cfg: EvalConfig | None = None,
) -> list[dict]:
    """Re-evaluate a plus-variant model at several covisible-topic counts,
    reporting accuracy plus the analytic coarse-stage cost."""
    if model.cfg.variant != "plus":
        raise ConfigError("the covisible-topic sweep needs a plus-variant model")
    cfg = cfg or EvalConfig()
    scenes = [(pid, load_pair(manifest, pid)) for pid in manifest.split_ids(cfg.split)]
    if not scenes:
        raise ConfigError(f"no pairs in split {cfg.split!r}")
    base_cfg = model.cfg
    rows = []
    try:
        for k in k_values:
            model.cfg = replace(base_cfg, num_covisible=int(k))
            model.cfg.validate()
            report = evaluate_pairs(model, scenes, cfg)
            cost = 0
            for _, scene in scenes:
                with torch.no_grad():
                    pyr_a = model.extract(scene.image_a)
                    pyr_b = model.extract(scene.image_b)
                    res = model.match_coarse(pyr_a, pyr_b, "eval")
                pops_a = np.bincount(
                    assign_topics(res.dist_a, "eval").numpy(), minlength=base_cfg.num_topics
                )
                pops_b = np.bincount(
                    assign_topics(res.dist_b, "eval").numpy(), minlength=base_cfg.num_topics
                )
                n_a = res.dist_a.theta.shape[0]
                n_b = res.dist_b.theta.shape[0]
                cost += count_ops(
                    model.cfg, n_a, n_b, len(res.matches), pops_a, pops_b
                ).coarse_total
            rows.append(
                {
                    "k_covis": int(k),
                    "auc": report.auc,
                    "coarse_macs": int(cost),
                    "n_failures": report.n_failures,
                }
            )
    finally:
        model.cfg = base_cfg
    return rows


def sweep_rows_to_csv(rows: list[dict], path: Path | str, auc_key: str = "5") -> None:
    lines = ["k_covis,auc,coarse_macs"]
    for row in rows:
        lines.append(f"{row['k_covis']},{row['auc'].get(auc_key, 0.0):.6f},{row['coarse_macs']}")
    Path(path).write_text("\n".join(lines) + "\n")
