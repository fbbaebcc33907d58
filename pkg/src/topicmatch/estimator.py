"""Scikit-learn style front door.

``ImagePairMatcher`` wraps dataset -> train -> match behind the familiar
``fit`` / ``predict`` / ``get_params`` surface so the matcher slots into
sklearn-style pipelines and grid searches. ``X`` for ``fit`` is a dataset
manifest (path or object); ``X`` for ``predict`` is a list of image pairs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .checkpoint import load_checkpoint
from .errors import ConfigError
from .model import MatcherConfig, MatcherModel
from .synth import DatasetManifest
from .train import TrainConfig, train
from .validation import as_image, pad_to_multiple


class ImagePairMatcher(BaseEstimator):
    """Trainable detector-free image matcher.

    Parameters mirror :class:`MatcherConfig` / :class:`TrainConfig`;
    ``fit`` trains on a synthetic dataset manifest, ``predict`` returns an
    (M, 5) array ``[xa, ya, xb, yb, confidence]`` per input image pair.
    """

    def __init__(
        self,
        variant: str = "fast",
        num_topics: int = 100,
        num_covisible: int = 8,
        match_threshold: float = 0.2,
        backbone_widths: tuple = (32, 64, 128),
        fine_dim: int = 64,
        lr: float = 0.001,
        epochs: int = 10,
        seed: int = 0,
        train_split: str = "train",
        work_dir: str | None = None,
    ):
        self.variant = variant
        self.num_topics = num_topics
        self.num_covisible = num_covisible
        self.match_threshold = match_threshold
        self.backbone_widths = backbone_widths
        self.fine_dim = fine_dim
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.train_split = train_split
        self.work_dir = work_dir

    def _matcher_config(self) -> MatcherConfig:
        cfg = MatcherConfig(
            variant=self.variant,
            num_topics=self.num_topics,
            num_covisible=self.num_covisible,
            match_threshold=self.match_threshold,
            backbone_widths=tuple(self.backbone_widths),
            fine_dim=self.fine_dim,
        )
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        """Train on a synthetic dataset manifest (path or DatasetManifest)."""
        manifest = X if isinstance(X, DatasetManifest) else DatasetManifest.load(X)
        work_dir = Path(self.work_dir) if self.work_dir else Path(manifest.root) / "estimator_run"
        cfg = TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            seed=self.seed,
            matcher=self._matcher_config(),
            train_split=self.train_split,
            validate_every=0,
        )
        self.report_ = train(manifest, cfg, work_dir)
        self.model_, _, _ = load_checkpoint(self.report_.checkpoint_path)
        self.checkpoint_path_ = self.report_.checkpoint_path
        return self

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "ImagePairMatcher":
        """Wrap an already-trained checkpoint for inference."""
        model, _, header = load_checkpoint(path)
        cfg = model.cfg
        est = cls(
            variant=cfg.variant,
            num_topics=cfg.num_topics,
            num_covisible=cfg.num_covisible,
            match_threshold=cfg.match_threshold,
            backbone_widths=cfg.backbone_widths,
            fine_dim=cfg.fine_dim,
        )
        est.model_ = model
        est.checkpoint_path_ = str(path)
        return est

    def _require_fitted(self) -> MatcherModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise ConfigError("matcher is not fitted; call fit() or from_checkpoint()")
        return model

    def predict(self, X) -> list[np.ndarray]:
        """Match a list of (image_a, image_b) grayscale array pairs."""
        model = self._require_fitted()
        out = []
        for img_a, img_b in X:
            a, dims_a = pad_to_multiple(as_image(img_a))
            b, dims_b = pad_to_multiple(as_image(img_b))
            fine, _ = model.match_images(a, b, match_threshold=self.match_threshold)
            arr = fine.to_numpy()
            keep = (
                (arr[:, 0] < dims_a[1])
                & (arr[:, 1] < dims_a[0])
                & (arr[:, 2] < dims_b[1])
                & (arr[:, 3] < dims_b[0])
            )
            out.append(arr[keep])
        return out

    def transform(self, X) -> list[np.ndarray]:
        return self.predict(X)

    def score(self, X, y=None) -> float:
        """Mean corner-error AUC@5px over a manifest's validation split."""
        from .evaluate import EvalConfig, evaluate

        model = self._require_fitted()
        manifest = X if isinstance(X, DatasetManifest) else DatasetManifest.load(X)
        report = evaluate(manifest, model, EvalConfig(split="val"))
        return report.auc.get("5", 0.0)
