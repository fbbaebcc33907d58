"""Full-model pipeline: composite matching behavior and config guards."""

import numpy as np
import pytest
import torch

from topicmatch.errors import ConfigError
from topicmatch.model import MatcherConfig, build_model


class TestMatcherConfig:
    def test_defaults_validate(self):
        MatcherConfig().validate()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            MatcherConfig.from_dict({"num_topics": 8, "warp_speed": 9})

    def test_invalid_covisible_count(self):
        with pytest.raises(ConfigError):
            MatcherConfig(num_topics=4, num_covisible=5).validate()

    def test_invalid_threshold(self):
        with pytest.raises(ConfigError):
            MatcherConfig(match_threshold=1.0).validate()

    def test_variant_guard(self):
        with pytest.raises(ConfigError):
            MatcherConfig(variant="turbo").validate()

    def test_hash_changes_with_structure(self):
        a = MatcherConfig(num_topics=8, num_covisible=4)
        b = MatcherConfig(num_topics=9, num_covisible=4)
        assert a.hash() != b.hash()
        assert a.hash() == MatcherConfig(num_topics=8, num_covisible=4).hash()


@pytest.fixture(scope="module")
def tiny_models():
    mk = lambda variant: build_model(
        MatcherConfig(
            num_topics=8, num_covisible=4, variant=variant,
            backbone_widths=(8, 16, 32), fine_dim=16,
        ),
        seed=2,
    )
    return {"fast": mk("fast"), "plus": mk("plus")}


class TestCoarsePipeline:
    @pytest.mark.parametrize("variant", ["fast", "plus"])
    def test_identical_images_match_diagonally(self, tiny_models, variant):
        rng = np.random.default_rng(3)
        img = rng.random((64, 64))
        model = tiny_models[variant]
        fine, res = model.match_images(img, img, match_threshold=5e-4)
        assert len(res.matches) > 0
        assert all(i == j for i, j in res.matches.pairs())

    def test_disjoint_noise_with_high_threshold_matches_nothing(self, tiny_models):
        rng = np.random.default_rng(5)
        img_a = rng.random((64, 64))
        img_b = rng.random((64, 64))
        _, res = tiny_models["fast"].match_images(img_a, img_b, match_threshold=0.99)
        assert len(res.matches) <= 1  # an untrained net cannot be this confident

    def test_intermediates_exposed(self, tiny_models):
        rng = np.random.default_rng(7)
        img = rng.random((64, 64))
        model = tiny_models["plus"]
        with torch.no_grad():
            pyr = model.extract(img)
            res = model.match_coarse(pyr, pyr, "eval")
        assert res.confidence.shape == (64, 64)
        assert res.dist_a.theta.shape == (64, 8)
        assert len(res.covisible) == 4
        assert res.pooled_a.local.shape == (8, 32)

    def test_eval_deterministic(self, tiny_models):
        rng = np.random.default_rng(9)
        img_a = rng.random((64, 64))
        img_b = rng.random((64, 64))
        f1, r1 = tiny_models["fast"].match_images(img_a, img_b)
        f2, r2 = tiny_models["fast"].match_images(img_a, img_b)
        assert torch.equal(r1.confidence, r2.confidence)
        assert np.array_equal(f1.to_numpy(), f2.to_numpy())

    def test_same_seed_same_model(self):
        cfg = MatcherConfig(
            num_topics=8, num_covisible=4, backbone_widths=(8, 16, 32), fine_dim=16
        )
        m1 = build_model(cfg, seed=11)
        m2 = build_model(cfg, seed=11)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_fine_outputs_within_image_bounds(self, tiny_models):
        rng = np.random.default_rng(13)
        img = rng.random((64, 64))
        fine, _ = tiny_models["fast"].match_images(img, img, match_threshold=0.01)
        arr = fine.to_numpy()
        if len(arr):
            assert arr[:, :4].min() >= -6.0  # patch overhang at borders
            assert arr[:, :4].max() <= 63 + 6.0
