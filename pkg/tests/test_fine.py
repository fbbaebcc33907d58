"""Fine refinement: cropping, mixer blocks, soft-argmax detection, and
in-patch matching."""

import numpy as np
import pytest
import torch

from topicmatch import fine as F
from topicmatch.backbone import FeaturePyramid
from topicmatch.coarse import CoarseMatchSet
from topicmatch.errors import AllMasked, ShapeError


def make_matches(pairs):
    ia = np.array([p[0] for p in pairs], dtype=np.int64)
    ib = np.array([p[1] for p in pairs], dtype=np.int64)
    return CoarseMatchSet(ia, ib, np.ones(len(pairs)))


def numpy_layernorm(x, weight, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def numpy_gelu_tanh(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


class TestCropPatches:
    def test_interior_match_fully_valid(self):
        rng = np.random.default_rng(0)
        fine_map = torch.from_numpy(rng.normal(size=(16, 16, 3)))
        matches = make_matches([(1 * 4 + 1, 2 * 4 + 3)])  # coarse grids are 4x4
        batch = F.crop_patches(fine_map, fine_map, matches, (4, 4), (4, 4), window=5)
        assert batch.mask_a.all() and batch.mask_b.all()
        # center cell of the A patch equals the map at the upscaled coordinate
        center_cell = batch.patch_a[0, 12]  # row-major center of 5x5
        np.testing.assert_allclose(center_cell.numpy(), fine_map[4, 4].numpy())
        assert tuple(batch.centers_a[0]) == (4, 4)

    def test_corner_match_has_nine_valid_cells(self):
        fine_map = torch.randn(16, 16, 3, dtype=torch.float64)
        matches = make_matches([(0, 0)])
        batch = F.crop_patches(fine_map, fine_map, matches, (4, 4), (4, 4), window=5)
        assert int(batch.mask_a[0].sum()) == 9  # 3x3 in-bounds window at (0, 0)
        masked = batch.patch_a[0][~batch.mask_a[0]]
        assert torch.equal(masked, torch.zeros_like(masked))

    def test_empty_match_set(self):
        fine_map = torch.randn(16, 16, 3)
        batch = F.crop_patches(fine_map, fine_map, CoarseMatchSet.empty(), (4, 4), (4, 4), 5)
        assert len(batch) == 0

    def test_even_window_rejected(self):
        fine_map = torch.randn(16, 16, 3)
        with pytest.raises(ShapeError):
            F.crop_patches(fine_map, fine_map, make_matches([(5, 5)]), (4, 4), (4, 4), 4)


class TestMixerBlock:
    def test_zero_weights_pass_through(self):
        block = F.TokenChannelMixer(9, 6)
        with torch.no_grad():
            for lin in (block.tok_in, block.tok_out, block.ch_in, block.ch_out):
                lin.weight.zero_()
                lin.bias.zero_()
        x = torch.randn(4, 9, 6)
        assert torch.equal(block(x), x)

    def test_single_token_channel_mixing_matches_mlp_oracle(self):
        block = F.TokenChannelMixer(1, 6).double()
        with torch.no_grad():  # silence token mixing
            block.tok_in.weight.zero_()
            block.tok_in.bias.zero_()
            block.tok_out.weight.zero_()
            block.tok_out.bias.zero_()
        x = np.random.default_rng(1).normal(size=(1, 1, 6))
        got = block(torch.from_numpy(x)).detach().numpy()
        ln = numpy_layernorm(
            x, block.norm_ch.weight.detach().numpy(), block.norm_ch.bias.detach().numpy()
        )
        hidden = numpy_gelu_tanh(
            ln @ block.ch_in.weight.detach().numpy().T + block.ch_in.bias.detach().numpy()
        )
        want = x + hidden @ block.ch_out.weight.detach().numpy().T + block.ch_out.bias.detach().numpy()
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_channel_permutation_equivariance(self):
        dim, tokens = 6, 4
        block = F.TokenChannelMixer(tokens, dim).double()
        perm = np.random.default_rng(2).permutation(dim)
        permuted = F.TokenChannelMixer(tokens, dim).double()
        with torch.no_grad():
            permuted.load_state_dict(block.state_dict())
            permuted.norm_tok.weight.copy_(block.norm_tok.weight[perm])
            permuted.norm_tok.bias.copy_(block.norm_tok.bias[perm])
            permuted.norm_ch.weight.copy_(block.norm_ch.weight[perm])
            permuted.norm_ch.bias.copy_(block.norm_ch.bias[perm])
            permuted.ch_in.weight.copy_(block.ch_in.weight[:, perm])
            permuted.ch_out.weight.copy_(block.ch_out.weight[perm])
            permuted.ch_out.bias.copy_(block.ch_out.bias[perm])
        x = torch.randn(1, tokens, dim, dtype=torch.float64)
        base = block(x).detach().numpy()
        swapped = permuted(x[..., perm]).detach().numpy()
        np.testing.assert_allclose(swapped, base[..., perm], atol=1e-10)

    def test_token_count_mismatch_rejected(self):
        block = F.TokenChannelMixer(9, 6)
        with pytest.raises(ShapeError):
            block(torch.randn(2, 8, 6))


class TestExpectations:
    def test_one_hot_heat_returns_that_cell(self):
        w = 5
        grid = F.grid_map(w)
        heat = torch.zeros(w * w, dtype=torch.float64)
        cell = 3 * w + 2  # (x=2, y=3)
        heat[cell] = 1.0
        patch = torch.randn(w * w, 7, dtype=torch.float64)
        coords, desc = F.expectation_over_heat(heat, grid, patch)
        np.testing.assert_allclose(coords.numpy(), [2.0, 3.0])
        np.testing.assert_allclose(desc.numpy(), patch[cell].numpy())

    def test_uniform_heat_returns_centroid(self):
        w = 5
        heat = torch.full((w * w,), 1.0 / (w * w), dtype=torch.float64)
        coords, _ = F.expectation_over_heat(heat, F.grid_map(w), torch.randn(w * w, 3, dtype=torch.float64))
        np.testing.assert_allclose(coords.numpy(), [2.0, 2.0], atol=1e-12)

    def test_soft_argmax_approaches_argmax_at_low_temperature(self):
        rng = np.random.default_rng(0)
        w = 5
        grid = F.grid_map(w)
        for _ in range(100):
            scores = torch.from_numpy(50.0 * rng.random(w * w))
            mask = torch.ones(w * w, dtype=torch.bool)
            heat = F.heat_from_scores(scores, mask, temperature=1e-3)
            coords, _ = F.expectation_over_heat(heat, grid, torch.zeros(w * w, 1, dtype=torch.float64))
            best = int(np.argmax(scores.numpy()))
            want = np.array([best % w, best // w], dtype=np.float64)
            assert np.abs(coords.numpy() - want).max() < 1e-3

    def test_heat_is_simplex_with_masked_zeros(self):
        rng = np.random.default_rng(4)
        scores = torch.from_numpy(rng.normal(size=9))
        mask = torch.tensor([1, 1, 0, 1, 0, 1, 1, 1, 0], dtype=torch.bool)
        heat = F.heat_from_scores(scores, mask, temperature=0.1)
        assert abs(heat.sum().item() - 1.0) < 1e-6
        assert heat[~mask].abs().max() == 0.0

    def test_all_masked_raises(self):
        with pytest.raises(AllMasked):
            F.heat_from_scores(torch.zeros(9), torch.zeros(9, dtype=torch.bool), 0.1)


class TestMatchInPatch:
    def test_saturated_similarity_picks_matching_cell(self):
        w, d = 5, 8
        patch = torch.zeros(w * w, d, dtype=torch.float64)
        patch[7] = 50.0 * torch.ones(d)
        desc = patch[7].clone()
        mask = torch.ones(w * w, dtype=torch.bool)
        coords, _, conf = F.match_in_patch(desc, patch, mask, w)
        np.testing.assert_allclose(coords.numpy(), [7 % w, 7 // w], atol=1e-3)
        assert conf.item() > 0.99

    def test_identical_cells_give_centroid_and_uniform_confidence(self):
        w, d = 5, 4
        patch = torch.ones(w * w, d, dtype=torch.float64)
        mask = torch.ones(w * w, dtype=torch.bool)
        mask[20:] = False
        coords, _, conf = F.match_in_patch(torch.ones(d, dtype=torch.float64), patch, mask, w)
        valid_grid = F.grid_map(w)[mask]
        np.testing.assert_allclose(coords.numpy(), valid_grid.mean(0).numpy(), atol=1e-12)
        np.testing.assert_allclose(conf.item(), 1.0 / 20, atol=1e-12)

    def test_single_valid_cell(self):
        w, d = 5, 4
        patch = torch.randn(w * w, d, dtype=torch.float64)
        mask = torch.zeros(w * w, dtype=torch.bool)
        mask[13] = True
        coords, desc, conf = F.match_in_patch(patch[2], patch, mask, w)
        np.testing.assert_allclose(coords.numpy(), [13 % w, 13 // w])
        assert conf.item() == 1.0
        np.testing.assert_allclose(desc.numpy(), patch[13].numpy())


def random_refiner(dim, window=5, seed=0):
    from topicmatch.backbone import init_parameters

    return init_parameters(F.FineRefiner(dim, window), seed).double()


def make_pyramid(rng, grid=(4, 4), dim=8):
    coarse = torch.from_numpy(rng.normal(size=(grid[0], grid[1], 16)))
    fine = torch.from_numpy(rng.normal(size=(grid[0] * 4, grid[1] * 4, dim)))
    return FeaturePyramid(coarse=coarse, fine=fine)


class TestRefineMatches:
    def test_empty_coarse_set_gives_empty_output(self):
        rng = np.random.default_rng(5)
        pyr = make_pyramid(rng)
        out = F.refine_matches(pyr, pyr, CoarseMatchSet.empty(), random_refiner(8))
        assert len(out) == 0

    def test_self_match_symmetry_on_identical_patches(self):
        # identical images and a detector that sharply selects one cell:
        # the similarity stage must land on the same point (within 0.5 px).
        # production-width channels: the similarity peak's sharpness is
        # capped at exp(sqrt(D)), so narrow test widths would smear it
        dim, w = 32, 5
        refiner = random_refiner(dim, window=w, seed=1)
        with torch.no_grad():
            for block in list(refiner.shared) + list(refiner.detector_mixers):
                for lin in (block.tok_in, block.tok_out, block.ch_in, block.ch_out):
                    lin.weight.zero_()
                    lin.bias.zero_()
            target = torch.zeros(dim, dtype=torch.float64)
            target[3] = 1.0
            # score = <w_head, LN(cell)>; LN of the one-hot direction is
            # largest for the cell aligned with it
            refiner.detector_head.weight.copy_(target.view(1, -1))
            refiner.detector_head.bias.zero_()
        rng = np.random.default_rng(6)
        fine = torch.from_numpy(0.05 * rng.normal(size=(16, 16, dim)))
        fine[5, 6] += 4.0 * torch.eye(dim, dtype=torch.float64)[3]  # distinctive cell
        pyr = FeaturePyramid(coarse=torch.zeros(4, 4, 4, dtype=torch.float64), fine=fine)
        matches = make_matches([(1 * 4 + 1, 1 * 4 + 1)])  # patch centered at fine (4, 4)
        out = F.refine_matches(pyr, pyr, matches, refiner)
        assert len(out) == 1
        xa = out.xy_a.detach().numpy()[0]
        xb = out.xy_b.detach().numpy()[0]
        np.testing.assert_allclose(xa, [2 * 6, 2 * 5], atol=0.5)  # the planted cell
        assert np.abs(xa - xb).max() < 0.5  # both sides settle on the same point

    def test_output_count_and_sources(self):
        rng = np.random.default_rng(7)
        pyr_a = make_pyramid(rng)
        pyr_b = make_pyramid(rng)
        matches = make_matches([(0, 5), (6, 10), (15, 15)])
        out = F.refine_matches(pyr_a, pyr_b, matches, random_refiner(8, seed=2))
        assert len(out) <= len(matches)
        assert out.source_a.tolist() == [0, 6, 15]
        assert out.source_b.tolist() == [5, 10, 15]

    def test_coordinates_stay_in_patch_hull(self):
        rng = np.random.default_rng(8)
        pyr_a = make_pyramid(rng)
        pyr_b = make_pyramid(rng)
        matches = make_matches([(0, 0), (5, 5), (15, 12)])
        out = F.refine_matches(pyr_a, pyr_b, matches, random_refiner(8, seed=3))
        centers = out.source_a
        for i in range(len(out)):
            ca = np.array([(centers[i] % 4) * 4, (centers[i] // 4) * 4]) * 2
            assert np.all(np.abs(out.xy_a.detach().numpy()[i] - ca) <= 2 * 2 + 1e-9)

    def test_confidence_is_peak_heat(self):
        rng = np.random.default_rng(9)
        pyr = make_pyramid(rng)
        matches = make_matches([(5, 5)])
        out = F.refine_matches(pyr, pyr, matches, random_refiner(8, seed=4))
        assert 0.0 < out.confidence.item() <= 1.0
