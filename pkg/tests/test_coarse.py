"""Coarse matching: attention pooling, topic inference, context merging,
dual softmax, and match extraction, each against independent oracles."""

import numpy as np
import pytest
import torch

from topicmatch import coarse as C
from topicmatch.attention import AttentionBlock, MultiHeadAttention, scaled_dot_attention
from topicmatch.errors import EmptyTopic, ShapeError


def numpy_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v recomputed with plain numpy."""
    scores = q @ k.T / np.sqrt(q.shape[-1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    return w @ v


def make_distribution(theta: np.ndarray) -> C.TopicDistribution:
    t = torch.from_numpy(theta)
    img = t.sum(0)
    return C.TopicDistribution(theta=t, image_level=img / img.sum())


class TestAttentionCore:
    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(2, 6))
        k = rng.normal(size=(3, 6))
        v = rng.normal(size=(3, 6))
        got = scaled_dot_attention(
            torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v)
        ).numpy()
        np.testing.assert_allclose(got, numpy_attention(q, k, v), atol=1e-12)

    def test_multihead_matches_per_head_oracle(self):
        rng = np.random.default_rng(1)
        dim, heads = 8, 2
        mha = MultiHeadAttention(dim, heads).double()
        q_in = torch.from_numpy(rng.normal(size=(3, dim)))
        kv_in = torch.from_numpy(rng.normal(size=(5, dim)))
        got = mha(q_in, kv_in).detach().numpy()

        def lin(layer, x):
            return x @ layer.weight.detach().numpy().T + layer.bias.detach().numpy()

        q = lin(mha.proj_q, q_in.numpy())
        k = lin(mha.proj_k, kv_in.numpy())
        v = lin(mha.proj_v, kv_in.numpy())
        dh = dim // heads
        merged = np.concatenate(
            [
                numpy_attention(q[:, h * dh : (h + 1) * dh], k[:, h * dh : (h + 1) * dh],
                                v[:, h * dh : (h + 1) * dh])
                for h in range(heads)
            ],
            axis=1,
        )
        np.testing.assert_allclose(got, lin(mha.proj_out, merged), atol=1e-12)

    def test_attention_of_identical_features_is_that_feature(self):
        # convexity: weights sum to 1, all values equal -> output equals value
        block = AttentionBlock(4, 1)
        block.strip_to_bare_attention()
        f = torch.tensor([[1.0, -2.0, 0.5, 3.0]]).repeat(6, 1)
        queries = torch.randn(3, 4)
        out = block(queries, f)
        np.testing.assert_allclose(out.detach().numpy(), f[:3].numpy(), atol=1e-6)


class TestContextPooling:
    def test_eval_mode_deterministic(self):
        bank = C.TopicBank(5, 8, dropout_rate=0.5)
        torch.nn.init.normal_(bank.embeddings)
        pooler = C.ContextPooler(8, 2)
        feats = torch.randn(11, 8)
        p1 = pooler(bank, feats, train=False)
        p2 = pooler(bank, feats, train=False)
        assert torch.equal(p1.local, p2.local)

    def test_train_dropout_zeroes_and_rescales_rows(self):
        bank = C.TopicBank(64, 4, dropout_rate=0.5)
        with torch.no_grad():
            bank.embeddings.fill_(1.0)
        rows = bank.rows(train=True, generator=torch.Generator().manual_seed(0))
        vals = rows.detach().numpy()
        assert set(np.unique(vals.round(6))) <= {0.0, 2.0}
        assert (vals == 0).any() and (vals == 2.0).any()

    def test_width_mismatch_rejected(self):
        bank = C.TopicBank(4, 8)
        pooler = C.ContextPooler(8, 2)
        with pytest.raises(ShapeError):
            pooler(bank, torch.randn(5, 6))


class TestTopicDistribution:
    def test_uniform_logits_give_uniform_rows(self):
        pooled = C.PooledTopics(local=torch.zeros(5, 8))
        dist = C.infer_topic_distribution(pooled, torch.randn(7, 8))
        np.testing.assert_allclose(dist.theta.numpy(), np.full((7, 5), 0.2), atol=1e-7)

    def test_softmax_saturation_towards_one_hot(self):
        k, d = 4, 8
        pooled_rows = torch.eye(k, d)
        pooled = C.PooledTopics(local=pooled_rows)
        feats = 50.0 * pooled_rows[1].unsqueeze(0)
        dist = C.infer_topic_distribution(pooled, feats)
        expected = np.zeros(k)
        expected[1] = 1.0
        np.testing.assert_allclose(dist.theta[0].numpy(), expected, atol=1e-6)

    def test_rows_and_image_level_are_simplexes(self):
        rng = np.random.default_rng(2)
        pooled = C.PooledTopics(local=torch.from_numpy(rng.normal(size=(6, 8))))
        feats = torch.from_numpy(rng.normal(size=(20, 8)))
        dist = C.infer_topic_distribution(pooled, feats)
        sums = dist.theta.sum(dim=1).numpy()
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert dist.theta.min() >= 0
        assert abs(dist.image_level.sum().item() - 1.0) < 1e-6


class TestCoassignAndCovisible:
    def test_identical_one_hot(self):
        assert C.coassign_probability([1, 0, 0], [1, 0, 0]) == (1.0, 0.0)

    def test_disjoint_one_hot(self):
        assert C.coassign_probability([1, 0, 0], [0, 1, 0]) == (0.0, 1.0)

    def test_uniform_k4(self):
        p_same, p_nan = C.coassign_probability([0.25] * 4, [0.25] * 4)
        assert abs(p_same - 0.25) < 1e-12 and abs(p_nan - 0.75) < 1e-12

    def test_single_support(self):
        one_hot = np.zeros(8)
        one_hot[3] = 1.0
        d = make_distribution(np.tile(one_hot, (4, 1)))
        assert C.covisible_topics(d, d, 1) == [3]

    def test_tie_broken_by_lower_index(self):
        a = make_distribution(np.array([[0.1, 0.4, 0.4, 0.1]]))
        b = make_distribution(np.array([[1.0, 1.0, 1.0, 0.0]]) / 3.0)
        got = C.covisible_topics(a, b, 2)
        assert got == [1, 2]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pa = rng.random(100)
            pb = rng.random(100)
            a = make_distribution((pa / pa.sum())[None, :])
            b = make_distribution((pb / pb.sum())[None, :])
            got = C.covisible_topics(a, b, 8)
            scores = (pa / pa.sum()) * (pb / pb.sum())
            want = sorted(range(100), key=lambda i: (-scores[i], i))[:8]
            assert got == want


class TestAssignTopics:
    def test_one_hot_rows_any_mode(self):
        theta = torch.zeros(4, 5)
        theta[:, 2] = 1.0
        for mode in ("train", "eval"):
            labels = C.assign_topics(theta, mode, torch.Generator().manual_seed(0))
            assert labels.tolist() == [2, 2, 2, 2]

    def test_eval_argmax(self):
        theta = torch.tensor([[0.2, 0.5, 0.3]])
        assert C.assign_topics(theta, "eval").tolist() == [1]

    def test_eval_tie_to_lower_index(self):
        theta = torch.tensor([[0.4, 0.4, 0.2]])
        assert C.assign_topics(theta, "eval").tolist() == [0]

    def test_train_sampling_frequency(self):
        theta = torch.tensor([[0.5, 0.5]]).repeat(10000, 1)
        labels = C.assign_topics(theta, "train", torch.Generator().manual_seed(7))
        freq = labels.float().mean().item()
        assert abs(freq - 0.5) < 0.02


class TestInTopicAugment:
    def _bare_blocks(self, dim):
        sb = AttentionBlock(dim, 1)
        cb = AttentionBlock(dim, 1)
        sb.strip_to_bare_attention()
        cb.strip_to_bare_attention()
        return sb, cb

    def test_two_stage_uniform_attention_oracle(self):
        # all features in one topic; identical features make attention uniform
        # only if values are equal; instead craft equal features per image so
        # self-attention yields the per-image mean and cross the other mean.
        dim = 4
        sb, cb = self._bare_blocks(dim)
        fa = torch.tensor([[1.0, 2.0, 3.0, 4.0]]).repeat(4, 1)
        fb = torch.tensor([[-1.0, 0.5, 2.0, 0.0]]).repeat(4, 1)
        labels = torch.zeros(4, dtype=torch.long)
        with torch.no_grad():
            out_a, out_b, diag = C.in_topic_augment(fa, fb, labels, labels, [0], sb, cb)
        np.testing.assert_allclose(out_a.numpy(), fb.numpy(), atol=1e-6)
        np.testing.assert_allclose(out_b.numpy(), fa.numpy(), atol=1e-6)
        assert diag.skipped_topics == []

    def test_two_stage_order_with_distinct_features(self):
        # oracle recomputes self-mean then cross-attention longhand
        rng = np.random.default_rng(5)
        dim = 4
        sb, cb = self._bare_blocks(dim)
        fa = torch.from_numpy(rng.normal(size=(4, dim))).float()
        fb = torch.from_numpy(rng.normal(size=(4, dim))).float()
        labels = torch.zeros(4, dtype=torch.long)
        with torch.no_grad():
            out_a, _, _ = C.in_topic_augment(fa, fb, labels, labels, [0], sb, cb)
        sa = numpy_attention(fa.numpy(), fa.numpy(), fa.numpy())
        sbv = numpy_attention(fb.numpy(), fb.numpy(), fb.numpy())
        want = numpy_attention(sa, sbv, sbv)
        np.testing.assert_allclose(out_a.numpy(), want, atol=1e-5)

    def test_non_covisible_topic_passes_through_bitwise(self):
        dim = 4
        sb = AttentionBlock(dim, 1)
        cb = AttentionBlock(dim, 1)
        fa = torch.randn(6, dim)
        fb = torch.randn(6, dim)
        labels_a = torch.tensor([0, 0, 1, 1, 2, 2])
        labels_b = torch.tensor([0, 1, 1, 2, 2, 0])
        out_a, out_b, _ = C.in_topic_augment(fa, fb, labels_a, labels_b, [1], sb, cb)
        untouched_a = labels_a != 1
        assert torch.equal(out_a[untouched_a], fa[untouched_a])
        assert not torch.equal(out_a[~untouched_a], fa[~untouched_a])

    def test_singleton_cross_attention_returns_other_feature(self):
        dim = 4
        sb, cb = self._bare_blocks(dim)
        fa = torch.randn(3, dim)
        fb = torch.randn(3, dim)
        labels = torch.tensor([0, 1, 2])
        with torch.no_grad():
            out_a, out_b, _ = C.in_topic_augment(fa, fb, labels, labels, [0, 1, 2], sb, cb)
        # self-attention over a singleton is the identity; cross over a
        # singleton returns the other image's (self-attended) feature
        np.testing.assert_allclose(out_a.numpy(), fb.numpy(), atol=1e-6)
        np.testing.assert_allclose(out_b.numpy(), fa.numpy(), atol=1e-6)

    def test_empty_topic_skipped_and_recorded(self):
        dim = 4
        sb, cb = self._bare_blocks(dim)
        fa = torch.randn(2, dim)
        fb = torch.randn(2, dim)
        out_a, _, diag = C.in_topic_augment(
            fa, fb, torch.tensor([0, 0]), torch.tensor([1, 1]), [0, 1], sb, cb
        )
        assert diag.skipped_topics == [0, 1]
        assert torch.equal(out_a, fa)

    def test_no_covisible_topics_raises(self):
        dim = 4
        sb, cb = self._bare_blocks(dim)
        with pytest.raises(EmptyTopic):
            C.in_topic_augment(
                torch.randn(2, dim), torch.randn(2, dim),
                torch.zeros(2, dtype=torch.long), torch.zeros(2, dtype=torch.long),
                [], sb, cb,
            )


class TestContextMerger:
    def _identity_merger(self, dim):
        merger = C.ContextMerger(dim)
        with torch.no_grad():
            merger.proj.weight.copy_(torch.eye(dim))
            merger.proj.bias.zero_()
            merger.ffn.lin2.weight.zero_()
            merger.ffn.lin2.bias.zero_()
        return merger

    def test_one_hot_theta_adds_that_topic(self):
        dim = 6
        merger = self._identity_merger(dim)
        pooled = C.PooledTopics(local=torch.randn(3, dim))
        feats = torch.randn(4, dim)
        theta = torch.zeros(4, 3)
        theta[:, 2] = 1.0
        merged, context = merger(feats, pooled, theta)
        np.testing.assert_allclose(
            merged.detach().numpy(), (feats + pooled.local[2]).numpy(), atol=1e-6
        )
        np.testing.assert_allclose(context.detach().numpy(),
                                   pooled.local[2].repeat(4, 1).numpy(), atol=1e-7)

    def test_equal_theta_rows_receive_bitwise_equal_context(self):
        dim = 6
        merger = C.ContextMerger(dim)
        pooled = C.PooledTopics(local=torch.randn(5, dim))
        theta_row = torch.softmax(torch.randn(5), dim=0)
        theta = theta_row.repeat(3, 1)
        feats = torch.randn(3, dim)
        _, context = merger(feats, pooled, theta)
        assert torch.equal(context[0], context[1]) and torch.equal(context[1], context[2])

    def test_context_matches_expectation_oracle(self):
        rng = np.random.default_rng(9)
        dim, k, n = 6, 4, 7
        merger = C.ContextMerger(dim)
        pooled = C.PooledTopics(local=torch.from_numpy(rng.normal(size=(k, dim))).float())
        theta_np = rng.dirichlet(np.ones(k), size=n).astype(np.float32)
        feats = torch.from_numpy(rng.normal(size=(n, dim))).float()
        _, context = merger(feats, pooled, torch.from_numpy(theta_np))
        want = np.stack([
            sum(theta_np[i, kk] * pooled.local[kk].numpy() for kk in range(k))
            for i in range(n)
        ])
        np.testing.assert_allclose(context.detach().numpy(), want, atol=1e-6)


class TestDualSoftmax:
    def test_single_entry_is_one(self):
        p = C.dual_softmax(torch.ones(1, 3), torch.ones(1, 3), temperature=0.7)
        np.testing.assert_allclose(p.numpy(), [[1.0]], atol=1e-12)

    def test_matches_scalar_softmax_oracle(self):
        # features engineered so similarities are [[2,0],[0,2]]
        fa = torch.tensor([[np.sqrt(2.0), 0.0], [0.0, np.sqrt(2.0)]])
        p = C.dual_softmax(fa, fa, temperature=1.0).numpy()
        e2 = np.exp(2.0)
        want_corner = (e2 / (e2 + 1.0)) ** 2
        np.testing.assert_allclose(p[0, 0], want_corner, rtol=1e-12)
        np.testing.assert_allclose(p[1, 1], want_corner, rtol=1e-12)

    def test_bounded_by_each_factor(self):
        rng = np.random.default_rng(11)
        fa = torch.from_numpy(rng.normal(size=(6, 4)))
        fb = torch.from_numpy(rng.normal(size=(5, 4)))
        s = (fa @ fb.T / 0.5).numpy()
        p = C.dual_softmax(fa, fb, temperature=0.5).numpy()
        rows = np.exp(s - s.max(1, keepdims=True))
        rows /= rows.sum(1, keepdims=True)
        cols = np.exp(s - s.max(0, keepdims=True))
        cols /= cols.sum(0, keepdims=True)
        assert (p <= np.minimum(rows, cols) + 1e-12).all()
        assert p.min() >= 0 and p.max() <= 1

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ShapeError):
            C.dual_softmax(torch.ones(1, 2), torch.ones(1, 2), temperature=0.0)


def mutual_nn_oracle(p, tau):
    """Double-loop mutual nearest neighbor search."""
    out = []
    for i in range(p.shape[0]):
        j = max(range(p.shape[1]), key=lambda jj: (p[i, jj], -jj))
        i_back = max(range(p.shape[0]), key=lambda ii: (p[ii, j], -ii))
        if i_back == i and p[i, j] >= tau:
            out.append((i, j, p[i, j]))
    return out


class TestExtractCoarseMatches:
    def test_diagonal_dominance(self):
        p = np.array([[0.9, 0.05], [0.05, 0.9]])
        ms = C.extract_coarse_matches(p, 0.2)
        assert ms.pairs() == [(0, 0), (1, 1)]
        np.testing.assert_allclose(ms.confidence, [0.9, 0.9])

    def test_threshold_excludes_everything(self):
        assert len(C.extract_coarse_matches(np.full((4, 4), 0.1), 0.2)) == 0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            p = rng.random((6, 5))
            got = C.extract_coarse_matches(p, 0.3)
            want = mutual_nn_oracle(p, 0.3)
            assert got.pairs() == [(i, j) for i, j, _ in want]

    def test_one_to_one(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            ms = C.extract_coarse_matches(rng.random((8, 8)), 0.05)
            assert len(set(ms.indices_a)) == len(ms)
            assert len(set(ms.indices_b)) == len(ms)
