"""Attention blocks, encodings, and the shared feature extractor."""

import numpy as np
import pytest

from attnfield import nn
from attnfield import tensor as T


def _attn(store, d=8, heads=2, d_kk=None, d_v=None, prefix="a"):
    return nn.init_attention(store, prefix, d, d_kk or d, d_v or d,
                             heads, d // heads)


class TestMultiHeadAttention:
    def test_output_shape(self):
        store = T.ParamStore(0)
        params = _attn(store)
        rng = np.random.default_rng(0)
        q = T.DiffTensor(rng.standard_normal((3, 5, 8)))
        out = nn.multi_head_attention(q, q, q, params)
        assert out.shape == (3, 5, 8)

    def test_heads_times_dhead_must_match_width(self):
        store = T.ParamStore(0)
        with pytest.raises(ValueError):
            nn.init_attention(store, "bad", 8, 8, 8, heads=3, d_head=3)

    def test_key_value_token_mismatch(self):
        store = T.ParamStore(0)
        params = _attn(store)
        rng = np.random.default_rng(1)
        q = T.DiffTensor(rng.standard_normal((2, 8)))
        k = T.DiffTensor(rng.standard_normal((4, 8)))
        v = T.DiffTensor(rng.standard_normal((3, 8)))
        with pytest.raises(ValueError):
            nn.multi_head_attention(q, k, v, params)

    def test_masked_keys_do_not_influence_output(self):
        store = T.ParamStore(3)
        params = _attn(store)
        rng = np.random.default_rng(3)
        q = T.DiffTensor(rng.standard_normal((2, 8)))
        kv = rng.standard_normal((5, 8))
        mask = np.array([True, True, False, True, False])
        out1 = nn.multi_head_attention(q, T.DiffTensor(kv), T.DiffTensor(kv),
                                       params, key_mask=mask)
        kv2 = kv.copy()
        kv2[~mask] = 1e3 * rng.standard_normal((2, 8))  # junk in masked rows
        out2 = nn.multi_head_attention(q, T.DiffTensor(kv2), T.DiffTensor(kv2),
                                       params, key_mask=mask)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-9)

    def test_key_permutation_invariance_single_query(self):
        store = T.ParamStore(4)
        params = _attn(store)
        rng = np.random.default_rng(4)
        q = T.DiffTensor(rng.standard_normal((1, 8)))
        kv = rng.standard_normal((6, 8))
        base = nn.multi_head_attention(q, T.DiffTensor(kv), T.DiffTensor(kv), params)
        perm = rng.permutation(6)
        shuf = nn.multi_head_attention(q, T.DiffTensor(kv[perm]),
                                       T.DiffTensor(kv[perm]), params)
        np.testing.assert_allclose(base.data, shuf.data, atol=1e-12)

    def test_batched_matches_per_item(self):
        store = T.ParamStore(5)
        params = _attn(store, d=8, heads=4)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3, 8))
        batched = nn.multi_head_attention(T.DiffTensor(x), T.DiffTensor(x),
                                          T.DiffTensor(x), params)
        for i in range(4):
            xi = T.DiffTensor(x[i])
            one = nn.multi_head_attention(xi, xi, xi, params)
            np.testing.assert_allclose(batched.data[i], one.data, atol=1e-12)

    def test_score_scale_uses_model_width(self):
        # With wq = wk = I on a 1-head width-4 layout, scores are
        # (q . k) / sqrt(4): verify against a hand-rolled computation.
        store = T.ParamStore(0)
        params = nn.init_attention(store, "probe", 4, 4, 4, heads=1, d_head=4)
        params.wq.data[:] = np.eye(4)
        params.wk.data[:] = np.eye(4)
        params.wv.data[:] = np.eye(4)
        params.wo.data[:] = np.eye(4)
        rng = np.random.default_rng(6)
        q = rng.standard_normal((1, 4))
        kv = rng.standard_normal((3, 4))
        out = nn.multi_head_attention(T.DiffTensor(q), T.DiffTensor(kv),
                                      T.DiffTensor(kv), params)
        scores = (q @ kv.T) / np.sqrt(4.0)
        e = np.exp(scores - scores.max())
        expect = (e / e.sum()) @ kv
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_gradients_against_finite_differences(self):
        store = T.ParamStore(7)
        params = _attn(store, d=4, heads=2)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4))

        def f(s):
            out = nn.multi_head_attention(T.DiffTensor(x), T.DiffTensor(x),
                                          T.DiffTensor(x), params)
            return T.tsum(out * np.arange(12.0).reshape(3, 4))

        assert T.finite_diff_check(f, store) < 1e-5


class TestEncoderBlock:
    def test_self_attention_shape_preserved(self):
        store = T.ParamStore(0)
        blk = nn.init_block(store, "blk", 8, 16, 2, 4)
        rng = np.random.default_rng(0)
        x = T.DiffTensor(rng.standard_normal((5, 3, 8)))
        out = nn.encoder_block(x, blk)
        assert out.shape == (5, 3, 8)

    def test_cross_attention_uses_fixed_kv(self):
        store = T.ParamStore(1)
        blk = nn.init_block(store, "blk", 8, 16, 2, 4, d_kk=10, d_v=6)
        rng = np.random.default_rng(1)
        q = T.DiffTensor(rng.standard_normal((2, 1, 8)))
        k = T.DiffTensor(rng.standard_normal((2, 4, 10)))
        v = T.DiffTensor(rng.standard_normal((2, 4, 6)))
        out = nn.encoder_block(q, blk, cross=(k, v))
        assert out.shape == (2, 1, 8)

    def test_block_gradients(self):
        store = T.ParamStore(2)
        blk = nn.init_block(store, "blk", 4, 8, 2, 2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 4))

        def f(s):
            return T.tsum(nn.encoder_block(T.DiffTensor(x), blk) * 0.3)

        assert T.finite_diff_check(f, store) < 1e-5

    def test_output_tokens_are_normalized(self):
        store = T.ParamStore(3)
        blk = nn.init_block(store, "blk", 8, 16, 2, 4)
        blk.ln2_gain.data[:] = 1.0
        blk.ln2_bias.data[:] = 0.0
        rng = np.random.default_rng(3)
        out = nn.encoder_block(T.DiffTensor(rng.standard_normal((4, 3, 8))), blk)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)


class TestEncodings:
    def test_positional_encoding_shape_and_range(self):
        pe = nn.positional_encoding(10, 16)
        assert pe.shape == (10, 16)
        assert np.all(np.abs(pe) <= 1.0)

    def test_positional_encoding_first_row(self):
        pe = nn.positional_encoding(4, 8)
        np.testing.assert_allclose(pe[0, 0::2], 0.0, atol=1e-15)
        np.testing.assert_allclose(pe[0, 1::2], 1.0, atol=1e-15)

    def test_positional_rows_distinct(self):
        pe = nn.positional_encoding(64, 16)
        d = np.linalg.norm(pe[:, None] - pe[None, :], axis=-1)
        assert d[~np.eye(64, dtype=bool)].min() > 1e-3

    def test_sinusoid_rows_continuous_positions(self):
        vals = np.array([0.25, 1.75])
        rows = nn.sinusoid_rows(vals, 6, scale=2.0)
        np.testing.assert_allclose(rows[0, 0], np.sin(0.5))
        np.testing.assert_allclose(rows[1, 1], np.cos(3.5))

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            nn.sinusoid_rows(np.zeros(3), 7)

    def test_frequency_embedding_layout(self):
        x = np.array([[0.5, -0.25]])
        emb = nn.frequency_embedding(x, 2)
        assert emb.shape == (1, 8)
        np.testing.assert_allclose(emb[0, 0], np.sin(np.pi * 0.5))
        np.testing.assert_allclose(emb[0, 1], np.sin(np.pi * -0.25))
        np.testing.assert_allclose(emb[0, 4], np.sin(2 * np.pi * 0.5), atol=1e-15)

    def test_frequency_embedding_bounded(self):
        rng = np.random.default_rng(0)
        emb = nn.frequency_embedding(rng.uniform(-4, 4, (10, 3)), 5)
        assert emb.shape == (10, 30)
        assert np.all(np.abs(emb) <= 1.0 + 1e-12)

    def test_frequency_embedding_needs_levels(self):
        with pytest.raises(ValueError):
            nn.frequency_embedding(np.zeros(3), 0)


class TestFeatureExtractor:
    def test_output_resolution_preserved(self):
        store = T.ParamStore(0)
        params = nn.init_feature_extractor(store, "fx", c_out=6, hidden=4)
        rng = np.random.default_rng(0)
        imgs = rng.random((2, 9, 7, 3))
        out = nn.extract_features(imgs, params)
        assert out.shape == (2, 9, 7, 6)

    def test_view_shared_weights(self):
        store = T.ParamStore(1)
        params = nn.init_feature_extractor(store, "fx", c_out=4, hidden=4)
        rng = np.random.default_rng(1)
        img = rng.random((5, 5, 3))
        stacked = nn.extract_features(np.stack([img, img]), params)
        np.testing.assert_allclose(stacked.data[0], stacked.data[1], atol=1e-14)

    def test_rejects_non_rgb(self):
        store = T.ParamStore(2)
        params = nn.init_feature_extractor(store, "fx", c_out=4)
        with pytest.raises(ValueError):
            nn.extract_features(np.zeros((1, 4, 4, 1)), params)

    def test_gradients(self):
        store = T.ParamStore(3)
        params = nn.init_feature_extractor(store, "fx", c_out=2, hidden=3)
        rng = np.random.default_rng(3)
        imgs = rng.random((1, 4, 4, 3))

        def f(s):
            return T.tsum(nn.extract_features(imgs, params) * 0.1)

        assert T.finite_diff_check(f, store) < 1e-5
