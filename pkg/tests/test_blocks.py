import numpy as np
import pytest

from visarch import blocks as B
from visarch import tensor as T
from visarch.blocks import BlockSpec, EmbedSpec, conv_mlp_hidden
from visarch.tensor import ParamStore, ShapeError, Tensor, backward


def build_block(spec, norm="batch", style="pre_norm", rel_pos=False, window=None,
                seed=0, dtype=np.float64):
    store, buffers = ParamStore(), {}
    rng = np.random.default_rng(seed)
    if spec.kind == "bottleneck":
        B.init_bottleneck(store, buffers, rng, spec, norm, "b", style, dtype)
    elif spec.kind == "mlp":
        B.init_mlp(store, buffers, rng, spec, norm, "b", dtype)
    else:
        B.init_attention_block(store, buffers, rng, spec, norm, "b", rel_pos, window, dtype)
    return store, buffers


class TestConvMlpHidden:
    def test_reference_widths(self):
        assert conv_mlp_hidden(192, 768) == 160
        assert conv_mlp_hidden(384, 1536) == 321
        assert conv_mlp_hidden(768, 3072) == 643

    def test_maximal_under_budget(self):
        for c, g in [(192, 1), (384, 1), (768, 1), (96, 8), (48, 1), (256, 4)]:
            hid = 4 * c
            m = conv_mlp_hidden(c, hid, g)
            budget = 2 * c * hid
            assert m % g == 0
            assert 2 * c * m + 9 * m * m // g <= budget
            assert 2 * c * (m + g) + 9 * (m + g) ** 2 // g > budget

    def test_macs_within_five_percent_of_plain(self):
        for c in (192, 384, 768, 48):
            spec = BlockSpec("mlp", c, hidden=4 * c)
            plain = sum(m for _, m, _ in B.mlp_rows(spec, 196, "b"))
            conv = sum(m for _, m, _ in B.mlp_rows(
                BlockSpec("mlp", c, hidden=4 * c, use_3x3=True), 196, "b"))
            assert conv <= plain
            assert conv >= 0.95 * plain


class TestStemAndEmbed:
    def test_stem_halves_resolution(self, rng):
        spec = EmbedSpec(7, 2, 16, padding=3, norm_after=True)
        store, buffers = ParamStore(), {}
        B.init_stem(store, buffers, np.random.default_rng(0), spec, 3, "stem", np.float32)
        x = Tensor(rng.normal(size=(1, 3, 224, 224)).astype(np.float32))
        out = B.stem_forward(x, spec, store, buffers, "stem", training=False)
        assert out.dims == (1, 16, 112, 112)
        assert (out.data >= 0).all()

    def test_patch_embed_equals_flatten_linear(self, rng):
        spec = EmbedSpec(4, 4, 9)
        store, buffers = ParamStore(), {}
        B.init_patch_embed(store, buffers, np.random.default_rng(1), spec, 6, "e", np.float64)
        x = rng.normal(size=(2, 6, 8, 8))
        out = B.patch_embed_forward(Tensor(x, dtype=np.float64), spec, store, buffers,
                                    "e", training=False).data
        # oracle: extract patches, flatten, apply as a linear layer
        w = store["e.conv.w"].data.reshape(9, -1)
        b = store["e.conv.b"].data
        for i in range(2):
            for j in range(2):
                patch = x[:, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4].reshape(2, -1)
                np.testing.assert_allclose(out[:, :, i, j], patch @ w.T + b, atol=1e-10)

    def test_patch_embed_divisibility_error(self, rng):
        spec = EmbedSpec(4, 4, 8)
        store, buffers = ParamStore(), {}
        B.init_patch_embed(store, buffers, np.random.default_rng(0), spec, 3, "e", np.float32)
        with pytest.raises(ShapeError, match="not divisible"):
            B.patch_embed_forward(Tensor(np.zeros((1, 3, 9, 9))), spec, store, buffers,
                                  "e", training=False)

    def test_embed_norm_after_has_no_conv_bias(self):
        store, buffers = ParamStore(), {}
        B.init_patch_embed(store, buffers, np.random.default_rng(0),
                           EmbedSpec(2, 2, 8, norm_after=True), 4, "e", np.float32)
        assert "e.conv.b" not in store
        assert "e.norm.gamma" in store and "e.norm.mean" in buffers


class TestBottleneck:
    def test_preserves_shape(self, rng):
        spec = BlockSpec("bottleneck", 96, hidden=192, groups=8)
        store, buffers = build_block(spec)
        x = Tensor(rng.normal(size=(2, 96, 7, 7)), dtype=np.float64)
        out = B.bottleneck_forward(x, spec, store, buffers, "b", "batch", "pre_norm", True)
        assert out.dims == (2, 96, 7, 7)

    def test_zero_final_conv_is_identity(self, rng):
        spec = BlockSpec("bottleneck", 8, hidden=16, groups=2)
        store, buffers = build_block(spec)
        store["b.conv3.w"].data[:] = 0.0
        store["b.conv3.b"].data[:] = 0.0
        x = rng.normal(size=(2, 8, 3, 3))
        out = B.bottleneck_forward(Tensor(x, dtype=np.float64), spec, store, buffers,
                                   "b", "batch", "pre_norm", True)
        np.testing.assert_array_equal(out.data, x)

    def test_group_width_error(self):
        with pytest.raises(ShapeError):
            build_block(BlockSpec("bottleneck", 8, hidden=15, groups=2))

    def test_post_norm_strided_downsamples(self, rng):
        spec = BlockSpec("bottleneck", 32, hidden=8, groups=1, stride=2, in_channels=16)
        store, buffers = build_block(spec, style="post_norm")
        assert "b.proj.w" in store
        x = Tensor(rng.normal(size=(2, 16, 8, 8)), dtype=np.float64)
        out = B.bottleneck_forward(x, spec, store, buffers, "b", "batch", "post_norm", True)
        assert out.dims == (2, 32, 4, 4)
        assert (out.data >= 0).all()

    def test_post_norm_identity_block_has_no_proj(self):
        spec = BlockSpec("bottleneck", 16, hidden=4, groups=1)
        store, _ = build_block(spec, style="post_norm")
        assert "b.proj.w" not in store

    def test_fd_grads(self, rng):
        spec = BlockSpec("bottleneck", 6, hidden=12, groups=2)
        store, buffers = build_block(spec)
        x = Tensor(rng.normal(size=(2, 6, 3, 3)), dtype=np.float64)

        def loss():
            out = B.bottleneck_forward(x, spec, store, buffers, "b", "batch", "pre_norm", True)
            return T.sum_all(T.mul(out, out))

        assert_fd(loss, store)


def assert_fd(loss, store, samples=3, tol=1e-4):
    # second, smaller step resolves relu-kink straddles; wrong grads fail both
    store.zero_grads()
    backward(loss())
    rng = np.random.default_rng(7)
    for path, t in store.items():
        for i in rng.choice(t.data.size, size=min(samples, t.data.size), replace=False):
            ana = t.grad.reshape(-1)[int(i)] if t.grad is not None else 0.0
            rels = []
            for h in (1e-5, 1e-7):
                num = T.finite_diff_grad(loss, store, path, int(i), h=h)
                rels.append(abs(ana - num) / max(abs(ana), abs(num), 1e-3))
                if rels[-1] < tol:
                    break
            assert min(rels) < tol, f"{path}[{i}]: rel={min(rels):.3e}"


class TestMlpBlock:
    def test_plain_shapes_and_identity(self, rng):
        spec = BlockSpec("mlp", 12, hidden=48)
        store, buffers = build_block(spec, norm="layer")
        store["b.fc2.w"].data[:] = 0.0
        store["b.fc2.b"].data[:] = 0.0
        x = rng.normal(size=(1, 12, 4, 4))
        out = B.mlp_forward(Tensor(x, dtype=np.float64), spec, store, buffers, "b", "layer", False)
        np.testing.assert_array_equal(out.data, x)

    def test_use_3x3_param_paths(self):
        spec = BlockSpec("mlp", 16, hidden=64, use_3x3=True)
        store, _ = build_block(spec)
        m = conv_mlp_hidden(16, 64, 1)
        assert store["b.conv.w"].dims == (m, m, 3, 3)
        assert store["b.fc1.w"].dims == (m, 16, 1, 1)

    def test_fd_grads_with_conv(self, rng):
        spec = BlockSpec("mlp", 8, hidden=32, use_3x3=True, groups=2)
        store, buffers = build_block(spec)
        x = Tensor(rng.normal(size=(1, 8, 3, 3)), dtype=np.float64)

        def loss():
            return T.sum_all(B.mlp_forward(x, spec, store, buffers, "b", "batch", True))

        assert_fd(loss, store)


class TestAttentionBlock:
    def test_zeroed_projections_are_identity(self, rng):
        spec = BlockSpec("attention", 12, hidden=24, heads=2, head_dim=6, attn_inner=12)
        store, buffers = build_block(spec, norm="layer")
        for p in ("b.attn.proj.w", "b.attn.proj.b", "b.mlp.fc2.w", "b.mlp.fc2.b"):
            store[p].data[:] = 0.0
        x = rng.normal(size=(2, 12, 3, 3))
        out = B.attention_block_forward(Tensor(x, dtype=np.float64), spec, store, buffers,
                                        "b", "layer", False)
        np.testing.assert_array_equal(out.data, x)

    def test_rel_pos_table_created_with_window(self):
        spec = BlockSpec("attention", 8, hidden=16, heads=2, head_dim=4, attn_inner=8)
        store, _ = build_block(spec, rel_pos=True, window=(3, 3))
        assert store["b.attn.relpos"].dims == (25, 2)

    def test_fd_grads(self, rng):
        spec = BlockSpec("attention", 6, hidden=12, heads=2, head_dim=3, attn_inner=6)
        store, buffers = build_block(spec, norm="batch", rel_pos=True, window=(2, 2))
        x = Tensor(rng.normal(size=(2, 6, 2, 2)), dtype=np.float64)

        def loss():
            out = B.attention_block_forward(x, spec, store, buffers, "b", "batch", True)
            return T.sum_all(T.mul(out, out))

        assert_fd(loss, store)

    def test_halved_inner_width_runs(self, rng):
        spec = BlockSpec("attention", 16, hidden=64, heads=2, head_dim=4, attn_inner=8)
        store, buffers = build_block(spec)
        assert store["b.attn.qkv.w"].dims == (24, 16)
        x = Tensor(rng.normal(size=(1, 16, 2, 2)), dtype=np.float64)
        out = B.attention_block_forward(x, spec, store, buffers, "b", "batch", True)
        assert out.dims == (1, 16, 2, 2)


class TestHead:
    def test_gap_identity_fc_pools(self, rng):
        store = ParamStore()
        B.init_head(store, np.random.default_rng(0), 4, 4, "head", np.float64)
        store["head.fc.w"].data[:] = np.eye(4)
        x = rng.normal(size=(2, 4, 3, 3))
        out = B.head_forward(Tensor(x, dtype=np.float64), "gap", store, "head").data
        np.testing.assert_allclose(out, x.mean(axis=(2, 3)), atol=1e-12)

    def test_cls_mode_reads_first_token(self, rng):
        store = ParamStore()
        B.init_head(store, np.random.default_rng(0), 4, 4, "head", np.float64)
        store["head.fc.w"].data[:] = np.eye(4)
        x = rng.normal(size=(2, 4, 5, 1))
        out = B.head_forward(Tensor(x, dtype=np.float64), "cls_token", store, "head").data
        np.testing.assert_allclose(out, x[:, :, 0, 0], atol=1e-12)

    def test_gap_spatial_permutation_invariance(self, rng):
        store = ParamStore()
        B.init_head(store, np.random.default_rng(0), 3, 10, "head", np.float64)
        x = rng.normal(size=(1, 3, 4, 4))
        perm = rng.permutation(16)
        xp = x.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
        a = B.head_forward(Tensor(x, dtype=np.float64), "gap", store, "head").data
        b = B.head_forward(Tensor(xp, dtype=np.float64), "gap", store, "head").data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_unknown_mode(self):
        store = ParamStore()
        B.init_head(store, np.random.default_rng(0), 4, 10, "head", np.float32)
        with pytest.raises(ValueError):
            B.head_forward(Tensor(np.zeros((1, 4, 2, 2))), "max", store, "head")


class TestRowCounting:
    def test_one_by_one_conv_row(self):
        rows = B.mlp_rows(BlockSpec("mlp", 64, hidden=128), 196, "b")
        fc1 = dict((p, (m, n)) for p, m, n in rows)["b.fc1"]
        assert fc1 == (196 * 64 * 128, 64 * 128 + 128)

    def test_attention_rows_hand_check(self):
        spec = BlockSpec("attention", 384, hidden=1536, heads=6, head_dim=64, attn_inner=384)
        rows = dict((p, (m, n)) for p, m, n in B.attention_block_rows(spec, 196, "b"))
        assert rows["b.attn.qkv"] == (196 * 384 * 1152, 1152 * 384 + 1152)
        assert rows["b.attn.scores"] == (196 * 196 * 384, 0)
        assert rows["b.attn.apply"] == (196 * 196 * 384, 0)
        assert rows["b.attn.proj"] == (196 * 384 * 384, 384 * 384 + 384)
        assert rows["b.norm1"] == (0, 768)

    def test_norms_and_bias_cost_zero_macs(self):
        spec = BlockSpec("attention", 64, hidden=256, heads=2, head_dim=32, attn_inner=64)
        rows = B.attention_block_rows(spec, 49, "b", rel_pos=True, window=(7, 7))
        by_path = dict((p, m) for p, m, _ in rows)
        assert by_path["b.norm1"] == 0 and by_path["b.norm2"] == 0
        assert by_path["b.attn.relpos"] == 0
        # qkv MACs have no bias term
        assert by_path["b.attn.qkv"] == 49 * 64 * 192
