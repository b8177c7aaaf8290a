import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from extractor.backbone import AttentionPool, ResidualEncoder
from extractor.models import load_variant, pixels_to_tensor


def rand_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_trunk_strides_and_widths(stub):
    mid, final = stub.visual.trunk(pixels_to_tensor(rand_image(64, 96)))
    assert mid.shape == (32, 8, 12)
    assert final.shape == (48, 4, 6)


def test_feature_shapes_and_norms(stub):
    feats = stub.encode_image_features(pixels_to_tensor(rand_image(64, 96)))
    assert feats.mid.shape == (8, 12, 32)
    assert feats.patch.shape == (4, 6, 32)
    assert feats.image_embedding.shape == (32,)
    assert feats.mid.dtype == np.float32 and feats.patch.dtype == np.float32
    assert abs(np.linalg.norm(feats.image_embedding) - 1.0) < 1e-5
    assert feats.stride == 16 and feats.mid_stride == 8


def test_odd_sizes_follow_ceil_chain(stub):
    # conv stride 2, pad 1, kernel 3 halves via ceil at every stage
    mid, final = stub.visual.trunk(pixels_to_tensor(rand_image(66, 50)))
    assert mid.shape[1:] == (9, 7)
    assert final.shape[1:] == (5, 4)


def test_dense_is_value_then_output_projection(stub):
    pool = stub.visual.pool
    fmap = torch.randn(48, 5, 7)
    with torch.no_grad():
        got = pool.dense(fmap)
        tokens = pool._tokens(fmap)
        want = pool.c_proj(pool.v_proj(tokens[1:])).reshape(5, 7, -1)
    assert torch.equal(got, want)


def test_pool_matches_fused_attention_reference(stub):
    # the manual per-head loop must agree with torch's fused implementation
    pool = stub.visual.pool
    fmap = torch.randn(48, 5, 7)
    with torch.no_grad():
        got = pool(fmap)
        x = pool._tokens(fmap)[:, None, :]
        want, _ = F.multi_head_attention_forward(
            x[:1], x, x, 48, pool.heads,
            None, torch.cat([pool.q_proj.bias, pool.k_proj.bias, pool.v_proj.bias]),
            None, None, False, 0.0,
            pool.c_proj.weight, pool.c_proj.bias,
            use_separate_proj_weight=True,
            q_proj_weight=pool.q_proj.weight,
            k_proj_weight=pool.k_proj.weight,
            v_proj_weight=pool.v_proj.weight,
            need_weights=False, training=False)
    assert torch.allclose(got, want[0, 0], atol=1e-5)


def test_positional_table_native_grid_is_identity(stub):
    pool = stub.visual.pool
    assert torch.equal(pool._positional(pool.grid, pool.grid), pool.positional)


def test_positional_resample_keeps_lead_token(stub):
    pool = stub.visual.pool
    table = pool._positional(3, 11)
    assert table.shape == (3 * 11 + 1, 48)
    assert torch.equal(table[0], pool.positional[0])


def test_pool_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        AttentionPool(grid=4, width=10, embed_dim=8, heads=4)


def test_embed_map_unit_norm(stub):
    final = torch.randn(48, 3, 9)
    emb = stub.embed_map(final)
    assert emb.shape == (32,)
    assert abs(np.linalg.norm(emb) - 1.0) < 1e-5


def test_same_seed_same_outputs():
    pix = pixels_to_tensor(rand_image(48, 48, seed=5))
    a = load_variant("stub", seed=11).encode_image_features(pix)
    b = load_variant("stub", seed=11).encode_image_features(pix)
    assert a.patch.tobytes() == b.patch.tobytes()
    assert a.mid.tobytes() == b.mid.tobytes()
    assert a.image_embedding.tobytes() == b.image_embedding.tobytes()


def test_different_seed_different_weights():
    pix = pixels_to_tensor(rand_image(48, 48, seed=5))
    a = load_variant("stub", seed=11).encode_image_features(pix)
    b = load_variant("stub", seed=12).encode_image_features(pix)
    assert a.patch.tobytes() != b.patch.tobytes()


def test_stub_seeding_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.rand(4)
    torch.manual_seed(123)
    load_variant("stub")
    after = torch.rand(4)
    assert torch.equal(before, after)


def test_encoder_trains_flag_off_after_load(stub):
    assert not stub.visual.training
