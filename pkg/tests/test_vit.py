"""ViT backbone: patch embedding, attention (vs per-head loop oracle),
residual blocks, pooling, and the attention-equivariance invariant."""

import numpy as np
import pytest

from qviton import tensor as T
from qviton.errors import ConfigError, DimensionError
from qviton.tensor import ParamStore, Tensor
from qviton.verify import gradcheck, naive_attention
from qviton.vit import EncoderBlock, ViTBackbone, ViTConfig


def make_backbone(config=None, seed=3, dtype=np.float32):
    store = ParamStore()
    config = config or ViTConfig.toy()
    return store, ViTBackbone(store, "vit", config, np.random.default_rng(seed),
                              dtype)


# -- config ------------------------------------------------------------------


def test_config_validates_divisibility():
    with pytest.raises(ConfigError):
        ViTConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=100, patch_size=14)


def test_parameter_count_formula_matches_built_model():
    cfg = ViTConfig.toy()
    store, _ = make_backbone(cfg)
    assert store.total_parameters() == cfg.parameter_count()


def test_paper_parameter_count_near_304m():
    count = ViTConfig.paper().parameter_count()
    assert abs(count - 304e6) / 304e6 <= 0.05


# -- patch embedding -----------------------------------------------------------


def test_patch_embed_token_counts_at_paper_geometry(rng):
    cfg = ViTConfig(d_model=16, n_layers=1, n_heads=2, d_mlp=32,
                    patch_size=14, image_size=224)
    _, backbone = make_backbone(cfg)
    tokens = backbone.embed(Tensor(rng.normal(size=(1, 3, 224, 224)).astype(np.float32)))
    assert tokens.shape == (1, 257, 16)  # (224/14)^2 = 256 patches + CLS


def test_patch_embed_token_counts_toy(rng):
    _, backbone = make_backbone()
    tokens = backbone.embed(Tensor(rng.normal(size=(2, 3, 56, 56)).astype(np.float32)))
    assert tokens.shape == (2, 17, 64)  # (56/14)^2 = 16 patches + CLS


def test_patch_embed_zero_image_zero_proj_gives_pos_embeddings():
    _, backbone = make_backbone()
    backbone.proj.w.data[...] = 0.0
    backbone.proj.b.data[...] = 0.0
    tokens = backbone.embed(Tensor(np.zeros((1, 3, 56, 56), dtype=np.float32)))
    assert np.allclose(tokens.data[0, 1:], backbone.pos.data[1:])
    assert np.allclose(tokens.data[0, 0],
                       backbone.cls.data[0, 0] + backbone.pos.data[0])


def test_patch_embed_rejects_indivisible_sizes(rng):
    _, backbone = make_backbone()
    with pytest.raises(DimensionError):
        backbone.embed(Tensor(rng.normal(size=(1, 3, 57, 57)).astype(np.float32)))


# -- attention -----------------------------------------------------------------


def block_with_random_projections(cfg, seed=11):
    store = ParamStore()
    block = EncoderBlock(store, "block", cfg, np.random.default_rng(seed),
                         dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    block.wo.w.data[...] = rng.normal(size=block.wo.w.shape) * 0.2
    block.fc2.w.data[...] = rng.normal(size=block.fc2.w.shape) * 0.2
    return store, block


def test_attention_single_token_weight_is_one(rng):
    cfg = ViTConfig(d_model=8, n_layers=1, n_heads=2, d_mlp=16,
                    patch_size=14, image_size=28)
    _, block = block_with_random_projections(cfg)
    x = rng.normal(size=(1, 1, 8))
    out = block.attention(Tensor(x, dtype=np.float64)).data
    v = x[0] @ block.wv.w.data + block.wv.b.data
    want = v @ block.wo.w.data + block.wo.b.data
    assert np.abs(out[0] - want).max() <= 1e-12


def test_attention_rows_sum_to_one(rng):
    cfg = ViTConfig(d_model=8, n_layers=1, n_heads=2, d_mlp=16,
                    patch_size=14, image_size=28)
    _, block = block_with_random_projections(cfg)
    x = Tensor(rng.normal(size=(1, 6, 8)), dtype=np.float64)
    q = block.wq(x).reshape((1, 6, 2, 4)).transpose((0, 2, 1, 3))
    k = block.wk(x).reshape((1, 6, 2, 4)).transpose((0, 2, 1, 3))
    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * block.scale
    weights = T.softmax(scores, axis=-1).data
    assert np.abs(weights.sum(axis=-1) - 1.0).max() <= 1e-9


def test_attention_matches_naive_per_head_loop(rng):
    cfg = ViTConfig(d_model=12, n_layers=1, n_heads=3, d_mlp=24,
                    patch_size=14, image_size=28)
    _, block = block_with_random_projections(cfg)
    x = rng.normal(size=(7, 12))
    out = block.attention(Tensor(x[None], dtype=np.float64)).data[0]
    want = naive_attention(x, block.wq.w.data, block.wq.b.data,
                           block.wk.w.data, block.wk.b.data,
                           block.wv.w.data, block.wv.b.data,
                           block.wo.w.data, block.wo.b.data, cfg.n_heads)
    assert np.abs(out - want).max() <= 1e-10


# -- encoder block -----------------------------------------------------------------


def test_block_preserves_shape(rng):
    cfg = ViTConfig.toy()
    _, block = block_with_random_projections(cfg)
    x = Tensor(rng.normal(size=(2, 17, 64)), dtype=np.float64)
    assert block(x, train=False).shape == (2, 17, 64)


def test_block_with_zero_projections_is_identity(rng):
    cfg = ViTConfig.toy()
    store = ParamStore()
    block = EncoderBlock(store, "block", cfg, np.random.default_rng(0))
    x = rng.normal(size=(1, 5, 64)).astype(np.float32)
    out = block(Tensor(x), train=False).data
    assert np.array_equal(out, x)  # residual projections start at zero


def test_block_gradcheck(rng):
    cfg = ViTConfig(d_model=8, n_layers=1, n_heads=2, d_mlp=16,
                    patch_size=14, image_size=28)
    _, block = block_with_random_projections(cfg)
    x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True, dtype=np.float64)
    params = [x, block.wq.w, block.wk.w, block.wv.w, block.wo.w,
              block.fc1.w, block.fc2.w, block.ln1.gamma, block.ln2.beta]
    err = gradcheck(lambda: (block(x, train=False) ** 2).sum(), params,
                    max_coords=5, rng=np.random.default_rng(4))
    assert err <= 1e-5


# -- full forward -------------------------------------------------------------------


def test_forward_toy_output_width_and_tanh_range(rng):
    _, backbone = make_backbone()
    x = Tensor(rng.normal(size=(2, 3, 56, 56)).astype(np.float32))
    out = backbone(x, train=False)
    assert out.shape == (2, 64)
    assert np.all(np.abs(out.data) < 1.0)


def test_forward_deterministic_given_seed(rng):
    x = rng.normal(size=(1, 3, 56, 56)).astype(np.float32)
    _, b1 = make_backbone(seed=9)
    _, b2 = make_backbone(seed=9)
    assert np.array_equal(b1(Tensor(x), train=False).data,
                          b2(Tensor(x), train=False).data)


def test_permutation_equivariance_and_cls_invariance(rng):
    """Swapping two patch tokens (with their positions) permutes the encoded
    patch representations identically and leaves the pooled CLS unchanged."""
    _, backbone = make_backbone(dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 3, 56, 56)), dtype=np.float64)
    tokens = backbone.embed(x).data.copy()
    i, j = 3, 11  # patch token slots (CLS is 0)
    swapped = tokens.copy()
    swapped[:, [i, j]] = swapped[:, [j, i]]

    base = backbone.encode(Tensor(tokens), train=False)
    perm = backbone.encode(Tensor(swapped), train=False)
    assert np.abs(perm.data[:, [j, i]] - base.data[:, [i, j]]).max() <= 1e-10
    assert np.abs(perm.data[:, 0] - base.data[:, 0]).max() <= 1e-10
    assert np.abs(backbone.pool(perm).data - backbone.pool(base).data).max() <= 1e-10
