import dataclasses

import numpy as np
import pytest

from vmcnet import ParameterStore, toy_config
from vmcnet.autodiff import Tensor, ops
from vmcnet.cnn import CnnBranch, MultiScaleTokens, flatten_concat
from vmcnet.vit import TapSet, ViTBranch, add_pos_embed, patch_embed, transformer_block

from oracles import resize_oracle


def img(h, w, seed=0, n=1):
    return Tensor(np.random.default_rng(seed).standard_normal((n, h, w, 3)))


# ---------------------------------------------------------------- ViT


def test_patch_embed_shapes():
    store = ParameterStore(0)
    vit = ViTBranch(toy_config().vit, store)
    tok, grid = patch_embed(img(64, 32), store["vit.patch_embed.w"], store["vit.patch_embed.b"], 16)
    assert grid == (4, 2)
    assert tok.shape == (1, 8, vit.cfg.embed_dim)


def test_patch_embed_rejects_ragged_image():
    store = ParameterStore(0)
    ViTBranch(toy_config().vit, store)
    with pytest.raises(ValueError):
        patch_embed(img(65, 64), store["vit.patch_embed.w"], store["vit.patch_embed.b"], 16)


def test_pos_embed_resized_to_grid():
    table = np.random.default_rng(1).standard_normal((2, 2, 3))
    tokens = Tensor(np.zeros((1, 12, 3)))
    got = add_pos_embed(tokens, (3, 4), Tensor(table)).data[0].reshape(3, 4, 3)
    np.testing.assert_allclose(got, resize_oracle(table, 3, 4), atol=1e-12)
    same = add_pos_embed(Tensor(np.zeros((1, 4, 3))), (2, 2), Tensor(table)).data[0]
    np.testing.assert_array_equal(same, table.reshape(4, 3))


def _block_params(seed=0, dim=8):
    store = ParameterStore(seed)
    vcfg = dataclasses.replace(toy_config().vit, embed_dim=dim, depth=1, tap_layers=(1,))
    vit = ViTBranch(vcfg, store)
    return store, vit.block_params(1)


def test_block_is_identity_with_zero_output_projections():
    store, p = _block_params()
    p["attn.proj.w"].data[...] = 0
    p["mlp.fc2.w"].data[...] = 0
    x = np.random.default_rng(2).standard_normal((2, 5, 8))
    np.testing.assert_array_equal(transformer_block(Tensor(x), p, heads=2).data, x)


def test_block_single_token_attention_passes_value_through():
    _, p = _block_params()
    p["mlp.fc2.w"].data[...] = 0
    x = np.random.default_rng(3).standard_normal((1, 1, 8))
    h = ops.layer_norm(Tensor(x), p["ln1.gamma"], p["ln1.beta"], 1e-6).data
    v = (h @ p["attn.qkv.w"].data + p["attn.qkv.b"].data)[..., 16:]
    want = x + v @ p["attn.proj.w"].data + p["attn.proj.b"].data
    np.testing.assert_allclose(transformer_block(Tensor(x), p, heads=2).data, want, atol=1e-12)


def test_taps_stop_at_deepest_tap_and_match_full_depth():
    cfg = toy_config()
    store = ParameterStore(0)
    vit = ViTBranch(cfg.vit, store)
    image = img(32, 32)
    short = vit.run_taps(image)
    assert vit.blocks_evaluated == 7
    assert sorted(short.taps) == [1, 5, 7]
    assert short.dense_final is None
    full = vit.run_taps(image, full_depth=True)
    assert vit.blocks_evaluated == 7 + 8
    for i in (1, 5, 7):
        np.testing.assert_array_equal(short.taps[i].data, full.taps[i].data)
    assert full.dense_final.shape == (1, 4, cfg.vit.embed_dim)


def test_taps_out_of_range():
    store = ParameterStore(0)
    vit = ViTBranch(toy_config().vit, store)
    with pytest.raises(ValueError):
        vit.run_taps(img(32, 32), tap_layers=(9,))


def test_vit_parameters_frozen_by_default():
    store = ParameterStore(0)
    ViTBranch(toy_config().vit, store)
    assert all(p.frozen for p in store)
    store2 = ParameterStore(0)
    ViTBranch(dataclasses.replace(toy_config().vit, trainable=True), store2)
    assert not any(p.frozen for p in store2)


# ---------------------------------------------------------------- CNN


@pytest.mark.parametrize("size", [32, 64, 96])
def test_stem_and_chain_sizes(size):
    cfg = toy_config()
    cnn = CnnBranch(cfg.cnn, ParameterStore(0))
    s1 = cnn.stem(img(size, size))
    feats = cnn.downsample_chain(s1)
    assert [f.shape[1:3] for f in feats] == [(size // r, size // r) for r in (4, 8, 16, 32)]
    assert [f.shape[-1] for f in feats] == [cfg.cnn.stem_width, *cfg.cnn.chain_widths]


def test_stem_rejects_non_multiple_of_32():
    cnn = CnnBranch(toy_config().cnn, ParameterStore(0))
    with pytest.raises(ValueError):
        cnn.stem(img(60, 60))


def test_level_embedding_not_on_largest_scale():
    cfg = toy_config()
    store = ParameterStore(0)
    cnn = CnnBranch(cfg.cnn, store)
    raw = cnn.downsample_chain(cnn.stem(img(32, 32)))
    before = [c.data.copy() for c in cnn.project_and_embed(raw)]
    for i in (2, 3, 4):
        store[f"cnn.level_embed.{i}"].data[...] += 1.0
    after = [c.data for c in cnn.project_and_embed(raw)]
    np.testing.assert_array_equal(after[0], before[0])
    for b, a in zip(before[1:], after[1:]):
        np.testing.assert_allclose(a - b, 1.0, atol=1e-12)
    assert "cnn.level_embed.1" not in store


def test_flatten_concat_offsets_for_64():
    d = 4
    maps = [Tensor(np.random.default_rng(i).standard_normal((1, s, s, d))) for i, s in enumerate((8, 4, 2))]
    tok = flatten_concat(maps)
    assert tok.sizes == [64, 16, 4]
    assert tok.offsets == [0, 64, 80]
    assert tok.data.shape == (1, 84, d)
    for m, u in zip(maps, tok.unflatten()):
        np.testing.assert_array_equal(u.data, m.data)
    np.testing.assert_array_equal(tok.data.data[0, 64 + 5], maps[1].data[0, 1, 1])


def test_multiscale_tokens_rejects_bad_total():
    with pytest.raises(ValueError):
        MultiScaleTokens(Tensor(np.zeros((1, 83, 2))), [(8, 8), (4, 4), (2, 2)])


def test_mrfp_identity_when_up_projection_zero():
    cfg = toy_config()
    store = ParameterStore(0)
    cnn = CnnBranch(cfg.cnn, store)
    store["cnn.mrfp1.up.w"].data[...] = 0
    tok = MultiScaleTokens(Tensor(np.random.default_rng(5).standard_normal((2, 21, cfg.cnn.dim))), [(4, 4), (2, 2), (1, 1)])
    np.testing.assert_array_equal(cnn.mrfp(tok).data.data, tok.data.data)


def test_mrfp_preserves_shape_and_count_zero_is_identity():
    cfg = toy_config()
    cfg.cnn.mrfp_count = 2
    store = ParameterStore(0)
    cnn = CnnBranch(cfg.cnn, store)
    tok = MultiScaleTokens(Tensor(np.random.default_rng(6).standard_normal((1, 21, cfg.cnn.dim))), [(4, 4), (2, 2), (1, 1)])
    out = cnn.mrfp(tok)
    assert out.data.shape == tok.data.shape and out.scale_shapes == tok.scale_shapes
    cfg0 = toy_config()
    cfg0.cnn.mrfp_count = 0
    cnn0 = CnnBranch(cfg0.cnn, ParameterStore(0))
    assert not any(n.startswith("cnn.mrfp") for n in cnn0.store.names())
    np.testing.assert_array_equal(cnn0.mrfp(tok).data.data, tok.data.data)


def test_cnn_forward_outputs():
    cfg = toy_config()
    cnn = CnnBranch(cfg.cnn, ParameterStore(0))
    c1, cm = cnn.forward(img(64, 64, n=2))
    assert c1.shape == (2, 16, 16, cfg.cnn.dim)
    assert cm.scale_shapes == [(8, 8), (4, 4), (2, 2)]
    assert cm.data.shape == (2, 84, cfg.cnn.dim)


def test_tapset_orders_by_layer():
    a, b = Tensor(np.zeros((1, 1, 1))), Tensor(np.ones((1, 1, 1)))
    assert TapSet({5: b, 1: a}, (1, 1)).ordered() == [a, b]
