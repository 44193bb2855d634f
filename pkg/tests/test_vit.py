import numpy as np
import pytest

from conftest import randomize_model, randomize_partition
from fact import factorization as fz
from fact import tensor as T
from fact import vit
from fact.gradcheck import check_gradients
from fact.tensor import AutoTensor, ShapeError


# ------------------------------------------------------------ tensorization


@pytest.mark.parametrize("strategy,per_layer", [("all", 12), ("mhsa", 4), ("ffn", 8), ("qv", 2)])
def test_map_sizes(strategy, per_layer):
    assert vit.build_tensorization_map(3, 16, strategy).M == 3 * per_layer


def test_vit_base_map_has_144_slices():
    assert vit.build_tensorization_map(12, 768, "all").M == 144


def test_mhsa_only_two_layers():
    assert vit.build_tensorization_map(2, 16, "mhsa").M == 8


def test_all_map_order():
    tmap = vit.build_tensorization_map(2, 8, "all")
    roles = [(e.role, e.block) for e in tmap.entries[:12]]
    assert roles == [("q", 0), ("k", 0), ("v", 0), ("o", 0), ("up", 0), ("up", 1), ("up", 2),
                     ("up", 3), ("down", 0), ("down", 1), ("down", 2), ("down", 3)]
    assert all(e.layer == 1 for e in tmap.entries[12:])


def test_mhsa_and_ffn_maps_partition_all():
    keys = lambda m: {(e.layer, e.role, e.block) for e in m.entries}  # noqa: E731
    a, m, f = (keys(vit.build_tensorization_map(3, 8, s)) for s in ("all", "mhsa", "ffn"))
    assert not (m & f)
    assert m | f == a
    assert len(a) == 36


def test_unknown_strategy():
    with pytest.raises(ValueError):
        vit.build_tensorization_map(1, 8, "bias")


def test_split_blocks_reassemble_exactly(small_model):
    weights = {k: v.copy() for k, v in small_model.state_dict().items()}
    tmap = vit.build_tensorization_map(2, 32, "all")
    blocks = vit.gather_slices(weights, 0, tmap)
    assert all(b.shape == (32, 32) for b in blocks)
    for j in range(2):
        p = f"stages.0.layers.{j}.mlp."
        ups = [blocks[tmap.index_of(j, "up", b)] for b in range(4)]
        downs = [blocks[tmap.index_of(j, "down", b)] for b in range(4)]
        np.testing.assert_array_equal(np.concatenate(ups, axis=1), weights[p + "up"])
        np.testing.assert_array_equal(np.concatenate(downs, axis=0), weights[p + "down"])
    before = {k: v.copy() for k, v in weights.items()}
    vit.scatter_slices(weights, 0, tmap, blocks)
    for k in before:
        assert before[k].tobytes() == weights[k].tobytes()


# --------------------------------------------------------------- counting


def test_vit_base_dense_count_close_to_85_8m():
    cfg = vit.vit_config(L=12, d=768, heads=12, image_size=224, patch_size=16, num_classes=100)
    count = vit.dense_param_count(cfg)
    assert count == 85_798_656
    assert abs(count / 85.8e6 - 1) < 0.02


def test_swin_b_partition_shapes():
    stages = [(2, 128), (2, 256), (18, 512), (2, 1024)]
    assert vit.partition_shapes(stages) == [(24, 128, 128), (24, 256, 256), (216, 512, 512),
                                            (24, 1024, 1024)]


def test_toy_staged_tt_param_count():
    model, part = vit.build_staged([(1, 16, 2), (1, 32, 4)], image_size=8, patch_size=2,
                                   fmt="tt", ranks=2)
    expected = (2 * 16 * 2 + 12 * 4) + (2 * 32 * 2 + 12 * 4)
    assert expected == 288
    assert part.trainable_count() == 288
    assert vit.partition_param_count([(1, 16), (1, 32)], "tt", 2) == 288
    assert [a.factors.M for a in part.adapters] == [12, 12]


# ------------------------------------------------------------------- MHSA


def test_mhsa_zero_factors_match_none(small_model):
    x = AutoTensor(np.random.default_rng(0).normal(size=(2, 5, 32)))
    part = vit.make_partition(small_model.config, "tt", 4, scale=3.0)
    a = small_model.mhsa(x, 0, 1, None).data
    b = small_model.mhsa(x, 0, 1, part.adapters[0]).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_mhsa_single_token_is_value_path():
    cfg = vit.vit_config(L=1, d=8, heads=1, image_size=4, patch_size=4)
    model = vit.VisionTransformer.random(cfg, seed=3)
    part = randomize_partition(vit.make_partition(cfg, "tt", 2, scale=0.5), seed=4)
    x = np.random.default_rng(5).normal(size=(1, 8)).astype(np.float32)
    delta = fz.expand(part.adapters[0].factors).data
    tmap = part.adapters[0].tmap
    w_v = model["stages.0.layers.0.attn.v"].data + delta[tmap.index_of(0, "v")]
    w_o = model["stages.0.layers.0.attn.o"].data + delta[tmap.index_of(0, "o")]
    expected = x @ w_v @ w_o.T
    got = model.mhsa(AutoTensor(x), 0, 0, part.adapters[0]).data
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


def test_mhsa_permutation_equivariant(small_model):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 32)).astype(np.float32)
    part = randomize_partition(vit.make_partition(small_model.config, "tk", 3), seed=2)
    perm = rng.permutation(6)
    out = small_model.mhsa(AutoTensor(x), 0, 0, part.adapters[0]).data
    out_p = small_model.mhsa(AutoTensor(x[perm]), 0, 0, part.adapters[0]).data
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-5, atol=1e-5)


def test_mhsa_dimension_mismatch(small_model):
    with pytest.raises(ShapeError):
        small_model.mhsa(AutoTensor(np.zeros((2, 16))), 0, 0)


# -------------------------------------------------------------------- FFN


def _monolithic_ffn(model, x, layer, delta=None, tmap=None):
    from scipy.special import erf

    p = f"stages.0.layers.{layer}.mlp."
    up, down = model[p + "up"].data.copy(), model[p + "down"].data.copy()
    if delta is not None:
        weights = {p + "up": up, p + "down": down}
        for e in tmap.entries:
            if e.layer == layer and e.role in ("up", "down"):
                vit.block_view(weights, 0, e, tmap.d)[...] += delta[tmap.index_of(e.layer, e.role, e.block)]
    pre = x @ up + model[p + "up_bias"].data
    return (0.5 * pre * (1 + erf(pre / np.sqrt(2)))) @ down + model[p + "down_bias"].data


def test_ffn_head_sum_equals_monolithic(small_model):
    x = np.random.default_rng(0).normal(size=(5, 32)).astype(np.float32)
    expected = _monolithic_ffn(small_model, x, 1)
    for mode in ("monolithic", "per_block"):
        got = small_model.ffn(AutoTensor(x), 0, 1, None, mode=mode).data
        np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("fmt", fz.FORMATS)
@pytest.mark.parametrize("mode", ["monolithic", "per_block"])
def test_ffn_random_factors_match_dense_oracle(small_model, fmt, mode):
    x = np.random.default_rng(1).normal(size=(5, 32)).astype(np.float32)
    part = randomize_partition(vit.make_partition(small_model.config, fmt, 3, scale=0.5), seed=9)
    a = part.adapters[0]
    delta = fz.expand(a.factors).data
    expected = _monolithic_ffn(small_model, x, 0, delta, a.tmap)
    got = small_model.ffn(AutoTensor(x), 0, 0, a, mode=mode).data
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-4)


def test_ffn_zero_input_zero_bias():
    cfg = vit.vit_config(L=1, d=8, heads=2, image_size=4, patch_size=4)
    model = vit.VisionTransformer.random(cfg, seed=0)
    part = randomize_partition(vit.make_partition(cfg, "mb", 2), seed=1)
    out = model.ffn(AutoTensor(np.zeros((3, 8))), 0, 0, part.adapters[0])
    assert not np.any(out.data)


# ---------------------------------------------------------------- forward


def test_forward_logits_shape(small_model, images):
    assert small_model(images).shape == (3, 5)


def test_zero_factors_equal_frozen_backbone(small_model, images):
    base = small_model(images).data
    for fmt in fz.FORMATS:
        part = vit.make_partition(small_model.config, fmt, 4, scale=10.0)
        np.testing.assert_allclose(small_model(images, part).data, base, atol=1e-6)


@pytest.mark.parametrize("fmt", fz.FORMATS)
@pytest.mark.parametrize("strategy", ["all", "mhsa", "ffn", "qv"])
def test_merged_forward_matches_factored(small_model, images, fmt, strategy):
    part = randomize_partition(
        vit.make_partition(small_model.config, fmt, 4, scale=0.5, strategy=strategy), seed=3)
    factored = small_model(images, part).data
    merged = vit.merge_partition(small_model, part)(images).data
    assert np.abs(factored - small_model(images).data).max() > 1e-3
    np.testing.assert_allclose(merged, factored, atol=1e-4)


def test_merge_leaves_source_model_untouched(small_model):
    before = {k: v.copy() for k, v in small_model.state_dict().items()}
    part = randomize_partition(vit.make_partition(small_model.config, "tt", 2), seed=1)
    vit.merge_partition(small_model, part)
    for k, v in small_model.state_dict().items():
        assert before[k].tobytes() == v.tobytes()


def test_bad_image_shape(small_model):
    with pytest.raises(ShapeError):
        small_model(np.zeros((1, 3, 9, 9), np.float32))


def test_partition_dim_mismatch(small_model, images):
    other = vit.vit_config(L=2, d=16, heads=4, image_size=8, patch_size=4)
    with pytest.raises(ShapeError):
        small_model(images, vit.make_partition(other, "tt", 2))


def test_frozen_weights_get_no_gradient(small_model, images):
    small_model.set_trainable("head")
    part = randomize_partition(vit.make_partition(small_model.config, "tt", 2), seed=5)
    loss = T.cross_entropy(small_model(images, part), [0, 1, 2])
    T.backward(loss)
    for name, p in small_model.params.items():
        assert (p.grad is not None) == (name in vit.HEAD_NAMES), name
    assert all(p.grad is not None for p in part.parameters())


@pytest.mark.parametrize("fmt", fz.FORMATS)
def test_end_to_end_factor_gradients(fmt):
    cfg = vit.vit_config(L=2, d=16, heads=2, image_size=8, patch_size=4, num_classes=3)
    model = randomize_model(vit.VisionTransformer.random(cfg, seed=2), seed=3).astype(np.float64)
    part = randomize_partition(vit.make_partition(cfg, fmt, 2, scale=0.7), seed=4).astype(np.float64)
    imgs = np.random.default_rng(5).normal(size=(2, 3, 8, 8))
    fn = lambda: T.cross_entropy(model(imgs, part), [0, 2])  # noqa: E731
    ok, worst, n = check_gradients(fn, part.parameters(), rtol=1e-2, atol=1e-7, max_entries=20)
    assert ok, worst


# ----------------------------------------------------------------- staged


def test_single_stage_staged_model_is_plain_vit(images):
    cfg = vit.vit_config(L=2, d=16, heads=2, image_size=8, patch_size=4, pool="mean")
    plain = vit.VisionTransformer.random(cfg, seed=1)
    staged, part = vit.build_staged([(2, 16, 2)], image_size=8, patch_size=4, seed=1)
    assert list(plain.state_dict()) == list(staged.state_dict())
    randomize_partition(part, seed=2)
    plain_part = vit.StagePartition([vit.StageAdapter(part.adapters[0].tmap, part.adapters[0].factors)])
    np.testing.assert_array_equal(staged(images, part).data, plain(images, plain_part).data)


def test_staged_forward_and_merge():
    model, part = vit.build_staged([(1, 16, 2), (1, 32, 4)], image_size=8, patch_size=2,
                                   num_classes=3, fmt="tt", ranks=2, seed=0)
    randomize_model(model, seed=1)
    randomize_partition(part, seed=2)
    imgs = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
    factored = model(imgs, part).data
    assert factored.shape == (2, 3)
    np.testing.assert_allclose(vit.merge_partition(model, part)(imgs).data, factored, atol=1e-4)


def test_staged_requires_even_grid():
    with pytest.raises(ShapeError):
        vit.ViTConfig(12, 4, 3, 2, [(1, 8, 2), (1, 16, 2)], "mean")
