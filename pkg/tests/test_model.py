import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grumo import augment as A
from grumo import model as M
from grumo import synth
from grumo.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def small_set():
    return synth.make_sceneset(5, 6)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(decoder_layers=4)
    with pytest.raises(ValueError):
        M.ModelConfig(d_min=0.0)
    with pytest.raises(ValueError):
        M.ModelConfig(d_min=5.0, d_max=5.0)
    assert M.ModelConfig().layer_tags() == tuple(f"dec{i}" for i in range(1, 10))


def test_zero_weights_give_midpoint_depth():
    m = M.zero_model(M.ModelConfig())
    d = M.forward(m, synth.gen_scene(0).image).depth.data
    assert np.all(d == np.float32(1 + 0.5 * 9))


def test_missing_or_misshaped_weight_rejected():
    cfg = M.ModelConfig()
    w = M.init_weights(cfg, 0)
    bad = dict(w)
    bad.pop("head.weight")
    with pytest.raises(ValueError, match="head.weight"):
        M.Model(cfg, bad)
    bad = dict(w)
    bad["dec3.weight"] = Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ValueError, match="dec3.weight"):
        M.Model(cfg, bad)


def test_mirror_symmetric_model_keeps_symmetric_input_symmetric(random_model):
    m = random_model.mirror_symmetric()
    for seed in range(3):
        img = synth.symmetrize(synth.gen_scene(seed)).image
        d = M.forward(m, img).depth.data
        assert np.array_equal(d, d[..., ::-1])


def test_indivisible_size_rejected_with_divisor(random_model):
    with pytest.raises(ShapeError, match="divisible by 8"):
        M.forward(random_model, Tensor(np.zeros((1, 3, 12, 16))))
    with pytest.raises(ShapeError):
        M.forward(random_model, Tensor(np.zeros((1, 1, 16, 16))))


def test_traced_forward_tags_every_decoder_layer(random_model):
    b = M.forward(random_model, synth.gen_scene(1).image, trace=True)
    assert b.traced and set(b.activations) == set(random_model.layer_tags)
    assert len(b.tape.tags) == random_model.config.decoder_layers
    for tag in random_model.layer_tags:
        assert np.array_equal(b.tape.activation(tag).data, b.activations[tag].data)


def test_tape_replay_gives_identical_activations(random_model):
    b = M.forward(random_model, synth.gen_scene(2).image, trace=True)
    vals = b.tape.replay()
    for tag, node in b.tape.tags.items():
        assert np.array_equal(vals[node], b.activations[tag].data)


def test_forward_from_features_identity(random_model):
    img = synth.gen_scene(3).image
    a = M.forward(random_model, img)
    z = M.encode(random_model, img)
    b = M.forward_from_features(random_model, z)
    c = M.forward_from_features(random_model, A.apply_features(A.feat_noise(0.0, 4), z))
    assert np.array_equal(a.depth.data, b.depth.data)
    assert np.array_equal(a.depth.data, c.depth.data)


def test_feature_flip_on_symmetric_input(random_model):
    m = random_model.mirror_symmetric()
    img = synth.symmetrize(synth.gen_scene(4)).image
    d = M.forward(m, img).depth.data
    z = A.apply_features(A.FEAT_HFLIP, M.encode(m, img))
    assert np.array_equal(M.forward_from_features(m, z).depth.data, d[..., ::-1])


def test_bottleneck_shape_mismatch_rejected(random_model):
    z = M.encode(random_model, synth.gen_scene(0).image)
    bad = M.Features(Tensor(np.zeros((1, 5, 8, 8))), z.skips)
    with pytest.raises(ShapeError, match="bottleneck"):
        M.forward_from_features(random_model, bad)
    with pytest.raises(ShapeError):
        M.forward_from_features(random_model, M.Features(z.bottleneck, z.skips[:-1]))


@settings(max_examples=15, deadline=None)
@given(scale=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_depth_and_variance_bounds(scale, seed):
    cfg = M.ModelConfig(predictive=True)
    m = M.Model(cfg, M.init_weights(cfg, seed))
    img = Tensor(scale * np.random.default_rng(seed).normal(size=(1, 3, 16, 16)))
    b = M.forward(m, img)
    assert np.all((b.depth.data >= 1.0) & (b.depth.data <= 10.0))
    s = b.sigma_sq.data.astype(np.float64)
    assert np.all(s >= np.exp(-10.0)) and np.all(s <= np.exp(10.0))


def test_train_zero_epochs_returns_init(small_set):
    cfg = M.ModelConfig()
    m = M.train_fixture(cfg, small_set, 0, 7)
    init = M.init_weights(cfg, 7)
    assert all(np.array_equal(m.weights[k].data, init[k].data) for k in init)


def test_train_is_deterministic(small_set):
    cfg = M.ModelConfig(predictive=True)
    a = M.train_fixture(cfg, small_set, 2, 3)
    b = M.train_fixture(cfg, small_set, 2, 3)
    assert all(np.array_equal(a.weights[k].data, b.weights[k].data) for k in a.weights)
    assert a.fixture_abs_rel == b.fixture_abs_rel


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        M.train_fixture(M.ModelConfig(), synth.SceneSet([]), 1, 0)


def test_fixture_beats_initialization_on_held_out(reg_model, test_set):
    init = M.Model(reg_model.config, M.init_weights(reg_model.config, reg_model.seed))
    held_out = M.abs_rel(reg_model, test_set)
    assert held_out == pytest.approx(reg_model.fixture_abs_rel, abs=1e-12)
    assert held_out < M.abs_rel(init, test_set)


@pytest.mark.slow
def test_two_hundred_epochs_improve_on_epoch_zero(train_set, test_set):
    cfg = M.ModelConfig()
    m0 = M.train_fixture(cfg, train_set, 0, 0, test=test_set)
    m = M.train_fixture(cfg, train_set, 200, 0, test=test_set)
    assert m.fixture_abs_rel < m0.fixture_abs_rel


# ---- persistence ------------------------------------------------------------

def test_save_load_roundtrip_bitwise(tmp_path, small_set):
    m = M.train_fixture(M.ModelConfig(predictive=True), small_set, 1, 2)
    M.save_model(m, tmp_path / "m")
    m2 = M.load_model(tmp_path / "m")
    man = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert set(man) >= {"arch", "layer_tags", "fixture_abs_rel", "seed", "weights"}
    assert man["fixture_abs_rel"] == m.fixture_abs_rel and man["seed"] == 2
    img = small_set.scenes[0].image
    a, b = M.forward(m, img), M.forward(m2, img)
    assert np.array_equal(a.depth.data, b.depth.data)
    assert np.array_equal(a.sigma_sq.data, b.sigma_sq.data)


def test_load_rejects_wrong_manifest_shape(tmp_path, random_model):
    M.save_model(random_model, tmp_path / "m")
    p = tmp_path / "m" / "manifest.json"
    man = json.loads(p.read_text())
    man["weights"]["dec2.weight"]["shape"] = [1, 2, 3, 3]
    p.write_text(json.dumps(man))
    with pytest.raises(M.ModelFormatError, match="dec2.weight"):
        M.load_model(tmp_path / "m")


def test_load_rejects_missing_and_corrupt_files(tmp_path, random_model):
    M.save_model(random_model, tmp_path / "m")
    (tmp_path / "m" / "weights" / "enc1.bias.gt01").unlink()
    with pytest.raises(M.ModelFormatError, match="enc1.bias"):
        M.load_model(tmp_path / "m")
    M.save_model(random_model, tmp_path / "n")
    (tmp_path / "n" / "weights" / "head.weight.gt01").write_bytes(b"GT01\x04")
    with pytest.raises(M.ModelFormatError, match="head.weight"):
        M.load_model(tmp_path / "n")
    (tmp_path / "n" / "manifest.json").write_text("{not json")
    with pytest.raises(M.ModelFormatError, match="corrupt"):
        M.load_model(tmp_path / "n")


def test_big_endian_weights_give_identical_outputs(tmp_path, random_model):
    # weights held in big-endian memory (as on an opposite-endian host) must
    # serialize to the same bytes and predict the same depth
    swapped = {k: Tensor(v.data.astype(">f4")) for k, v in random_model.weights.items()}
    m_be = M.Model(random_model.config, swapped)
    M.save_model(random_model, tmp_path / "le")
    M.save_model(m_be, tmp_path / "be")
    for k in random_model.weights:
        a = (tmp_path / "le" / "weights" / f"{k}.gt01").read_bytes()
        b = (tmp_path / "be" / "weights" / f"{k}.gt01").read_bytes()
        assert a == b
    img = synth.gen_scene(9).image
    d0 = M.forward(random_model, img).depth.data
    assert np.array_equal(M.forward(M.load_model(tmp_path / "be"), img).depth.data, d0)
