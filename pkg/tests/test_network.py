import struct

import numpy as np
import pytest

from contextagg import tensor as T
from contextagg.errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ShapeError,
    TruncatedError,
    UnknownTensorError,
    VersionError,
)
from contextagg.network import (
    BASE_PRESETS,
    NetworkConfig,
    StageConfig,
    build_network,
    config_from_text,
    config_to_text,
    forward,
    load_checkpoint,
    preset,
    preset_names,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from contextagg.verify import network_identity_case

TOY = NetworkConfig(stages=(StageConfig(depth=1, dim=8, patch=4, head_dim=4),), resolution=(8, 8), num_classes=5, name="toy")


def toy_batch(b=3, seed=0):
    return np.random.default_rng(seed).random((b, 3, 8, 8))


def test_full_container_grids():
    assert preset("container").grids() == [(56, 56), (28, 28), (14, 14), (7, 7)]


def test_full_container_depths_dims():
    cfg = preset("container")
    assert [s.depth for s in cfg.stages] == [2, 3, 8, 3]
    assert [s.dim for s in cfg.stages] == [128, 256, 320, 512]
    assert [s.patch for s in cfg.stages] == [4, 2, 2, 2]
    assert [s.heads for s in cfg.stages] == [4, 8, 10, 16]


def test_toy_logits_shape():
    net = build_network(TOY)
    assert net(toy_batch(1)).shape == (1, 5)


def test_preset_kinds():
    assert [s.kind for s in preset("container").stages] == ["mixture"] * 4
    light = preset("container-light").stages
    assert [s.kind for s in light] == ["static", "static", "static", "mixture"]
    assert all(s.static == "conv" for s in light)
    assert [s.kind for s in preset("h-deit-s").stages] == ["dynamic"] * 4
    assert all(s.head_dim == 32 and s.static == "conv" for s in preset("mh-dw-3").stages)
    assert all(s.heads == s.dim for s in preset("dw-3").stages)
    assert all(s.heads == 1 and s.static == "mlp" for s in preset("mlp").stages)
    assert all(s.heads == 1 and s.static == "mlp-lr" for s in preset("mlp-lr").stages)
    assert all(s.head_dim == 32 and s.static == "mlp-lr" for s in preset("mh-mlp-lr").stages)


def test_lowrank_reduction_defaults_to_four_and_adapts_at_seven_by_seven():
    assert [s.reduction for s in preset("mlp-lr").stages] == [4, 4, 4, 7]
    assert [s.reduction for s in preset("mlp-lr-mini").stages] == [4, 4, 4, 4]


def test_pos_embed_only_for_dynamic_only_stages():
    assert all(s.has_pos_embed for s in preset("h-deit-s").stages)
    assert not any(s.has_pos_embed for s in preset("container").stages)


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigError, match="container-light"):
        preset("resnet")


def test_all_presets_resolve():
    for name in preset_names():
        preset(name).grids()
    assert set(BASE_PRESETS) <= set(preset_names())


def test_mini_presets():
    cfg = preset("container-mini")
    assert cfg.resolution == (64, 64)
    assert [s.dim for s in cfg.stages] == [32, 64, 80, 128]
    assert [s.head_dim for s in cfg.stages] == [8] * 4


def test_indivisible_resolution_names_stage():
    with pytest.raises(ConfigError, match="stage 4"):
        NetworkConfig(stages=preset("container").stages, resolution=(208, 208))


def test_head_dim_must_divide_dim():
    with pytest.raises(ConfigError):
        StageConfig(depth=1, dim=10, patch=2, head_dim=4)


def test_empty_batch():
    net = build_network(TOY)
    out = net(np.zeros((0, 3, 8, 8)))
    assert out.shape == (0, 5)


def test_resolution_mismatch():
    net = build_network(TOY)
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 16, 16)))


def test_duplicate_rows_identical():
    net = build_network(preset("container-mini"), seed=1)
    x = np.random.default_rng(0).random((1, 3, 64, 64))
    with T.no_grad():
        out = net(np.concatenate([x, x])).data
    assert np.array_equal(out[0], out[1])


def test_logits_deterministic_across_builds():
    a = build_network(TOY, seed=3)(toy_batch()).data
    b = build_network(TOY, seed=3)(toy_batch()).data
    assert np.array_equal(a, b)


def test_sharded_forward_matches():
    net = build_network(preset("container-light-mini"), seed=2)
    x = np.random.default_rng(1).random((19, 3, 64, 64))
    ref = forward(net, x, workers=1).data
    for w in (2, 3):
        assert np.array_equal(forward(net, x, workers=w).data, ref)
    assert np.allclose(ref, net(x).data, rtol=1e-4, atol=1e-5)


def test_registry_unique_and_stable():
    names_a = list(build_network(preset("container-mini"), seed=0).registry())
    names_b = list(build_network(preset("container-mini"), seed=9).registry())
    assert names_a == names_b
    assert len(set(names_a)) == len(names_a)


def test_registry_covers_every_forward_leaf():
    net = build_network(preset("container-pam-mini"), dtype="f64")
    reg = net.registry()
    T.zero_grad(reg.values())
    x = np.random.default_rng(0).random((1, 3, 64, 64))
    T.backward(T.sum_(net(x)))
    reached = {name for name, p in reg.items() if np.any(p.grad != 0)}
    # zero-initialised embeddings still receive gradient; anything unreached would be a dead param
    assert reached == set(reg)


def test_checkpoint_roundtrip(tmp_path):
    net = build_network(TOY, seed=4)
    path = tmp_path / "toy.ctnr"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.cfg == net.cfg
    for (n1, p1), (n2, p2) in zip(net.registry().items(), back.registry().items()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data) and p1.dtype == p2.dtype
    assert np.array_equal(back(toy_batch()).data, net(toy_batch()).data)


def test_checkpoint_lists_registry_names(tmp_path):
    net = build_network(TOY)
    save_checkpoint(net, tmp_path / "t.ctnr")
    assert list(read_tensors(tmp_path / "t.ctnr")) == list(net.registry())


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "x.ctnr"
    write_tensors(path, {"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = path.read_bytes()
    expected = (
        b"CTNR"
        + struct.pack("<II", 1, 1)
        + struct.pack("<H", 2)
        + b"ab"
        + struct.pack("<B", 2)
        + struct.pack("<QQ", 1, 2)
        + struct.pack("<B", 0)
        + np.array([1.0, 2.0], dtype="<f4").tobytes()
    )
    assert raw == expected


def test_checkpoint_errors(tmp_path):
    net = build_network(TOY)
    path = tmp_path / "t.ctnr"
    save_checkpoint(net, path)
    good = path.read_bytes()

    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(BadMagicError, match="bad magic"):
        load_checkpoint(path)

    path.write_bytes(good[:4] + struct.pack("<I", 99) + good[8:])
    with pytest.raises(VersionError):
        load_checkpoint(path)

    path.write_bytes(good[:-3])
    with pytest.raises(TruncatedError):
        load_checkpoint(path)

    path.write_bytes(good)
    data = read_tensors(path)
    data["bogus.weight"] = np.zeros(2, dtype=np.float32)
    write_tensors(path, data)
    with pytest.raises(UnknownTensorError):
        load_checkpoint(path)

    data.pop("bogus.weight")
    data.pop("head.bias")
    write_tensors(path, data)
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(path)


def test_config_text_roundtrip():
    for name in ("container-mini", "mlp-lr", "h-deit-s"):
        cfg = preset(name)
        back, dtype = config_from_text(config_to_text(cfg, "f64"))
        assert back == cfg and dtype == "f64"


def test_bad_config_text():
    with pytest.raises(ConfigError):
        config_from_text("[network]\nname = x\n")


def test_container_with_alpha_one_beta_zero_is_h_deit_s():
    assert network_identity_case(seed=3).passed
