import json

import numpy as np
import pytest

from vmcnet import VMCNet, toy_config
from vmcnet.config import ConfigError, RunConfig
from vmcnet.io import KIND_DUMP, Container, ContainerError, compare_dumps, load_weights, read_ppm, save_weights
from vmcnet.params import ParameterStore, rng_for


def test_container_round_trip_is_byte_identical(tmp_path):
    c = Container(kind=KIND_DUMP, config_hash=bytes(range(32)), seed=2**63 + 5)
    c.add("a", np.arange(6, dtype=np.float64).reshape(2, 3), frozen=True)
    c.add("b.c", np.float32([1.5, -2.0]))
    c.add("scalar", np.array(3.25))
    raw = c.to_bytes()
    back = Container.from_bytes(raw)
    assert back.to_bytes() == raw
    assert back.seed == c.seed and back.kind == KIND_DUMP
    assert back.tensors["a"][1] is True
    assert back["b.c"].dtype == np.float32
    assert back["scalar"].shape == ()


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:10], "truncated"),
])
def test_container_corruption_is_reported(mutate, msg):
    c = Container()
    c.add("w", np.ones((2, 2)))
    with pytest.raises(ContainerError, match=msg):
        Container.from_bytes(mutate(c.to_bytes()), source="w.bin")


def test_weights_round_trip_and_shape_mismatch(tmp_path):
    cfg = toy_config(0)
    a = VMCNet(cfg)
    path = tmp_path / "w.vmcw"
    save_weights(a.store, str(path))
    b = VMCNet(toy_config(9))
    load_weights(b.store, str(path))
    assert b.store.diff(a.store.snapshot()) == []
    bigger = toy_config(0)
    bigger.cnn.dim = 16
    with pytest.raises(ContainerError, match="shape mismatch"):
        load_weights(VMCNet(bigger).store, str(path))


def test_compare_dumps_rejects_other_config():
    x = Container(kind=KIND_DUMP, config_hash=toy_config(0).hash())
    y = Container(kind=KIND_DUMP, config_hash=toy_config(1).hash())
    x.add("p", np.zeros(2))
    y.add("p", np.zeros(2))
    with pytest.raises(ContainerError):
        compare_dumps(x, y)
    z = Container(kind=KIND_DUMP, config_hash=x.config_hash)
    z.add("p", np.array([0.0, -0.0]))
    assert not compare_dumps(x, z)


def test_store_load_strictness():
    s = ParameterStore(0)
    s.zeros("a", (2,))
    with pytest.raises(KeyError):
        s.load({"a": np.zeros(2), "b": np.zeros(1)})
    with pytest.raises(KeyError):
        s.load({})
    s.load({"a": np.ones(2), "b": np.zeros(1)}, strict=False)
    assert s["a"].data.tolist() == [1.0, 1.0]


def test_init_is_keyed_by_name():
    s1, s2 = ParameterStore(3), ParameterStore(3)
    s1.normal("x", (4,), 1.0)
    s2.normal("other", (2,), 1.0)
    s2.normal("x", (4,), 1.0)
    np.testing.assert_array_equal(s1["x"].data, s2["x"].data)
    assert not np.array_equal(rng_for(3, "x").standard_normal(3), rng_for(4, "x").standard_normal(3))


def test_rerandomize_changes_only_prefix():
    model = VMCNet(toy_config(0))
    snap = model.store.snapshot()
    model.store.rerandomize("vit.", 99)
    changed = model.store.diff(snap)
    assert changed and all(n.startswith("vit.") for n in changed)


# ---------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    cfg = toy_config(11)
    path = tmp_path / "c.json"
    cfg.dump(str(path))
    back = RunConfig.load(str(path))
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_config_rejects_unknown_key():
    doc = toy_config(0).to_dict()
    doc["vmc"]["num_heads"] = 3
    with pytest.raises(ConfigError, match="vmc.num_heads"):
        RunConfig.from_dict(doc)


def test_config_requires_seed():
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"input_size": [64, 64]})


@pytest.mark.parametrize("patch,msg", [
    ({"input_size": [60, 64]}, "multiples of 32"),
    ({"mode": "fast"}, "mode"),
    ({"vit": {"tap_layers": [5, 1]}}, "increasing"),
    ({"vit": {"tap_layers": [13]}}, "outside"),
    ({"vmc": {"heads": 3}}, "divide"),
    ({"cnn": {"mrfp_kernels": [4]}}, "odd"),
    ({"fusion": {"gamma": 2.0}}, "gamma"),
    ({"seed": "zero"}, "integer"),
])
def test_config_validation(patch, msg):
    doc = {"seed": 0, **patch}
    with pytest.raises(ConfigError, match=msg):
        RunConfig.from_dict(doc)


def test_hash_ignores_output_path():
    a, b = toy_config(0), toy_config(0)
    b.out = "/tmp/elsewhere"
    assert a.hash() == b.hash()
    b.vmc.points = 3
    assert a.hash() != b.hash()


def test_read_ppm_binary_and_ascii(tmp_path):
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    p6 = tmp_path / "a.ppm"
    p6.write_bytes(b"P6\n# comment\n3 2\n255\n" + px.tobytes())
    p3 = tmp_path / "b.ppm"
    p3.write_text("P3 3 2 255\n" + " ".join(map(str, px.reshape(-1))))
    np.testing.assert_array_equal(read_ppm(str(p6)), px / 255.0)
    np.testing.assert_array_equal(read_ppm(str(p3)), px / 255.0)
    (tmp_path / "c.ppm").write_bytes(b"P5 1 1 255\n\0")
    with pytest.raises(ValueError):
        read_ppm(str(tmp_path / "c.ppm"))
