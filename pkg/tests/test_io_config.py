import json

import numpy as np
import pytest

from attrdebias.adapters import AdapterBank, AdapterPair, AttributeAdapter
from attrdebias.config import default_config, from_dict, load_config
from attrdebias.diffusion import make_schedule
from attrdebias.errors import ArtifactMismatchError, ConfigError
from attrdebias.gradcheck import small_model
from attrdebias.io import (
    bank_bytes, check_bank_compatible, checkpoint_bytes, config_hash, load_bank, load_checkpoint, save_bank,
    save_checkpoint,
)


def _bank(model, rng):
    return AdapterBank("g", ["a", "b"], [
        AttributeAdapter(c, [AdapterPair(t, rng.standard_normal(model.weight_shape(t)[0]),
                                         rng.standard_normal(model.weight_shape(t)[1])) for t in model.adapter_targets()])
        for c in ("a", "b")
    ])


def test_checkpoint_roundtrip_bitwise(tmp_path, tiny_model, rng):
    s = make_schedule(10, 1e-4, 0.2)
    path = tmp_path / "m.fgc"
    digest = save_checkpoint(path, tiny_model, s, "abc")
    model, sched, manifest = load_checkpoint(path)
    assert manifest["content_hash"] == digest and manifest["meta"]["config_hash"] == "abc"
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(model.forward(x, 2, 1), tiny_model.forward(x, 2, 1))
    np.testing.assert_array_equal(sched.alpha_bar, s.alpha_bar)
    assert checkpoint_bytes(model, sched, "abc")[0] == path.read_bytes()


def test_checkpoint_manifest_is_json_then_le_f64(tmp_path, tiny_model):
    path = tmp_path / "m.fgc"
    save_checkpoint(path, tiny_model, make_schedule(10))
    head, data = path.read_bytes().split(b"\n", 1)
    manifest = json.loads(head)
    entry = next(e for e in manifest["arrays"] if e["name"] == "out.b")
    raw = np.frombuffer(data[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f8")
    np.testing.assert_array_equal(raw, tiny_model.params["out.b"])


def test_corrupted_checkpoint_detected(tmp_path, tiny_model):
    path = tmp_path / "m.fgc"
    save_checkpoint(path, tiny_model, make_schedule(10))
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ArtifactMismatchError, match="hash"):
        load_checkpoint(path)


def test_wrong_kind_rejected(tmp_path, tiny_model, rng):
    path = tmp_path / "b.fgb"
    save_bank(path, _bank(tiny_model, rng), tiny_model.spec.to_dict(), "h", {})
    with pytest.raises(ArtifactMismatchError, match="checkpoint"):
        load_checkpoint(path)


def test_bank_roundtrip_bitwise(tmp_path, tiny_model, rng):
    bank = _bank(tiny_model, rng)
    bank.meta["orthogonality"] = 0.5
    path = tmp_path / "b.fgb"
    save_bank(path, bank, tiny_model.spec.to_dict(), "base", {"eta": 1.0}, "cfg")
    loaded, manifest = load_bank(path)
    assert loaded.categories == bank.categories and loaded.meta == {"orthogonality": 0.5}
    for a, b in zip(bank.adapters, loaded.adapters):
        for u, v in zip(a.pairs, b.pairs):
            np.testing.assert_array_equal(u.p, v.p)
    assert bank_bytes(loaded, tiny_model.spec.to_dict(), "base", {"eta": 1.0}, "cfg")[0] == path.read_bytes()


def test_bank_compatibility(tmp_path, tiny_model, rng):
    s = make_schedule(10)
    save_checkpoint(tmp_path / "m.fgc", tiny_model, s)
    _, _, cman = load_checkpoint(tmp_path / "m.fgc")
    save_bank(tmp_path / "b.fgb", _bank(tiny_model, rng), tiny_model.spec.to_dict(), cman["content_hash"], {})
    assert check_bank_compatible(load_bank(tmp_path / "b.fgb")[1], cman) is True
    save_bank(tmp_path / "c.fgb", _bank(tiny_model, rng), tiny_model.spec.to_dict(), "other", {})
    assert check_bank_compatible(load_bank(tmp_path / "c.fgb")[1], cman) is False
    other = small_model(0, token_dim=8)
    save_bank(tmp_path / "d.fgb", _bank(other, rng), other.spec.to_dict(), "x", {})
    with pytest.raises(ArtifactMismatchError):
        check_bank_compatible(load_bank(tmp_path / "d.fgb")[1], cman)


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


@pytest.mark.parametrize("preset", ["gender", "intersectional"])
def test_config_roundtrip_lossless(tmp_path, preset):
    cfg = default_config(preset)
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert config_hash(again.to_dict()) == config_hash(cfg.to_dict())


@pytest.mark.parametrize("mutate, key", [
    (lambda d: d["pretrain"].update(epochz=3), "pretrain.epochz"),
    (lambda d: d["adapters"]["train"].update(eta="high"), "adapters.train.eta"),
    (lambda d: d["adapters"]["train"].update(gamma=-1.0), "adapters.train.gamma"),
    (lambda d: d["generation"]["targets"]["uniform"].update(gender=[0.7, 0.7]), "generation.targets.uniform.gender"),
    (lambda d: d["generation"].update(group="nurse"), "generation.group"),
    (lambda d: d["adapters"].update(placement="everywhere"), "adapters.placement"),
    (lambda d: d["schedule"].update(beta_max=2.0), "schedule"),
    (lambda d: d["world"].update(dim=0), "world.dim"),
    (lambda d: d.update(colour="red"), "colour"),
])
def test_bad_config_names_key(mutate, key):
    d = default_config("gender").to_dict()
    mutate(d)
    with pytest.raises(ConfigError) as info:
        from_dict(d)
    assert key in str(info.value)


def test_per_attribute_override_and_seed():
    d = default_config("intersectional").to_dict()
    d["adapters"]["per_attribute"] = {"race": {"gamma": 0.0}}
    cfg = from_dict(d)
    assert cfg.adapters.train_config("race").gamma == 0.0
    assert cfg.adapters.train_config("gender").gamma == 0.1
    assert cfg.adapters.train_config("gender", root_seed=5).seed == [5, 0]
