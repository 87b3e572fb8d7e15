import numpy as np
import pytest
import torch

from nestkd.errors import ConfigError, MissingEMA, ShapeError
from nestkd.model import (
    BackboneConfig,
    backbone_flops,
    build_student,
    count_params,
    deployed_cost,
    ema_update,
    export_backbone,
    forward,
    load_archive,
    load_backbone,
    parameter_checksum,
    preset,
    save_archive,
)


def _images(n=2, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).integers(0, 256, (n, 224, 224, 3), dtype=np.uint8))


@pytest.mark.parametrize("name,params,tol", [("B", 87e6, 0.02), ("S", 22e6, 0.05)])
def test_preset_params(name, params, tol):
    n = count_params(build_student(name))
    assert abs(n - params) / params <= tol


@pytest.mark.parametrize("name,gflops", [("B", 44.60), ("S", 11.05)])
def test_preset_flops(name, gflops):
    f = backbone_flops(preset(name)) / 1e9
    assert abs(f - gflops) / gflops <= 0.10


def test_flops_frozen_values():
    # 2 * (patch embed + 12 blocks * tokens * d * (3d + d + 2 * 4d)), 261 tokens incl. CLS + 4 registers
    assert backbone_flops(preset("B")) == 2 * (256 * 3 * 196 * 768 + 12 * 261 * 768 * 9216) == 44_567_101_440
    assert backbone_flops(preset("tiny")) < backbone_flops(preset("S")) < backbone_flops(preset("B"))
    with_attn = backbone_flops(preset("S"), include_attention_matmuls=True)
    assert with_attn - backbone_flops(preset("S")) == 2 * 12 * 2 * 261 ** 2 * 384


def test_presets_geometry():
    for name in ("B", "S", "tiny"):
        c = preset(name)
        assert c.patch_size == 14 and c.grid == 16 and c.registers == 4
    assert preset("B").width == 768 and preset("S").width == 384


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(depth=2, width=100, heads=3)
    with pytest.raises(ConfigError):
        BackboneConfig(depth=2, width=96, heads=3, patch_size=15)
    with pytest.raises(ConfigError):
        BackboneConfig.from_dict({**preset("tiny").to_dict(), "bogus": 1})
    assert BackboneConfig.from_dict(preset("tiny").to_dict()) == preset("tiny")


def test_forward_shapes_and_registers():
    model = build_student("tiny", seed=0)
    out = forward(model, _images(3))
    assert out.cls.shape == (3, 96)
    assert out.patches.shape == (3, 256, 96)
    assert out.registers.shape == (3, 4, 96)
    assert out.grid == 16


def test_forward_rejects_wrong_size():
    model = build_student("tiny")
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 3, 112, 112))


def test_forward_deterministic_and_seeded():
    a, b = build_student("tiny", seed=3), build_student("tiny", seed=3)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(a) != parameter_checksum(build_student("tiny", seed=4))
    x = _images(2)
    torch.testing.assert_close(forward(a, x).cls, forward(b, x).cls, rtol=0, atol=0)


def test_uint8_and_float_inputs_agree():
    model = build_student("tiny")
    x = _images(1)
    pre = model.preprocess(x)
    torch.testing.assert_close(forward(model, x).cls, forward(model, pre).cls)
    ref = (x.permute(0, 3, 1, 2).float() / 255 - model.pixel_mean) / model.pixel_std
    torch.testing.assert_close(pre, ref, rtol=1e-5, atol=1e-5)


def test_ema_update_oracle():
    s = {"w": torch.tensor([1.0, 2.0])}
    t = {"w": torch.tensor([3.0, 4.0])}
    ema_update(s, t, 0.75)
    torch.testing.assert_close(t["w"], torch.tensor([2.5, 3.5]))
    ema_update(s, t, 1.0)
    torch.testing.assert_close(t["w"], torch.tensor([2.5, 3.5]))
    ema_update(s, t, 0.0)
    torch.testing.assert_close(t["w"], s["w"])


def test_ema_update_errors():
    with pytest.raises(ShapeError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(ShapeError):
        ema_update({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(2)}, 1.5)


def test_archive_roundtrip(tmp_path):
    model = build_student("tiny", seed=1)
    path = export_backbone(tmp_path / "d.pt", model.config, model.state_dict(), step=7)
    assert not list(tmp_path.glob("*.tmp"))
    back = load_backbone(path)
    assert parameter_checksum(back) == parameter_checksum(model)
    assert load_archive(path)["step"] == 7
    with pytest.raises(MissingEMA):
        load_backbone(path, use_ema=True)


def test_archive_rejects_foreign_file(tmp_path):
    torch.save({"a": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_archive(tmp_path / "x.pt")


def test_save_archive_is_byte_stable(tmp_path):
    entries = {"b": torch.arange(3), "a": {"x": 1}}
    a = save_archive(tmp_path / "a.pt", entries).read_bytes()
    b = save_archive(tmp_path / "b.pt", dict(reversed(entries.items()))).read_bytes()
    assert a == b


def test_deployed_cost_heads_add_no_flops():
    model = build_student("tiny")
    head = torch.nn.Linear(96, 10)
    bare, with_head = deployed_cost(model), deployed_cost(model, head_bank=head)
    assert bare["flops"] == with_head["flops"]
    assert with_head["params"] - bare["params"] == 970
