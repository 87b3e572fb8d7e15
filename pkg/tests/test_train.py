import json
import math

import numpy as np
import pytest
import torch

from nestkd.augment import VisualAugConfig
from nestkd.errors import ConfigError, MissingEMA, NonFiniteLoss
from nestkd.model import BackboneConfig, build_student, count_params, load_archive, load_backbone, parameter_checksum
from nestkd.train import TrainConfig, Trainer, cosine_schedule, export_deployed, run_training

MICRO = BackboneConfig(depth=1, width=32, heads=2)


def _cfg(**kw):
    base = dict(total_steps=20, batch_size=4, lr_start=1e-3, lr_end=1e-4, levels_depth=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule_endpoints_exact():
    assert cosine_schedule(1e-4, 1e-5, 0, 300_000) == 1e-4
    assert cosine_schedule(1e-4, 1e-5, 300_000, 300_000) == 1e-5
    assert cosine_schedule(0.01, 0.02, 0, 10) == 0.01
    assert cosine_schedule(0.01, 0.02, 10, 10) == 0.02
    assert cosine_schedule(0.994, 1.0, 0, 7) == 0.994
    assert cosine_schedule(0.994, 1.0, 7, 7) == 1.0


def test_schedule_midpoint_and_clamp():
    assert cosine_schedule(1e-4, 1e-5, 50, 100) == pytest.approx(5.5e-5, rel=1e-12)
    assert cosine_schedule(1e-4, 1e-5, -5, 100) == 1e-4
    assert cosine_schedule(1e-4, 1e-5, 500, 100) == 1e-5
    vals = [cosine_schedule(1.0, 0.0, s, 50) for s in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert cosine_schedule(3.0, 1.0, 25, 100) == pytest.approx(1.0 + 2.0 * (1 + math.cos(math.pi / 4)) / 2)


def test_default_config_values():
    c = TrainConfig()
    assert (c.lr_start, c.lr_end) == (1e-4, 1e-5)
    assert (c.wd_start, c.wd_end) == (0.01, 0.02)
    assert (c.ema_start, c.ema_end) == (0.994, 1.0)
    assert c.batch_size == 1024 and c.total_steps == 300_000 and c.levels_depth == 5
    assert c.tiles_per_step == 512
    assert TrainConfig(crop_ablation=True).tiles_per_step == 1024


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)
    with pytest.raises(ConfigError):
        TrainConfig(ema_start=0.9, ema_end=1.1)
    with pytest.raises(ConfigError):
        TrainConfig(precision="fp8")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


@pytest.fixture
def trainer(small_dataset, two_teachers):
    return Trainer(_cfg(), MICRO, two_teachers, small_dataset)


def test_first_step_uses_start_values(trainer):
    _, rec = trainer.train_step(trainer.batch_for_step(0))
    assert rec["step"] == 1
    assert rec["lr"] == 1e-3 and rec["wd"] == 0.01 and rec["ema_decay"] == 0.994
    groups = {g["decay"]: g for g in trainer.optimizer.param_groups}
    assert groups[True]["weight_decay"] == 0.01 and groups[False]["weight_decay"] == 0.0
    assert trainer.ema_decay_at(trainer.config.total_steps) == 1.0


def test_no_decay_group_membership(trainer):
    no_decay = {id(p) for g in trainer.optimizer.param_groups if not g["decay"] for p in g["params"]}
    assert id(trainer.student.cls_token) in no_decay
    assert id(trainer.student.pos_embed) in no_decay
    assert all(p.ndim >= 2 for g in trainer.optimizer.param_groups if g["decay"] for p in g["params"])


def test_heads_and_teachers(trainer):
    assert len(trainer.bank) == 2 * 2 * 3
    before = {n: parameter_checksum(t) for n, t in trainer.teachers.items()}
    for s in range(2):
        trainer.train_step(trainer.batch_for_step(s))
    assert before == {n: parameter_checksum(t) for n, t in trainer.teachers.items()}


def test_ema_tracks_student(trainer):
    ema_before = parameter_checksum(trainer.ema)
    trainer.train_step(trainer.batch_for_step(0))
    assert parameter_checksum(trainer.ema) != ema_before
    for p_s, p_e in zip(trainer.student.parameters(), trainer.ema.parameters()):
        assert not p_e.requires_grad


def test_batch_is_function_of_step(trainer):
    a, b = trainer.batch_for_step(3), trainer.batch_for_step(3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.aligned[0], y.aligned[0])
    assert not np.array_equal(a[0].aligned[0], trainer.batch_for_step(4)[0].aligned[0])


def test_crop_ablation_batch(small_dataset, two_teachers):
    tr = Trainer(_cfg(crop_ablation=True), MICRO, two_teachers, small_dataset)
    batch = tr.batch_for_step(0)
    assert len(batch) == 4 and batch[0].nonaligned is None
    rep, rec = tr.train_step(batch)
    assert rec["cls_nonaligned"] == 0.0


def test_non_finite_loss(trainer):
    with torch.no_grad():
        trainer.student.norm.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as exc:
        trainer.train_step(trainer.batch_for_step(0))
    assert exc.value.breakdown and any(math.isnan(v) for v in exc.value.breakdown.values())


def test_identical_runs(small_dataset, two_teachers):
    recs = []
    for _ in range(2):
        tr = Trainer(_cfg(), MICRO, two_teachers, small_dataset)
        recs.append([tr.train_step(tr.batch_for_step(s))[1] for s in range(3)])
    assert recs[0] == recs[1]


def test_checkpoint_roundtrip(trainer, tmp_path):
    trainer.train_step(trainer.batch_for_step(0))
    path = trainer.save(tmp_path / "c.pt")
    back = Trainer.from_checkpoint(path, trainer.manifest)
    assert back.step == 1
    assert parameter_checksum(back.student) == parameter_checksum(trainer.student)
    assert parameter_checksum(back.ema) == parameter_checksum(trainer.ema)
    assert parameter_checksum(back.bank) == parameter_checksum(trainer.bank)
    archive = load_archive(path)
    assert {"optim", "step", "config", "train_config", "teachers", "head_spec"} <= set(archive)
    assert any(k.startswith("ema/") for k in archive) and any(k.startswith("head/") for k in archive)


def test_run_training_outputs(small_dataset, two_teachers, tmp_path):
    cfg = _cfg(total_steps=6, checkpoint_every=3)
    res = run_training(cfg, small_dataset, two_teachers, tmp_path, MICRO)
    lines = [json.loads(x) for x in res.metrics.read_text().splitlines()]
    assert [r["step"] for r in lines] == list(range(1, 7))
    for key in ("lr", "wd", "ema_decay", "total", "cls_aligned", "cls_nonaligned", "patch_aligned", "breakdown"):
        assert key in lines[0]
    assert (tmp_path / "checkpoints" / "step_0000003.pt").exists()
    assert res.checkpoint.name == "step_0000006.pt"
    assert lines[-1]["lr"] == cosine_schedule(1e-3, 1e-4, 5, 6)
    deployed = load_backbone(res.deploy)
    assert count_params(deployed) == count_params(build_student(MICRO))


def test_resume_truncates_metrics(small_dataset, two_teachers, tmp_path):
    cfg = _cfg(total_steps=4, checkpoint_every=2)
    run_training(cfg, small_dataset, two_teachers, tmp_path, MICRO)
    res = run_training(cfg, small_dataset, two_teachers, tmp_path, MICRO,
                       resume=tmp_path / "checkpoints" / "step_0000002.pt")
    steps = [json.loads(x)["step"] for x in res.metrics.read_text().splitlines()]
    assert steps == [1, 2, 3, 4]


def test_export_deployed(trainer, tmp_path):
    trainer.train_step(trainer.batch_for_step(0))
    ckpt = trainer.save(tmp_path / "c.pt")
    a = export_deployed(ckpt, use_ema=True, out_path=tmp_path / "a.pt")
    b = export_deployed(ckpt, use_ema=True, out_path=tmp_path / "b.pt")
    assert a.read_bytes() == b.read_bytes()
    archive = load_archive(a)
    assert not any(k.startswith(("head/", "ema/", "optim")) for k in archive)
    model = load_backbone(a)
    assert parameter_checksum(model) == parameter_checksum(trainer.ema)
    assert count_params(model) == count_params(build_student(MICRO))
    default = export_deployed(ckpt, use_ema=False)
    assert default.name == "c_deploy.pt"
    with pytest.raises(MissingEMA):
        export_deployed(a, use_ema=True, out_path=tmp_path / "x.pt")


def test_smoke_run_loss_decreases(small_dataset, two_teachers, tmp_path):
    cfg = _cfg(total_steps=100, batch_size=8)
    res = run_training(cfg, small_dataset, two_teachers, tmp_path, MICRO, aug_config=VisualAugConfig())
    assert res.records[-1]["total"] < res.records[0]["total"]
