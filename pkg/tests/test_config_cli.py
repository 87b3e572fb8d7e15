import csv
import json

import pytest
import yaml

from nestkd import cli
from nestkd.config import KeyPathError, apply_overrides, code_hash, from_dict, load_config
from nestkd.model import load_archive, prefixed

# micro everything so a full distill + eval round-trip runs in seconds
MICRO_CFG = {
    "dataset": {"synthetic": {"seed": 0, "classes": 2, "per_class": 4, "size": 224}},
    "model": {"preset": "tiny", "depth": 1, "width": 32, "heads": 2},
    "teachers": [{"seed": 1, "dim": 16, "grid": 4, "depth": 2},
                 {"seed": 2, "dim": 8, "grid": 4, "depth": 2}],
    "train": {"total_steps": 3, "batch_size": 4, "checkpoint_every": 0},
    "eval": {
        "dims": [32, 8, 2],
        "k": 3, "K": 2, "seeds": 2, "probe_epochs": 3,
        "train": {"synthetic": {"seed": 100, "classes": 2, "per_class": 4, "size": 224}},
        "test": {"synthetic": {"seed": 200, "classes": 2, "per_class": 3, "size": 224}},
        "runtime": {"n": 200, "dims": [32, 8], "repeats": 1, "k": 3},
        "bench": {"batch": 2, "n_batches": 2, "precision": "fp32", "warmup": 1},
    },
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "exp.yaml"
    data = dict(MICRO_CFG, output_dir=str(tmp_path / "run"))
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg = root / "exp.yaml"
    cfg.write_text(yaml.safe_dump(dict(MICRO_CFG, output_dir=str(root / "run"))))
    assert cli.main(["distill", str(cfg)]) == 0
    return cfg, root / "run"


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_defaults_validate():
    cfg = from_dict({})
    assert cfg.train_config().total_steps == 300_000
    assert len(cfg.teacher_specs()) == 2


def test_unknown_key_reports_path():
    with pytest.raises(KeyPathError) as ei:
        from_dict({"eval": {"runtime": {"nn": 3}}})
    assert ei.value.path == "eval.runtime.nn"
    with pytest.raises(KeyPathError) as ei:
        from_dict({"train": {"learning_rate": 1}})
    assert ei.value.path == "train.learning_rate"


def test_semantic_errors_name_section():
    with pytest.raises(KeyPathError) as ei:
        from_dict({"recipe": "bogus"})
    assert ei.value.path == "recipe"
    with pytest.raises(KeyPathError) as ei:
        from_dict({"train": {"batch_size": -2}})
    assert ei.value.path == "train"


def test_overrides_parse_yaml_values():
    data = apply_overrides({"train": {"seed": 1}}, ["train.lr_start=2e-4", "eval.dims=[8, 4]"])
    assert data["train"] == {"seed": 1, "lr_start": 2e-4}
    assert data["eval"]["dims"] == [8, 4]
    with pytest.raises(KeyPathError):
        apply_overrides({"recipe": "x"}, ["recipe.a=1"])


def test_output_dir_env(monkeypatch, cfg_file, tmp_path):
    monkeypatch.setenv("NESTKD_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert load_config(cfg_file).output_path() == tmp_path / "elsewhere"


def test_code_hash_stable():
    h = code_hash()
    assert len(h) == 40 and h == code_hash()


def test_malformed_config_exit_2(cfg_file, capsys):
    rc = cli.main(["distill", str(cfg_file), "--set", "model.widht=3"])
    assert rc == cli.EXIT_CONFIG
    assert _err(capsys)["key"] == "model.widht"


def test_missing_checkpoint_exit_3(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.pt")]) == cli.EXIT_NO_CHECKPOINT
    assert _err(capsys)["error"] == "MissingCheckpoint"
    assert cli.main(["export", str(tmp_path / "nope.pt")]) == cli.EXIT_NO_CHECKPOINT


def test_distill_writes_snapshot(trained):
    _, run = trained
    meta = json.loads((run / "run.json").read_text())
    assert meta["command"] == "distill" and meta["deterministic"] is True
    assert meta["code_hash"] == code_hash()
    resolved = yaml.safe_load((run / "config.resolved.yaml").read_text())
    assert resolved["train"]["total_steps"] == 3
    assert (run / "deploy_ema.pt").is_file()
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3]


def test_export_without_ema_exit_4(trained, tmp_path, capsys):
    _, run = trained
    plain = tmp_path / "plain.pt"
    assert cli.main(["export", str(next((run / "checkpoints").glob("*.pt"))), "--out", str(plain)]) == 0
    assert not prefixed(load_archive(plain), "ema/")
    capsys.readouterr()
    assert cli.main(["export", str(plain), "--ema"]) == cli.EXIT_NO_EMA
    assert _err(capsys)["error"] == "MissingEMA"


def test_eval_tasks(trained, tmp_path):
    cfg, run = trained
    ckpt = next((run / "checkpoints").glob("*.pt"))
    out = tmp_path / "ev"
    rc = cli.main(["eval", str(cfg), "--checkpoint", str(ckpt), "--set", f"output_dir={out}",
                   "--tasks", "knn,linear,retrieval,pca,runtime,bench,impact"])
    assert rc == 0
    ev = out / "eval"
    with (ev / "knn.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["dataset", "m=32", "m=8", "m=2"]
    assert len(rows) == 3 and all(0 <= float(v) <= 1 for v in rows[1][1:])
    assert sorted(p.name for p in ev.glob("pca_*.png")) == ["pca_0_m2.png", "pca_0_m32.png", "pca_0_m8.png"]
    bench = json.loads((ev / "bench.json").read_text())
    assert bench["batches"] == 2 and bench["mean"] > 0
    assert len(json.loads((ev / "linear.json").read_text())["values"]) == 2
    with (ev / "runtime.csv").open() as fh:
        assert [r["dim"] for r in csv.DictReader(fh)] == ["32", "8"]
    with (ev / "impact.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_make_synthetic_and_report(tmp_path):
    assert cli.main(["make-synthetic", str(tmp_path / "ds"), "--classes", "2", "--per-class", "2",
                     "--size", "224"]) == 0
    lines = (tmp_path / "ds" / "manifest.tsv").read_text().splitlines()
    assert lines[0].startswith("#") and len([x for x in lines if not x.startswith("#")]) == 4
    (tmp_path / "r").mkdir()
    (tmp_path / "r" / "a.csv").write_text("metric,value\nknn,0.5\n")
    assert cli.main(["report", str(tmp_path / "r")]) == 0
    text = (tmp_path / "r" / "report.md").read_text()
    assert "| knn | 0.5000 |" in text


def test_crop_ablation_recipe(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump(dict(MICRO_CFG, output_dir=str(tmp_path / "run"), recipe="crop-ablation")))
    assert cli.main(["distill", str(cfg), "--set", "train.total_steps=2"]) == 0
    with (tmp_path / "run" / "crop_ablation.csv").open() as fh:
        rows = {r["metric"]: r for r in csv.DictReader(fh)}
    assert set(rows) == {"knn", "linear", "final_loss", "max_cls_nonaligned"}
    assert float(rows["max_cls_nonaligned"]["no_crop"]) == 0.0
    assert float(rows["max_cls_nonaligned"]["crop"]) > 0.0


def test_bench_command(tmp_path):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--n", "200", "--dims", "16", "--repeats", "1", "--out", str(out)]) == 0
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["kernel"] for r in rows} >= {"knn_topk", "stain_transform"}

