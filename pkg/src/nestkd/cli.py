"""Command line entry point: distill, eval, export, bench, make-synthetic, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from nestkd import __version__

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NO_CHECKPOINT, EXIT_NO_EMA = 0, 1, 2, 3, 4

log = logging.getLogger("nestkd")


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _snapshot(config, out: Path, command: str) -> None:
    from nestkd.config import code_hash, dump_config

    dump_config(config, out / "config.resolved.yaml")
    train = config.train_config()
    _write_json(out / "run.json", {
        "command": command, "version": __version__, "code_hash": code_hash(),
        "seeds": {"train": train.seed, "dataset": _asdict(config.dataset),
                  "teachers": [t.seed for t in config.teachers]},
        "deterministic": train.deterministic,
    })


def _asdict(obj):
    import dataclasses

    return dataclasses.asdict(obj)


def _eval_dims(config, width: int) -> list[int]:
    if config.eval.dims:
        return [int(m) for m in config.eval.dims]
    return [width // 2 ** i for i in range(7) if width // 2 ** i >= 1]


# -- distill -------------------------------------------------------------------

def _train_once(config, out: Path, **train_overrides):
    import dataclasses

    from nestkd.train import run_training

    train = dataclasses.replace(config.train_config(), **train_overrides)
    manifest = config.dataset.build()
    result = run_training(train, manifest, config.teacher_specs(), out, config.model.build(), config.aug_config())
    return result


def _knn_row(config, checkpoint: Path, dims) -> dict:
    from nestkd.evaluation import embed_dataset, knn_classify

    train_set = embed_dataset(checkpoint, config.eval.train.build())
    test_set = embed_dataset(checkpoint, config.eval.test.build())
    return {m: knn_classify(train_set, test_set, config.eval.k, m) for m in dims}


def _crop_ablation(config, out: Path) -> Path:
    from nestkd.evaluation import embed_dataset, linear_probe

    arms = {}
    for arm, ablate in (("crop", False), ("no_crop", True)):
        result = _train_once(config, out / arm, crop_ablation=ablate)
        width = config.model.build().width
        knn = _knn_row(config, result.deploy, [width])[width]
        probe = linear_probe(embed_dataset(result.deploy, config.eval.train.build()),
                             embed_dataset(result.deploy, config.eval.test.build()),
                             epochs=config.eval.probe_epochs, runs=config.eval.seeds)
        nonaligned = max(abs(r["cls_nonaligned"]) for r in result.records) if result.records else 0.0
        arms[arm] = {"knn": knn, "linear": probe.mean, "final_loss": result.records[-1]["total"],
                     "max_cls_nonaligned": nonaligned}
    rows = [[k, arms["crop"][k], arms["no_crop"][k], arms["crop"][k] - arms["no_crop"][k]]
            for k in ("knn", "linear", "final_loss", "max_cls_nonaligned")]
    return _write_csv(out / "crop_ablation.csv", ["metric", "crop", "no_crop", "delta"], rows)


def _nesting_ablation(config, out: Path) -> Path:
    depth = config.train_config().levels_depth
    width = config.model.build().width
    dims = _eval_dims(config, width)
    rows = []
    for arm, levels_depth in (("nested", depth), ("single", 1)):
        result = _train_once(config, out / arm, levels_depth=levels_depth)
        acc = _knn_row(config, result.deploy, dims)
        rows.append([arm, *[acc[m] for m in dims]])
    path = _write_csv(out / "nesting_ablation.csv", ["arm", *[f"m={m}" for m in dims]], rows)
    _plot_prefix_curve(out / "nesting_ablation.png", dims, {r[0]: r[1:] for r in rows})
    return path


def cmd_distill(args) -> int:
    from nestkd.config import load_config

    config = load_config(args.config, args.set)
    out = config.output_path()
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(config, out, "distill")
    if config.recipe == "crop-ablation":
        path = _crop_ablation(config, out)
    elif config.recipe == "nesting-ablation":
        path = _nesting_ablation(config, out)
    else:
        path = _train_once(config, out).checkpoint
    print(json.dumps({"status": "ok", "output": str(path)}))
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _plot_prefix_curve(path: Path, dims, series: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, values in series.items():
        ax.plot(dims, values, marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("embedding prefix dim")
    ax.set_ylabel("k-NN accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _save_png(path: Path, image) -> None:
    from PIL import Image

    Image.fromarray(image).save(path)


def cmd_eval(args) -> int:
    from nestkd import evaluation as ev
    from nestkd.config import load_config
    from nestkd.model import VisionTransformer, BackboneConfig, load_archive, prefixed

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        return _fail(EXIT_NO_CHECKPOINT, "MissingCheckpoint", f"checkpoint not found: {ckpt}")
    config = load_config(args.config, args.set)
    tasks = args.tasks.split(",") if args.tasks else list(config.eval.tasks)
    out = config.output_path() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    archive = load_archive(ckpt)
    use_ema = config.eval.use_ema and bool(prefixed(archive, "ema/"))
    model = VisionTransformer(BackboneConfig.from_dict(archive["config"]))
    model.load_state_dict(prefixed(archive, "ema/" if use_ema else "params/"))
    model.eval()
    width = model.config.width
    dims = _eval_dims(config, width)
    written = []
    need_sets = {"knn", "linear", "retrieval"} & set(tasks)
    if need_sets:
        train_set = ev.embed_dataset(model, config.eval.train.build(), model_id=str(ckpt))
        test_set = ev.embed_dataset(model, config.eval.test.build(), model_id=str(ckpt))
    if "knn" in tasks:
        acc = [ev.knn_classify(train_set, test_set, config.eval.k, m) for m in dims]
        base = [ev.random_subset_baseline(train_set, test_set, config.eval.k, m, config.eval.seeds).mean
                for m in dims]
        written.append(_write_csv(out / "knn.csv", ["dataset", *[f"m={m}" for m in dims]],
                                  [["synthetic", *acc], ["synthetic (random subset)", *base]]))
        _plot_prefix_curve(out / "knn.png", dims, {"prefix": acc, "random subset": base})
        written.append(out / "knn.png")
    if "linear" in tasks:
        res = ev.linear_probe(train_set, test_set, epochs=config.eval.probe_epochs, runs=config.eval.seeds)
        written.append(_write_json(out / "linear.json", res.to_dict()))
    if "retrieval" in tasks:
        rec = [ev.retrieval_recall(test_set, train_set, config.eval.K, m) for m in dims]
        written.append(_write_csv(out / "retrieval.csv", ["dataset", *[f"m={m}" for m in dims]],
                                  [[f"synthetic Recall@{config.eval.K}", *rec]]))
    if "pca" in tasks:
        import torch

        manifest = config.eval.test.build()
        for i, rec in enumerate(manifest.records[:config.eval.pca_images]):
            img = ev.eval_transform(rec.load())
            with torch.no_grad():
                patches = model(img[None]).patches[0]
            for m in dims:
                raster = ev.pca_rgb_map(patches, m, upscale=model.config.patch_size)
                path = out / f"pca_{i}_m{m}.png"
                _save_png(path, np.concatenate([img, raster], axis=1))
                written.append(path)
    if "runtime" in tasks:
        r = config.eval.runtime
        rows = ev.knn_runtime_profile(r.n, r.dims, r.k, r.repeats)
        written.append(_write_csv(out / "runtime.csv", ["dim", "mean_s", "std_s", "repeats"],
                                  [[x["dim"], x["mean_s"], x["std_s"], x["repeats"]] for x in rows]))
    if "bench" in tasks:
        b = config.eval.bench
        written.append(_write_json(out / "bench.json",
                                   ev.throughput_benchmark(model, b.batch, b.n_batches, b.precision, b.warmup)))
    if "impact" in tasks:
        impact = ev.teacher_impact(archive, None, config.eval.test.build())
        rows = [[t, *v["summary"], *v["features"]] for t, v in impact.items()]
        written.append(_write_csv(out / "impact.csv",
                                  ["teacher", "summary_mean", "summary_std", "features_mean", "features_std"], rows))
    print(json.dumps({"status": "ok", "outputs": [str(p) for p in written]}))
    return EXIT_OK


# -- export / bench / make-synthetic / report -------------------------------------

def cmd_export(args) -> int:
    from nestkd.train import export_deployed

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        return _fail(EXIT_NO_CHECKPOINT, "MissingCheckpoint", f"checkpoint not found: {ckpt}")
    path = export_deployed(ckpt, use_ema=args.ema, out_path=args.out)
    print(json.dumps({"status": "ok", "output": str(path)}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from nestkd.bench import bench_kernels

    rows = bench_kernels(n=args.n, dims=[int(d) for d in args.dims.split(",")], repeats=args.repeats)
    out = Path(args.out) if args.out else None
    for r in rows:
        print(f"{r['kernel']:<16} {r['backend']:<9} {r['case']:<12} {r['mean_s']:.4f}s")
    if out:
        _write_csv(out, list(rows[0]), [list(r.values()) for r in rows])
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    from nestkd.data import synthetic_tile_dataset

    manifest = synthetic_tile_dataset(args.seed, args.classes, args.per_class, args.size)
    out = Path(args.out)
    path = manifest.save(out / "manifest.tsv", out)
    print(json.dumps({"status": "ok", "manifest": str(path), "tiles": len(manifest)}))
    return EXIT_OK


def _markdown_table(path: Path) -> str:
    with path.open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return ""

    def fmt(v):
        try:
            return f"{float(v):.4f}"
        except ValueError:
            return v

    head, body = rows[0], rows[1:]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(fmt(v) for v in r) + " |" for r in body]
    return "\n".join(lines)


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    tables = sorted(root.rglob("*.csv"))
    parts = [f"# Results for {root.name}", ""]
    for t in tables:
        parts += [f"## {t.relative_to(root).as_posix()}", "", _markdown_table(t), ""]
    out = Path(args.out) if args.out else root / "report.md"
    out.write_text("\n".join(parts), encoding="utf-8")
    print(json.dumps({"status": "ok", "output": str(out), "tables": len(tables)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestkd", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="train a student (or run an ablation recipe)")
    d.add_argument("config", nargs="?")
    d.add_argument("--set", action="append", metavar="KEY=VALUE", help="dot-path override, repeatable")
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("config", nargs="?")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", help="comma-separated subset of knn,linear,retrieval,pca,runtime,bench,impact")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export", help="write a head-free deploy archive")
    x.add_argument("checkpoint")
    x.add_argument("--ema", action="store_true", help="export the EMA weights")
    x.add_argument("--out")
    x.set_defaults(fn=cmd_export)

    b = sub.add_parser("bench", help="compare compiled and python kernels")
    b.add_argument("--n", type=int, default=10_000)
    b.add_argument("--dims", default="768,384,12")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("make-synthetic", help="write a synthetic tile dataset")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(fn=cmd_make_synthetic)

    r = sub.add_parser("report", help="collect CSV results into Markdown tables")
    r.add_argument("run_dir")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    from nestkd.config import KeyPathError
    from nestkd.errors import ConfigError, MissingEMA, NestKDError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    start = time.perf_counter()
    try:
        return args.fn(args)
    except KeyPathError as exc:
        return _fail(EXIT_CONFIG, "ConfigError", str(exc), key=exc.path)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "ConfigError", str(exc))
    except MissingEMA as exc:
        return _fail(EXIT_NO_EMA, "MissingEMA", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_ERROR, "FileNotFound", str(exc))
    except NestKDError as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))
    finally:
        log.info("done in %.1fs", time.perf_counter() - start)


if __name__ == "__main__":
    sys.exit(main())
