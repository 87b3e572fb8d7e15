"""Experiment configuration: YAML in, validated nested dataclasses out."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import re

import yaml

from nestkd.augment import VisualAugConfig
from nestkd.data import DatasetManifest, synthetic_tile_dataset
from nestkd.errors import ConfigError
from nestkd.model import BackboneConfig, preset
from nestkd.teachers import TeacherSpec, make_synthetic_teacher
from nestkd.train import TrainConfig

OUTPUT_ENV = "NESTKD_OUTPUT_DIR"
RECIPES = (None, "crop-ablation", "nesting-ablation")
EVAL_TASKS = ("knn", "linear", "retrieval", "pca", "runtime", "bench", "impact")


class KeyPathError(ConfigError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class SyntheticSpec:
    seed: int = 0
    classes: int = 4
    per_class: int = 50
    size: int = 256


@dataclass
class DataSource:
    manifest: str | None = None
    synthetic: SyntheticSpec | None = None

    def build(self) -> DatasetManifest:
        if self.manifest:
            return DatasetManifest.load(self.manifest)
        s = self.synthetic or SyntheticSpec()
        return synthetic_tile_dataset(s.seed, s.classes, s.per_class, s.size)


@dataclass
class ModelSection:
    preset: str = "tiny"
    depth: int | None = None
    width: int | None = None
    heads: int | None = None
    patch_size: int | None = None
    registers: int | None = None

    def build(self) -> BackboneConfig:
        overrides = {f.name: getattr(self, f.name) for f in fields(self)
                     if f.name != "preset" and getattr(self, f.name) is not None}
        return preset(self.preset, **overrides)


@dataclass
class TeacherEntry:
    name: str | None = None
    dim: int = 64
    grid: int = 16
    loader: str = "synthetic"
    seed: int = 0
    depth: int = 2
    mean: list | None = None
    std: list | None = None
    options: dict = field(default_factory=dict)

    def build(self) -> TeacherSpec:
        if self.loader == "synthetic":
            spec = make_synthetic_teacher(self.seed, self.dim, self.grid, self.depth, self.name)
            if self.mean is not None or self.std is not None:
                spec = dataclasses.replace(spec, mean=tuple(self.mean or spec.mean), std=tuple(self.std or spec.std))
            return spec
        if not self.name:
            raise ConfigError(f"teacher with loader {self.loader!r} needs a name")
        kw = {}
        if self.mean is not None:
            kw["mean"] = tuple(self.mean)
        if self.std is not None:
            kw["std"] = tuple(self.std)
        return TeacherSpec(self.name, self.dim, self.grid, loader=self.loader, options=self.options, **kw)


@dataclass
class RuntimeSection:
    n: int = 10_000
    dims: list = field(default_factory=lambda: [768, 384, 12])
    repeats: int = 5
    k: int = 10


@dataclass
class BenchSection:
    batch: int = 32
    n_batches: int = 500
    precision: str = "half"
    warmup: int = 10


@dataclass
class EvalSection:
    tasks: list = field(default_factory=lambda: ["knn", "linear", "retrieval", "pca"])
    dims: list | None = None
    k: int = 10
    K: int = 5
    seeds: int = 5
    probe_epochs: int = 100
    pca_images: int = 1
    use_ema: bool = True
    train: DataSource = field(default_factory=lambda: DataSource(synthetic=SyntheticSpec(seed=100, per_class=40)))
    test: DataSource = field(default_factory=lambda: DataSource(synthetic=SyntheticSpec(seed=200, per_class=20)))
    runtime: RuntimeSection = field(default_factory=RuntimeSection)
    bench: BenchSection = field(default_factory=BenchSection)


@dataclass
class ExperimentConfig:
    dataset: DataSource = field(default_factory=lambda: DataSource(synthetic=SyntheticSpec()))
    model: ModelSection = field(default_factory=ModelSection)
    teachers: list = field(default_factory=lambda: [TeacherEntry(seed=1), TeacherEntry(seed=2)])
    train: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)
    recipe: str | None = None
    output_dir: str = "runs/default"

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def aug_config(self) -> VisualAugConfig:
        return VisualAugConfig(**self.augment)

    def teacher_specs(self) -> list[TeacherSpec]:
        specs = [t.build() for t in self.teachers]
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise KeyPathError("teachers", f"duplicate teacher names {names}")
        return specs

    def output_path(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-4`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)


# sections whose keys are checked against another dataclass's fields
_PASSTHROUGH = {"train": TrainConfig, "augment": VisualAugConfig}
_LISTS = {"teachers": TeacherEntry}


def _build(cls, data: Any, path: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise KeyPathError(path, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise KeyPathError(sub, "unknown key")
        if key in _PASSTHROUGH and cls is ExperimentConfig:
            allowed = {f.name for f in fields(_PASSTHROUGH[key])}
            value = value or {}
            if not isinstance(value, Mapping):
                raise KeyPathError(sub, "expected a mapping")
            for k in value:
                if k not in allowed:
                    raise KeyPathError(f"{sub}.{k}", "unknown key")
            kwargs[key] = dict(value)
        elif key in _LISTS and cls is ExperimentConfig:
            if not isinstance(value, list):
                raise KeyPathError(sub, "expected a list")
            kwargs[key] = [_build(_LISTS[key], v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            target = _nested_type(cls, key)
            kwargs[key] = _build(target, value, sub) if target is not None and value is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise KeyPathError(path, str(exc)) from None


_NESTED = {
    (ExperimentConfig, "dataset"): DataSource,
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "eval"): EvalSection,
    (DataSource, "synthetic"): SyntheticSpec,
    (EvalSection, "train"): DataSource,
    (EvalSection, "test"): DataSource,
    (EvalSection, "runtime"): RuntimeSection,
    (EvalSection, "bench"): BenchSection,
}


def _nested_type(cls, key):
    return _NESTED.get((cls, key))


def validate(config: ExperimentConfig) -> ExperimentConfig:
    """Semantic checks beyond the key schema; every error names its key path."""
    if config.recipe not in RECIPES:
        raise KeyPathError("recipe", f"must be one of {RECIPES[1:]} or null")
    for t in config.eval.tasks:
        if t not in EVAL_TASKS:
            raise KeyPathError("eval.tasks", f"unknown task {t!r}; choose from {EVAL_TASKS}")
    if config.eval.bench.precision not in ("half", "fp32"):
        raise KeyPathError("eval.bench.precision", "must be 'half' or 'fp32'")
    for section, build in (("train", config.train_config), ("augment", config.aug_config),
                           ("model", config.model.build), ("teachers", config.teacher_specs)):
        try:
            build()
        except KeyPathError:
            raise
        except (ConfigError, ValueError, KeyError, TypeError) as exc:
            raise KeyPathError(section, str(exc)) from None
    return config


def from_dict(data: Mapping | None) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data or {}, ""))


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise KeyPathError(item, "override must look like key.path=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), _yaml_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries (values parsed as YAML scalars/lists)."""
    data = dict(data)
    for item in overrides or ():
        keys, value = parse_override(item)
        node = data
        for i, k in enumerate(keys[:-1]):
            child = node.get(k)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise KeyPathError(".".join(keys[:i + 1]), "is not a section")
            node[k] = child = dict(child)
            node = child
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = _yaml_load(fh) or {}
        if not isinstance(data, dict):
            raise KeyPathError("", "config file must hold a mapping")
    return from_dict(apply_overrides(data, overrides))


def dump_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
    return path


def code_hash() -> str:
    """Git-style tree hash over the package sources (blob hashes of every file)."""
    root = Path(__file__).resolve().parent
    lines = []
    for p in sorted(root.rglob("*")):
        if p.suffix not in (".py", ".pyx") or "__pycache__" in p.parts:
            continue
        data = p.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        lines.append(f"{blob} {p.relative_to(root).as_posix()}")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()
