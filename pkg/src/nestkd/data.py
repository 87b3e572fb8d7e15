"""Tile manifests, magnification-proportion sampling and synthetic tiles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from nestkd import kernels
from nestkd.errors import EmptyDataset, InsufficientTiles, InvalidSize

log = logging.getLogger(__name__)

MANIFEST_HEADER = "#nestkd-manifest v1"
MIN_TILE_SIZE = 224
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class Magnification(str, Enum):
    X10 = "10x"
    X20 = "20x"
    X40 = "40x"

    @classmethod
    def parse(cls, value) -> "Magnification":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


MAGNIFICATION_ORDER = (Magnification.X10, Magnification.X20, Magnification.X40)
# 20/40/40 split over 10x/20x/40x used when sampling the training tiles
DEFAULT_PROPORTIONS = {Magnification.X10: 0.2, Magnification.X20: 0.4, Magnification.X40: 0.4}


@dataclass(frozen=True, eq=False)
class TileRecord:
    """One tile: either a file path or an in-memory RGB buffer."""

    image: str | np.ndarray
    magnification: Magnification
    source_id: str
    label: int | None = None

    def load(self) -> np.ndarray:
        """Return the tile as an ``(H, W, 3)`` uint8 array."""
        if isinstance(self.image, np.ndarray):
            return self.image
        with Image.open(self.image) as im:
            return np.asarray(im.convert("RGB"))

    @property
    def path(self) -> str | None:
        return self.image if isinstance(self.image, str) else None


def _normalize_proportions(proportions: Mapping) -> dict[Magnification, float]:
    props = {Magnification.parse(k): float(v) for k, v in proportions.items()}
    for k, v in props.items():
        if not (v >= 0.0 and math.isfinite(v)):
            raise ValueError(f"proportion for {k.value} must be a finite non-negative number")
    total = sum(props.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1.0, got {total!r}")
    return props


def proportions_for(records: Sequence[TileRecord]) -> dict[Magnification, float]:
    """The default 20/40/40 split restricted to the magnifications present."""
    present = {r.magnification for r in records}
    weights = {m: DEFAULT_PROPORTIONS[m] for m in MAGNIFICATION_ORDER if m in present}
    total = sum(weights.values())
    return {m: w / total for m, w in weights.items()}


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    records: tuple[TileRecord, ...]
    proportions: Mapping[Magnification, float]
    seed: int = 0
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        props = _normalize_proportions(self.proportions)
        object.__setattr__(self, "proportions", props)
        missing = {r.magnification for r in self.records} - set(props)
        if missing:
            names = sorted(m.value for m in missing)
            raise ValueError(f"records use magnifications without a proportion: {names}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def labels(self) -> np.ndarray | None:
        if any(r.label is None for r in self.records):
            return None
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "DatasetManifest":
        recs = [self.records[i] for i in indices]
        return DatasetManifest(recs, proportions_for(recs) if recs else self.proportions, self.seed, dict(self.metadata))

    def save(self, path: str | Path, image_root: str | Path | None = None) -> Path:
        """Write the tab-separated manifest.

        In-memory tiles are written as PNGs below ``image_root`` (default: a
        ``tiles/`` folder next to the manifest); paths are stored relative to
        the manifest when possible.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        image_root = Path(image_root) if image_root is not None else path.parent / "tiles"
        lines = [MANIFEST_HEADER]
        props = ",".join(f"{m.value}={self.proportions[m]!r}" for m in MAGNIFICATION_ORDER if m in self.proportions)
        lines.append(f"#proportions {props}")
        lines.append(f"#seed {int(self.seed)}")
        for i, rec in enumerate(self.records):
            if isinstance(rec.image, np.ndarray):
                image_root.mkdir(parents=True, exist_ok=True)
                img_path = image_root / f"{i:06d}_{_safe(rec.source_id)}.png"
                Image.fromarray(rec.image).save(img_path)
            else:
                img_path = Path(rec.image)
            try:
                ref = img_path.resolve().relative_to(path.parent.resolve()).as_posix()
            except ValueError:
                ref = str(img_path)
            label = "" if rec.label is None else str(int(rec.label))
            lines.append(f"{ref}\t{rec.magnification.value}\t{label}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        text = path.read_text(encoding="utf-8").splitlines()
        if not text or text[0].strip() != MANIFEST_HEADER:
            raise ValueError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
        proportions = None
        seed = 0
        records = []
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(" ")
                if key == "proportions" and value:
                    proportions = {k: float(v) for k, v in (p.split("=") for p in value.split(","))}
                elif key == "seed" and value:
                    seed = int(value)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            ref, mag, label = parts
            img = Path(ref)
            if not img.is_absolute():
                img = path.parent / img
            records.append(
                TileRecord(str(img), Magnification.parse(mag), source_id=Path(ref).stem,
                           label=int(label) if label != "" else None)
            )
        if not records:
            raise EmptyDataset(f"{path}: manifest has no records")
        if proportions is None:
            proportions = proportions_for(records)
        return cls(records, proportions, seed)


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def scan_image_folder(root, magnification, label_rule=None) -> DatasetManifest:
    """Build a manifest from every decodable image below ``root``.

    ``label_rule`` is ``None`` (unlabeled), ``"folder"`` (label = rank of the
    parent folder name among all parent names) or a mapping from parent
    folder name to class index. Files that fail to decode, or are smaller than
    224 px on a side, are skipped and counted in ``metadata["skipped"]``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    magnification = Magnification.parse(magnification)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if label_rule == "folder":
        names = sorted({p.parent.name for p in files})
        label_map = {n: i for i, n in enumerate(names)}
    elif isinstance(label_rule, Mapping):
        label_map = dict(label_rule)
    elif label_rule is None:
        label_map = None
    else:
        raise ValueError(f"unsupported label rule {label_rule!r}")

    records, skipped = [], 0
    for p in files:
        try:
            with Image.open(p) as im:
                im.load()
                w, h = im.size
        except Exception as exc:  # noqa: BLE001 - any decoder failure means skip
            log.warning("skipping undecodable image %s: %s", p, exc)
            skipped += 1
            continue
        if min(w, h) < MIN_TILE_SIZE:
            log.warning("skipping %s: %dx%d is below %d px", p, w, h, MIN_TILE_SIZE)
            skipped += 1
            continue
        label = None
        if label_map is not None:
            if p.parent.name not in label_map:
                skipped += 1
                continue
            label = int(label_map[p.parent.name])
        records.append(TileRecord(str(p), magnification, source_id=p.relative_to(root).as_posix(), label=label))
    if not records:
        raise EmptyDataset(f"no decodable images under {root}")
    return DatasetManifest(records, {magnification: 1.0}, 0, {"skipped": skipped})


def proportion_counts(n: int, proportions: Mapping[Magnification, float]) -> dict[Magnification, int]:
    """Largest-remainder apportionment of ``n`` draws; counts always sum to ``n``."""
    order = [m for m in MAGNIFICATION_ORDER if m in proportions]
    quotas = {m: n * proportions[m] for m in order}
    counts = {m: int(math.floor(quotas[m])) for m in order}
    left = n - sum(counts.values())
    # stable sort keeps 10x < 20x < 40x order among equal remainders
    by_remainder = sorted(order, key=lambda m: -(quotas[m] - counts[m]))
    for m in by_remainder[:left]:
        counts[m] += 1
    return counts


def sample_by_proportion(manifest: DatasetManifest, n: int, seed) -> list[TileRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(manifest) == 0:
        raise EmptyDataset("manifest is empty")
    pools = {m: [r for r in manifest.records if r.magnification == m] for m in manifest.proportions}
    for m, p in manifest.proportions.items():
        if p > 0 and not pools[m]:
            raise InsufficientTiles(f"proportion {p} requested for {m.value} but no tiles are available")
    counts = proportion_counts(n, manifest.proportions)
    rng = np.random.default_rng(seed)
    out: list[TileRecord] = []
    for m, c in counts.items():
        if c == 0:
            continue
        pool = pools[m]
        picks = rng.choice(len(pool), size=c, replace=c > len(pool))
        out.extend(pool[i] for i in picks)
    return out


# --- synthetic tiles -------------------------------------------------------

_MASK64 = (1 << 64) - 1

# round(4096 * (cos, sin)) at 15 degree steps over a half turn
_DIRECTIONS = (
    (4096, 0), (3956, 1060), (3547, 2048), (2896, 2896), (2048, 3547), (1060, 3956),
    (0, 4096), (-1060, 3956), (-2048, 3547), (-2896, 2896), (-3547, 2048), (-3956, 1060),
)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class _IntStream:
    """Integer-only random stream so tiles are identical on every platform."""

    def __init__(self, *key: int):
        state = 0
        for k in key:
            state = _splitmix64(state ^ (k & _MASK64))
        self.state = state

    def next(self, bound: int) -> int:
        self.state = _splitmix64(self.state)
        return self.state % bound


def synthetic_tile_params(seed: int, cls: int, index: int, classes: int, size: int) -> dict:
    """Texture parameters for tile ``index`` of class ``cls``."""
    s = _IntStream(seed, cls, index, 0x7115)
    orient = (cls * len(_DIRECTIONS) // classes + s.next(3) - 1) % len(_DIRECTIONS)
    dx, dy = _DIRECTIONS[orient]
    scale_num = max(size, 1)
    period = (10 + 5 * (cls % 3) + s.next(3)) * scale_num // 256
    period_q = max(period, 4) * 4096
    phase = s.next(period_q)
    n_blobs = 2 + 4 * (cls % 2) + s.next(3)
    radius_base = (10 + 8 * ((cls // 2) % 2)) * scale_num // 256
    blobs = []
    for _ in range(n_blobs):
        blobs.append((s.next(size), s.next(size), max(radius_base + s.next(5), 2)))
    palette = (
        236 - 12 * (cls % 4), 196 - 18 * ((cls + 1) % 3), 220 - 9 * (cls % 5),
        40 + 8 * (cls % 2), 110 - 12 * (cls % 3), 60,
        150, 170, 70 + 25 * (cls % 2),
        32,
    )
    return {
        "dx": dx, "dy": dy, "period_q": period_q, "phase": phase,
        "blobs": np.array(blobs, dtype=np.int64).reshape(-1, 3),
        "palette": np.array(palette, dtype=np.int64),
        "noise_seed": s.next(1 << 32),
    }


def render_synthetic_tile(seed, cls, index, classes, size, backend=None) -> np.ndarray:
    p = synthetic_tile_params(seed, cls, index, classes, size)
    return kernels.render_tile(size, p["dx"], p["dy"], p["period_q"], p["phase"], p["blobs"],
                               p["palette"], p["noise_seed"], backend=backend)


def synthetic_tile_dataset(seed: int, classes: int, per_class: int, size: int = 256) -> DatasetManifest:
    """Labeled procedural tiles (oriented gratings plus stained blobs).

    Magnifications cycle 10x, 20x, 20x, 40x, 40x so the set follows the
    default 20/40/40 split.
    """
    if size < MIN_TILE_SIZE:
        raise InvalidSize(f"tile size must be >= {MIN_TILE_SIZE}, got {size}")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 tile per class")
    cycle = (Magnification.X10, Magnification.X20, Magnification.X20, Magnification.X40, Magnification.X40)
    records = []
    for c in range(classes):
        for i in range(per_class):
            img = render_synthetic_tile(seed, c, i, classes, size)
            img.setflags(write=False)
            records.append(TileRecord(img, cycle[(c * per_class + i) % 5], f"synthetic-{seed}-{c}-{i}", c))
    meta = {"synthetic": {"seed": seed, "classes": classes, "per_class": per_class, "size": size}}
    return DatasetManifest(records, proportions_for(records), seed, meta)
