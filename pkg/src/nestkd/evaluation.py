"""Frozen-feature evaluation: k-NN, linear probe, retrieval, PCA maps, profiling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from nestkd import kernels
from nestkd.augment import VIEW_SIZE
from nestkd.data import DatasetManifest
from nestkd.errors import DegenerateLabels, InvalidDim, InvalidK, MissingHeads
from nestkd.heads import HeadBank
from nestkd.losses import cosine_loss
from nestkd.model import BackboneConfig, VisionTransformer, load_archive, load_backbone, prefixed
from nestkd.teachers import Teacher, TeacherSpec, load_teacher, resample_patch_grid, standardize_patch_tokens

_NORM_EPS = 1e-12


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray | None = None
    source_ids: list[str] = field(default_factory=list)
    model_id: str = ""
    prefix_dim: int | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        n = len(self.vectors)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != n:
                raise ValueError("labels and vectors differ in length")
        if not self.source_ids:
            self.source_ids = [str(i) for i in range(n)]
        elif len(self.source_ids) != n:
            raise ValueError("source_ids and vectors differ in length")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def prefix(self, m: int | None) -> "EmbeddingSet":
        """View of the first ``m`` columns (shares memory with this set)."""
        if m is None or m == self.dim:
            return self
        if not 1 <= m <= self.dim:
            raise InvalidDim(f"prefix {m} outside [1, {self.dim}]")
        return EmbeddingSet(self.vectors[:, :m], self.labels, self.source_ids, self.model_id, m)

    def columns(self, index) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[:, index], self.labels, self.source_ids, self.model_id, len(index))


@dataclass
class ProbeResult:
    metric: str
    mean: float
    std: float
    runs: int
    values: list[float]

    @classmethod
    def from_values(cls, metric: str, values: Sequence[float]) -> "ProbeResult":
        v = np.asarray(values, dtype=np.float64)
        return cls(metric, float(v.mean()), float(v.std()), len(v), [float(x) for x in v])

    def to_dict(self) -> dict:
        return {"metric": self.metric, "mean": self.mean, "std": self.std, "runs": self.runs, "values": self.values}


# -- embedding extraction ------------------------------------------------------

def eval_transform(image: np.ndarray, size: int = VIEW_SIZE) -> np.ndarray:
    """Resize the shorter side to ``size`` (bilinear), then center-crop ``size`` x ``size``."""
    h, w = image.shape[:2]
    if min(h, w) != size:
        scale = size / min(h, w)
        nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
        image = np.asarray(Image.fromarray(np.ascontiguousarray(image)).resize((nw, nh), Image.BILINEAR))
        h, w = nh, nw
    y0, x0 = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(image[y0:y0 + size, x0:x0 + size])


def _as_model(model) -> VisionTransformer:
    return model if isinstance(model, torch.nn.Module) else load_backbone(model)


def _batches(manifest: DatasetManifest, batch_size: int):
    recs = manifest.records
    for i in range(0, len(recs), batch_size):
        chunk = recs[i:i + batch_size]
        yield chunk, torch.from_numpy(np.stack([eval_transform(r.load()) for r in chunk]))


@torch.no_grad()
def embed_dataset(model, manifest: DatasetManifest, mode: str = "cls", batch_size: int = 64,
                  model_id: str = "") -> EmbeddingSet:
    """CLS vectors (one per tile) or patch vectors (G*G per tile) from a deployed backbone."""
    if mode not in ("cls", "patch"):
        raise ValueError(f"mode must be 'cls' or 'patch', got {mode!r}")
    model = _as_model(model)
    was_training = model.training
    model.eval()
    vecs, labels, ids = [], [], []
    try:
        for chunk, images in _batches(manifest, batch_size):
            out = model(images)
            reps = 1
            if mode == "cls":
                vecs.append(out.cls.double().numpy())
            else:
                reps = out.patches.shape[1]
                vecs.append(out.patches.reshape(-1, out.patches.shape[-1]).double().numpy())
            for r in chunk:
                labels.extend([r.label] * reps)
                ids.extend([r.source_id] * reps)
    finally:
        model.train(was_training)
    has_labels = all(lab is not None for lab in labels)
    return EmbeddingSet(np.concatenate(vecs), np.asarray(labels) if has_labels else None, ids, model_id)


# -- k-NN and retrieval --------------------------------------------------------

def _normalized(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.ascontiguousarray(v / np.maximum(norms, _NORM_EPS))


def _require_labels(*sets: EmbeddingSet) -> None:
    for s in sets:
        if s.labels is None:
            raise ValueError("embedding set has no labels")


def knn_predict(train: EmbeddingSet, test: EmbeddingSet, k: int = 10, m: int | None = None,
                backend=None) -> np.ndarray:
    """Cosine k-NN majority vote on the first ``m`` dims.

    Vote ties go to the class with the smaller summed distance ``1 - cos``,
    then to the lowest class label.
    """
    _require_labels(train)
    if not 1 <= k <= len(train):
        raise InvalidK(f"k={k} must lie in [1, {len(train)}]")
    tr, te = train.prefix(m), test.prefix(m)
    idx, sim = kernels.cosine_topk(_normalized(te.vectors), _normalized(tr.vectors), k, backend=backend)
    classes, codes = np.unique(train.labels, return_inverse=True)
    nb = codes[idx]
    n_classes = len(classes)
    counts = np.zeros((len(te), n_classes), dtype=np.int64)
    dist = np.zeros((len(te), n_classes), dtype=np.float64)
    rows = np.repeat(np.arange(len(te)), k)
    np.add.at(counts, (rows, nb.ravel()), 1)
    np.add.at(dist, (rows, nb.ravel()), (1.0 - sim).ravel())
    best = counts.max(axis=1, keepdims=True)
    dist = np.where(counts == best, dist, np.inf)
    # argmin returns the first (lowest-label) class among equal distances
    return classes[np.argmin(dist, axis=1)]


def knn_classify(train: EmbeddingSet, test: EmbeddingSet, k: int = 10, m: int | None = None,
                 backend=None) -> float:
    _require_labels(train, test)
    pred = knn_predict(train, test, k, m, backend)
    return float(np.mean(pred == test.labels))


def random_subset_baseline(train: EmbeddingSet, test: EmbeddingSet, k: int, m: int, seeds: int = 5,
                           seed: int = 0, backend=None) -> ProbeResult:
    """k-NN accuracy on ``m`` coordinates drawn uniformly without replacement, per seed."""
    d = train.dim
    if not 1 <= m <= d:
        raise InvalidDim(f"m={m} must lie in [1, {d}]")
    values = []
    for s in range(seeds):
        cols = np.sort(np.random.default_rng([seed, s]).choice(d, size=m, replace=False))
        values.append(knn_classify(train.columns(cols), test.columns(cols), k, None, backend))
    return ProbeResult.from_values("knn_random_subset", values)


def retrieval_recall(queries: EmbeddingSet, gallery: EmbeddingSet, K: int = 5, m: int | None = None,
                     backend=None) -> float:
    """Recall@K: share of queries with a same-label item among the top-K gallery hits.

    Gallery items sharing the query's source id are excluded.
    """
    _require_labels(queries, gallery)
    if not 1 <= K <= len(gallery):
        raise InvalidK(f"K={K} must lie in [1, {len(gallery)}]")
    ids = {sid: i for i, sid in enumerate(dict.fromkeys([*queries.source_ids, *gallery.source_ids]))}
    qg = np.array([ids[s] for s in queries.source_ids], dtype=np.int64)
    gg = np.array([ids[s] for s in gallery.source_ids], dtype=np.int64)
    q, g = queries.prefix(m), gallery.prefix(m)
    idx, _ = kernels.cosine_topk(_normalized(q.vectors), _normalized(g.vectors), K, qg, gg, backend=backend)
    valid = idx >= 0
    hit_labels = np.asarray(gallery.labels)[np.where(valid, idx, 0)]
    hits = valid & (hit_labels == np.asarray(queries.labels)[:, None])
    return float(hits.any(axis=1).mean())


# -- linear probe --------------------------------------------------------------

def _score(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    if n_classes == 2:
        recalls = [np.mean(pred[truth == c] == c) for c in np.unique(truth)]
        return float(np.mean(recalls))
    return float(np.mean(pred == truth))


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, epochs: int = 100, seed: int | Sequence[int] = 0,
                 runs: int = 5, lr: float = 1e-2, weight_decay: float = 0.0, batch_size: int = 256,
                 m: int | None = None) -> ProbeResult:
    """Single affine layer with cross-entropy on frozen features.

    Reports accuracy (balanced accuracy for two classes) over ``runs`` seeds,
    or over the given seed list.
    """
    _require_labels(train, test)
    classes, y_train = np.unique(train.labels, return_inverse=True)
    if len(classes) < 2:
        raise DegenerateLabels("linear probe needs at least two classes in the training set")
    lookup = {c: i for i, c in enumerate(classes.tolist())}
    y_test = np.array([lookup.get(c, -1) for c in np.asarray(test.labels).tolist()])
    x_train = torch.from_numpy(np.ascontiguousarray(train.prefix(m).vectors, dtype=np.float32))
    x_test = torch.from_numpy(np.ascontiguousarray(test.prefix(m).vectors, dtype=np.float32))
    yt = torch.from_numpy(y_train.astype(np.int64))
    seeds = [seed + i for i in range(runs)] if isinstance(seed, int) else list(seed)
    values = []
    for s in seeds:
        gen = torch.Generator().manual_seed(int(s))
        layer = torch.nn.Linear(x_train.shape[1], len(classes))
        with torch.no_grad():
            bound = 1.0 / np.sqrt(x_train.shape[1])
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.zero_()
        opt = torch.optim.AdamW(layer.parameters(), lr=lr, weight_decay=weight_decay)
        for _ in range(epochs):
            order = torch.randperm(len(x_train), generator=gen)
            for i in range(0, len(order), batch_size):
                b = order[i:i + batch_size]
                loss = torch.nn.functional.cross_entropy(layer(x_train[b]), yt[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
        with torch.no_grad():
            pred = layer(x_test).argmax(dim=1).numpy()
        values.append(_score(pred, y_test, len(classes)))
    metric = "balanced_accuracy" if len(classes) == 2 else "accuracy"
    return ProbeResult.from_values(metric, values)


# -- PCA visualization -----------------------------------------------------------

def pca_rgb_map(patches, m: int | None = None, upscale: int = 1) -> np.ndarray:
    """First three principal components of a token grid as a uint8 RGB raster.

    Each component's sign is fixed so its largest-magnitude loading is
    positive; components are min-max scaled per channel. Channels beyond the
    data rank are filled with 128.
    """
    x = np.asarray(patches.detach().cpu() if isinstance(patches, torch.Tensor) else patches, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    n = x.shape[0]
    g = int(round(n ** 0.5))
    if g * g != n or n < 3:
        raise ValueError(f"{n} tokens do not form a square grid of at least 3 tokens")
    if m is not None:
        x = x[:, :m]
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = (s[0] if len(s) else 0.0) * max(xc.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol)) if len(s) and s[0] > 0 else 0
    rgb = np.full((n, 3), 128, dtype=np.uint8)
    for c in range(min(3, rank)):
        v = vt[c]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        proj = xc @ v
        lo, hi = proj.min(), proj.max()
        if hi > lo:
            rgb[:, c] = np.rint((proj - lo) / (hi - lo) * 255.0).astype(np.uint8)
    img = rgb.reshape(g, g, 3)
    if upscale > 1:
        img = img.repeat(upscale, axis=0).repeat(upscale, axis=1)
    return img


# -- profiling -----------------------------------------------------------------

def knn_runtime_profile(n: int = 10_000, dims: Sequence[int] = (768, 384, 12), k: int = 10, repeats: int = 5,
                        embeddings: EmbeddingSet | None = None, seed: int = 0, classes: int = 10,
                        backend=None) -> list[dict]:
    """Mean wall-clock of ``knn_classify`` per prefix dim.

    The first 90% of the points form the training set and the rest are queries.
    """
    if embeddings is None:
        rng = np.random.default_rng(seed)
        embeddings = EmbeddingSet(rng.standard_normal((n, max(dims))), rng.integers(0, classes, n))
    n = len(embeddings)
    split = int(round(0.9 * n))
    vectors = np.ascontiguousarray(embeddings.vectors, dtype=np.float64)
    train = EmbeddingSet(vectors[:split], embeddings.labels[:split])
    test = EmbeddingSet(vectors[split:], embeddings.labels[split:])
    rows = []
    for m in dims:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            knn_classify(train, test, k, m, backend)
            times.append(time.perf_counter() - t0)
        rows.append({"dim": int(m), "mean_s": float(np.mean(times)), "std_s": float(np.std(times)),
                     "repeats": repeats})
    return rows


@torch.no_grad()
def throughput_benchmark(model, batch: int = 32, n_batches: int = 500, precision: str = "half",
                         warmup: int = 10, seed: int = 0) -> dict:
    """Images per second over ``n_batches`` timed forward passes (warmup excluded).

    ``half`` runs under bfloat16 autocast on CPU; ``fp32`` runs plain float32.
    """
    if precision not in ("half", "fp32"):
        raise ValueError("precision must be 'half' or 'fp32'")
    model = _as_model(model)
    model.eval()
    size = model.config.image_size
    x = torch.randn(batch, 3, size, size, generator=torch.Generator().manual_seed(seed))
    rates = []
    for i in range(warmup + n_batches):
        t0 = time.perf_counter()
        if precision == "half":
            with torch.autocast("cpu", dtype=torch.bfloat16):
                model(x)
        else:
            model(x)
        dt = time.perf_counter() - t0
        if i >= warmup:
            rates.append(batch / dt)
    return {"mean": float(np.mean(rates)), "std": float(np.std(rates)), "batches": n_batches,
            "batch": batch, "precision": precision}


# -- head / teacher alignment ----------------------------------------------------

def _load_heads(archive: Mapping) -> HeadBank:
    if not prefixed(archive, "head/"):
        raise MissingHeads("checkpoint has no distillation heads")
    spec = archive["head_spec"]
    bank = HeadBank(spec["student_dim"], spec["teacher_dims"], spec["levels"], spec["activation"])
    bank.load_archive_entries(archive)
    return bank.eval()


def _load_student(archive: Mapping, use_ema: bool) -> VisionTransformer:
    model = VisionTransformer(BackboneConfig.from_dict(archive["config"]))
    state = prefixed(archive, "ema/" if use_ema else "params/")
    model.load_state_dict(state)
    return model.eval()


def _teacher_modules(teachers, archive: Mapping) -> dict[str, Teacher]:
    if teachers is None:
        teachers = [TeacherSpec(**d) for d in archive["teachers"]]
    out = {}
    for t in teachers:
        t = t if isinstance(t, Teacher) else load_teacher(t)
        out[t.spec.name] = t
    return out


@torch.no_grad()
def head_alignment(student: VisionTransformer, bank: HeadBank, teachers: Mapping[str, Teacher],
                   manifest: DatasetManifest, levels: Sequence[int] | None = None,
                   batch_size: int = 64) -> dict[tuple[str, int], float]:
    """Mean cosine between projected student CLS and teacher CLS per (teacher, level)."""
    levels = tuple(levels or bank.levels)
    was = student.training
    student.eval()
    sums: dict[tuple[str, int], float] = {}
    count = 0
    try:
        for _, images in _batches(manifest, batch_size):
            cls = student(images).cls
            for name, teacher in teachers.items():
                target = teacher(images).cls
                for m in levels:
                    cos = 1.0 - cosine_loss(bank(cls, name, "cls", m), target)
                    sums[(name, m)] = sums.get((name, m), 0.0) + float(cos.sum())
            count += len(images)
    finally:
        student.train(was)
    return {key: v / count for key, v in sums.items()}


@torch.no_grad()
def teacher_impact(checkpoint, teachers=None, manifest: DatasetManifest | None = None, use_ema: bool = False,
                   batch_size: int = 32) -> dict[str, dict[str, tuple[float, float]]]:
    """Per teacher: cosine of full-dim projected CLS ("summary") and patch tokens ("features").

    Feature targets are teacher tokens standardized per batch, as in training.
    Values are per-image means; mean and std are taken over images.
    """
    archive = checkpoint if isinstance(checkpoint, Mapping) else load_archive(checkpoint)
    bank = _load_heads(archive)
    student = _load_student(archive, use_ema)
    models = _teacher_modules(teachers, archive)
    d = bank.student_dim
    summary: dict[str, list] = {n: [] for n in models}
    features: dict[str, list] = {n: [] for n in models}
    for _, images in _batches(manifest, batch_size):
        out = student(images)
        for name, teacher in models.items():
            t_out = teacher(images)
            summary[name].append((1.0 - cosine_loss(bank(out.cls, name, "cls", d), t_out.cls)).numpy())
            target = standardize_patch_tokens(resample_patch_grid(t_out.patches, out.grid))
            pred = bank(out.patches, name, "patch", d)
            features[name].append((1.0 - cosine_loss(pred, target)).mean(dim=1).numpy())
    result = {}
    for name in models:
        s, f = np.concatenate(summary[name]), np.concatenate(features[name])
        result[name] = {"summary": (float(s.mean()), float(s.std())), "features": (float(f.mean()), float(f.std()))}
    return result
