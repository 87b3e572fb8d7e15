"""Timing of the compiled kernels against their numpy twins."""

from __future__ import annotations

import time

import numpy as np

from nestkd import kernels
from nestkd.augment import _OD_LUT, _TISSUE_OD, HED_FROM_RGB, RGB_FROM_HED
from nestkd.data import render_synthetic_tile
from nestkd.evaluation import EmbeddingSet, knn_classify


def _time(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times)), float(np.std(times))


def available_backends() -> list[str]:
    return ["compiled", "python"] if kernels.BACKEND == "compiled" else ["python"]


def bench_kernels(n: int = 10_000, dims=(768, 384, 12), repeats: int = 3, seed: int = 0) -> list[dict]:
    """Rows of ``{kernel, backend, case, mean_s, std_s}`` for every available backend."""
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, max(dims)))
    labels = rng.integers(0, 10, n)
    split = int(round(0.9 * n))
    train, test = EmbeddingSet(vecs[:split], labels[:split]), EmbeddingSet(vecs[split:], labels[split:])
    image = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)

    matrix = np.ascontiguousarray((HED_FROM_RGB * 1.03) @ RGB_FROM_HED)
    bias = np.ascontiguousarray(np.array([0.01, -0.01, 0.0]) @ RGB_FROM_HED)
    rows = []
    for backend in available_backends():
        for m in dims:
            mean, std = _time(lambda: knn_classify(train, test, 10, m, backend), repeats)
            rows.append({"kernel": "knn_topk", "backend": backend, "case": f"dim={m}", "mean_s": mean, "std_s": std})
        mean, std = _time(lambda: kernels.stain_transform(image, matrix, bias, _OD_LUT, _TISSUE_OD, backend), repeats)
        rows.append({"kernel": "stain_transform", "backend": backend, "case": "224px", "mean_s": mean, "std_s": std})
        mean, std = _time(lambda: render_synthetic_tile(seed, 1, 0, 4, 256, backend=backend), repeats)
        rows.append({"kernel": "render_tile", "backend": backend, "case": "256px", "mean_s": mean, "std_s": std})
    return rows
