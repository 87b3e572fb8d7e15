"""Numpy implementations of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np

_CHUNK = 256


def cosine_topk(queries, gallery, k, query_groups=None, gallery_groups=None):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    gallery = np.ascontiguousarray(gallery, dtype=np.float64)
    nq, ng = queries.shape[0], gallery.shape[0]
    if gallery.shape[1] != queries.shape[1]:
        raise ValueError("queries and gallery differ in width")
    out_idx = np.full((nq, k), -1, dtype=np.int64)
    out_sim = np.full((nq, k), -np.inf, dtype=np.float64)
    if k <= 0 or ng == 0:
        return out_idx, out_sim
    use_groups = query_groups is not None and gallery_groups is not None
    cols = np.arange(ng)
    for start in range(0, nq, _CHUNK):
        stop = min(start + _CHUNK, nq)
        sims = queries[start:stop] @ gallery.T
        if use_groups:
            mask = np.asarray(query_groups[start:stop])[:, None] == np.asarray(gallery_groups)[None, :]
            sims[mask] = -np.inf
        kk = min(k, ng)
        if kk < ng:
            # everything tied with the k-th value must survive so index order can break ties
            kth = np.partition(sims, ng - kk, axis=1)[:, ng - kk]
        else:
            kth = np.full(stop - start, -np.inf)
        for row in range(stop - start):
            s = sims[row]
            cand = np.flatnonzero(s >= kth[row]) if kk < ng else cols
            cand = cand[np.isfinite(s[cand])]
            order = np.lexsort((cand, -s[cand]))[:kk]
            chosen = cand[order]
            out_idx[start + row, : len(chosen)] = chosen
            out_sim[start + row, : len(chosen)] = s[chosen]
    return out_idx, out_sim


def _pixel_hash(x, y, seed):
    x = x.astype(np.uint32)
    y = y.astype(np.uint32)
    h = (x * np.uint32(73856093)) ^ (y * np.uint32(19349663)) ^ np.uint32((int(seed) * 83492791) & 0xFFFFFFFF)
    h ^= h >> np.uint32(16)
    h *= np.uint32(0x45D9F3B)
    h ^= h >> np.uint32(16)
    return h


def render_tile(size, dx, dy, period_q, phase, blobs, palette, seed):
    blobs = np.asarray(blobs, dtype=np.int64).reshape(-1, 3)
    palette = np.asarray(palette, dtype=np.int64)
    y, x = np.mgrid[0:size, 0:size].astype(np.int64)
    offset = int(period_q) * 8192 * 8192
    u = (x * dx + y * dy + phase + offset) % period_q
    g = np.abs(2 * u - period_q) * 255 // period_q
    bl = np.zeros_like(x)
    for cx, cy, r in blobs:
        r2 = r * r
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        v = np.where(d2 < r2, (r2 - d2) * 255 // r2, 0)
        np.maximum(bl, v, out=bl)
    namp = int(palette[9])
    noise = (_pixel_hash(x, y, seed) & np.uint32(namp - 1)).astype(np.int64) - namp // 2
    out = np.empty((size, size, 3), dtype=np.uint8)
    for c in range(3):
        v = palette[c] - ((g * palette[3 + c]) >> 8) - ((bl * palette[6 + c]) >> 8) + noise
        out[..., c] = np.clip(v, 0, 255)
    return out


def stain_transform(image, matrix, bias, od_lut, tissue_od):
    od = od_lut[image]
    o0, o1, o2 = od[..., 0], od[..., 1], od[..., 2]
    t = np.minimum((o0 + o1 + o2) / tissue_od, 1.0)[..., None]
    v = o0[..., None] * matrix[0] + o1[..., None] * matrix[1] + o2[..., None] * matrix[2] + t * bias
    rgb = np.rint(255.0 * np.exp(-v * np.log(10.0)))
    return np.clip(rgb, 0, 255).astype(np.uint8)
