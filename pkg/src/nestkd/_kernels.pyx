# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: cosine top-k scan, integer tile rendering, stain transform.

Both functions have numpy twins in :mod:`nestkd._pykernels` that must give
identical results (bitwise for the renderer, identical rankings for top-k).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, rint
from libc.stdint cimport int64_t, uint32_t, uint8_t
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef Py_ssize_t _BLOCK = 64


def cosine_topk(const double[:, ::1] queries, const double[:, ::1] gallery, Py_ssize_t k,
                const int64_t[::1] query_groups=None, const int64_t[::1] gallery_groups=None):
    """Top-k gallery rows per query by dot product of pre-normalized rows.

    Similarities are computed blockwise with BLAS, then a single selection
    pass keeps the k best per query. Ties keep the lower gallery index.
    Gallery rows whose group equals the query's group are skipped when both
    group arrays are given. Unfilled slots hold index -1 and similarity -inf.
    """
    cdef Py_ssize_t nq = queries.shape[0], ng = gallery.shape[0], m = queries.shape[1]
    if gallery.shape[1] != m:
        raise ValueError("queries and gallery differ in width")
    cdef bint use_groups = query_groups is not None and gallery_groups is not None
    out_idx = np.full((nq, k), -1, dtype=np.int64)
    out_sim = np.full((nq, k), -np.inf, dtype=np.float64)
    if k <= 0 or nq == 0 or ng == 0:
        return out_idx, out_sim
    cdef int64_t[:, ::1] idx = out_idx
    cdef double[:, ::1] sim = out_sim
    block_buf = np.zeros((min(_BLOCK, nq), ng), dtype=np.float64)
    cdef double[:, ::1] block = block_buf
    cdef Py_ssize_t q0, bq, r, q, j, p, filled
    cdef double s
    cdef int64_t grp
    cdef int bm, bn, bk, lda, ldb, ldc
    cdef double one = 1.0, zero = 0.0
    cdef char transa = b'T', transb = b'N'
    with nogil:
        q0 = 0
        while q0 < nq:
            bq = min(_BLOCK, nq - q0)
            if m > 0:
                # column-major view: block^T (ng x bq) = gallery (ng x m) . queries^T (m x bq)
                bm = <int>ng
                bn = <int>bq
                bk = <int>m
                lda = <int>m
                ldb = <int>m
                ldc = <int>ng
                dgemm(&transa, &transb, &bm, &bn, &bk, &one, <double*>&gallery[0, 0], &lda,
                      <double*>&queries[q0, 0], &ldb, &zero, &block[0, 0], &ldc)
            for r in range(bq):
                q = q0 + r
                filled = 0
                grp = query_groups[q] if use_groups else 0
                for j in range(ng):
                    if use_groups and gallery_groups[j] == grp:
                        continue
                    s = block[r, j]
                    if filled == k and s <= sim[q, k - 1]:
                        continue
                    if filled < k:
                        filled += 1
                    p = filled - 1
                    while p > 0 and sim[q, p - 1] < s:
                        sim[q, p] = sim[q, p - 1]
                        idx[q, p] = idx[q, p - 1]
                        p -= 1
                    sim[q, p] = s
                    idx[q, p] = j
            q0 += bq
    return out_idx, out_sim


cdef inline uint32_t _pixel_hash(uint32_t x, uint32_t y, uint32_t seed) noexcept nogil:
    cdef uint32_t h = (x * <uint32_t>73856093u) ^ (y * <uint32_t>19349663u) ^ (seed * <uint32_t>83492791u)
    h ^= h >> 16
    h *= <uint32_t>0x45d9f3bu
    h ^= h >> 16
    return h


cdef inline int64_t _clamp255(int64_t v) noexcept nogil:
    if v < 0:
        return 0
    if v > 255:
        return 255
    return v


def render_tile(Py_ssize_t size, int64_t dx, int64_t dy, int64_t period_q, int64_t phase,
                const int64_t[:, ::1] blobs, const int64_t[::1] palette, uint32_t seed):
    """Render one procedural tile using integer arithmetic only.

    ``palette`` holds 10 values: base RGB, grating RGB weights, blob RGB
    weights and the noise amplitude (a power of two).
    """
    out = np.empty((size, size, 3), dtype=np.uint8)
    cdef uint8_t[:, :, ::1] img = out
    cdef Py_ssize_t x, y, b, nb = blobs.shape[0]
    cdef int64_t offset = period_q * 8192 * 8192
    cdef int64_t u, tri, g, bl, v, ddx, ddy, d2, r2, noise
    cdef int64_t namp = palette[9]
    with nogil:
        for y in range(size):
            for x in range(size):
                u = (x * dx + y * dy + phase + offset) % period_q
                tri = 2 * u - period_q
                if tri < 0:
                    tri = -tri
                g = tri * 255 // period_q
                bl = 0
                for b in range(nb):
                    ddx = x - blobs[b, 0]
                    ddy = y - blobs[b, 1]
                    r2 = blobs[b, 2] * blobs[b, 2]
                    d2 = ddx * ddx + ddy * ddy
                    if d2 < r2:
                        v = (r2 - d2) * 255 // r2
                        if v > bl:
                            bl = v
                noise = <int64_t>(_pixel_hash(<uint32_t>x, <uint32_t>y, seed) & <uint32_t>(namp - 1)) - namp // 2
                img[y, x, 0] = <uint8_t>_clamp255(palette[0] - ((g * palette[3]) >> 8) - ((bl * palette[6]) >> 8) + noise)
                img[y, x, 1] = <uint8_t>_clamp255(palette[1] - ((g * palette[4]) >> 8) - ((bl * palette[7]) >> 8) + noise)
                img[y, x, 2] = <uint8_t>_clamp255(palette[2] - ((g * palette[5]) >> 8) - ((bl * palette[8]) >> 8) + noise)
    return out


def stain_transform(const uint8_t[:, :, ::1] image, const double[:, ::1] matrix, const double[::1] bias,
                    const double[::1] od_lut, double tissue_od):
    """Per pixel: ``od @ matrix + clip(sum(od) / tissue_od, 0, 1) * bias`` back to uint8 RGB."""
    cdef Py_ssize_t h = image.shape[0], w = image.shape[1], y, x, c
    out = np.empty((h, w, 3), dtype=np.uint8)
    cdef uint8_t[:, :, ::1] o = out
    cdef double o0, o1, o2, t, v
    cdef double ln10 = 2.302585092994046
    with nogil:
        for y in range(h):
            for x in range(w):
                o0 = od_lut[image[y, x, 0]]
                o1 = od_lut[image[y, x, 1]]
                o2 = od_lut[image[y, x, 2]]
                t = (o0 + o1 + o2) / tissue_od
                if t > 1.0:
                    t = 1.0
                for c in range(3):
                    v = o0 * matrix[0, c] + o1 * matrix[1, c] + o2 * matrix[2, c] + t * bias[c]
                    v = rint(255.0 * exp(-v * ln10))
                    if v < 0.0:
                        v = 0.0
                    elif v > 255.0:
                        v = 255.0
                    o[y, x, c] = <uint8_t>v
    return out
