"""Backend selection for the hot kernels.

The Cython extension is used when it was built; otherwise the numpy twins
are used. Set ``NESTKD_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

from nestkd import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("NESTKD_BACKEND", "").lower() != "python":
    try:
        from nestkd import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def get_backend(name: str | None = None):
    """Return the kernel module named ``name`` ("compiled"/"python"), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "compiled":
        from nestkd import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def cosine_topk(queries, gallery, k, query_groups=None, gallery_groups=None, backend=None):
    return get_backend(backend).cosine_topk(queries, gallery, k, query_groups, gallery_groups)


def render_tile(size, dx, dy, period_q, phase, blobs, palette, seed, backend=None):
    return get_backend(backend).render_tile(size, dx, dy, period_q, phase, blobs, palette, seed)


def stain_transform(image, matrix, bias, od_lut, tissue_od, backend=None):
    return get_backend(backend).stain_transform(image, matrix, bias, od_lut, tissue_od)
