"""Hot inner loops, compiled when available.

The Cython extension ``_ckernels`` is used if it was built and
``FEATFED_PURE_PYTHON`` is not set to a true value; otherwise the numpy
fallback in ``_pykernels`` is loaded.  ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _pykernels

METRIC_COSINE = _pykernels.METRIC_COSINE
METRIC_EUCLIDEAN = _pykernels.METRIC_EUCLIDEAN


def _load():
    if os.environ.get("FEATFED_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        return _pykernels, "python"
    return _ckernels, "cython"


_impl, BACKEND = _load()


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name: str):
    """Return the kernel module called ``name`` ("python" or "cython")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    _impl.adam_update(p, g, m, v, lr, beta1, beta2, eps, step)


def class_sums(emb, labels, n_classes):
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _impl.class_sums(emb, labels, n_classes)


def knn_predict(bank, labels, queries, k, metric):
    bank = np.ascontiguousarray(bank, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    return _impl.knn_predict(bank, labels, queries, int(k), int(metric))
