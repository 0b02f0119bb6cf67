"""Kernel backend selection.

The compiled extension is used when importable; set ``ADVREC_PURE_PYTHON=1``
to force the numpy fallback. Both backends share one call signature.
"""
import importlib
import os

import numpy as np


def _load(name):
    if name == "cython":
        return importlib.import_module("advrec._kernels")
    if name == "python":
        return importlib.import_module("advrec._kernels_py")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        _load("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if os.environ.get("ADVREC_PURE_PYTHON", "") not in ("", "0"):
    BACKEND = "python"
else:
    BACKEND = available_backends()[0]

_impl = _load(BACKEND)


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.intp)


def bpr_accumulate(P, Q, users, pos, neg, l2, gP, gQ, backend=None):
    """Accumulate the summed BPR gradient of ``(users, pos, neg)`` into gP, gQ.

    Returns the summed loss (including the ``l2`` row penalty) as a float.
    All matrices must be C-contiguous and share one float dtype.
    """
    impl = _impl if backend is None else _load(backend)
    return impl.bpr_accumulate(P, Q, _idx(users), _idx(pos), _idx(neg), float(l2), gP, gQ)


def adagrad_rows(param, accum, grad, rows, lr, eps, backend=None):
    impl = _impl if backend is None else _load(backend)
    impl.adagrad_rows(param, accum, np.ascontiguousarray(grad, dtype=param.dtype),
                      _idx(rows), float(lr), float(eps))
