"""Kernel backend selection.

The compiled extension is preferred when importable; the NumPy fallback is
always available. The initial choice honours the ``OODKIT_BACKEND``
environment variable (``auto``, ``cython``, ``numpy``) and can be changed at
runtime with :func:`use`.
"""

import os

from . import numpy_impl

_BACKENDS = {"numpy": numpy_impl}

try:
    from . import _cext

    _BACKENDS["cython"] = _cext
except ImportError:
    _cext = None


def available():
    """Names of the importable backends."""
    return sorted(_BACKENDS)


def use(name):
    """Select the active backend by name ("auto" picks the fastest available)."""
    global _active
    if name == "auto":
        name = "cython" if "cython" in _BACKENDS else "numpy"
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {', '.join(available())}"
        )
    _active = _BACKENDS[name]
    return _active


def current():
    """Name of the active backend."""
    return _active.NAME


def active():
    """The active backend module (exposes im2col / col2im)."""
    return _active


_active = use(os.environ.get("OODKIT_BACKEND", "auto"))
