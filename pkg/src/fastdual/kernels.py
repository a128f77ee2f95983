"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the NumPy
fallback is loaded. Set ``FASTDUAL_BACKEND=python`` to force the fallback.
Callers go through :func:`backend` so tests can switch implementations with
:func:`use`.
"""

import contextlib
import importlib
import logging
import os

logger = logging.getLogger(__name__)

_MODULES = {"cython": "fastdual._ckernels", "python": "fastdual._pykernels"}


def available():
    """Names of the backends that import cleanly, compiled first."""
    names = []
    for name, mod in _MODULES.items():
        try:
            importlib.import_module(mod)
        except ImportError:
            continue
        names.append(name)
    return names


def _load(name):
    return importlib.import_module(_MODULES[name])


def _select():
    forced = os.environ.get("FASTDUAL_BACKEND", "").strip().lower()
    if forced:
        if forced not in _MODULES:
            raise ValueError(f"unknown FASTDUAL_BACKEND {forced!r}")
        return _load(forced)
    try:
        return _load("cython")
    except ImportError:
        logger.info("compiled kernels unavailable; using NumPy fallback")
        return _load("python")


_active = _select()


def backend():
    return _active


def name():
    return _active.NAME


@contextlib.contextmanager
def use(name):
    """Temporarily switch the active backend (``"cython"`` or ``"python"``)."""
    global _active
    prev = _active
    _active = _load(name)
    try:
        yield _active
    finally:
        _active = prev
