"""Kernel backend selection: numba-jitted kernels with a pure-numpy fallback.

The active backend is fixed at import time by the ``FEDCREF_BACKEND``
environment variable: ``numba`` (require the jit path), ``numpy`` (force the
fallback), or unset (numba when importable, numpy otherwise). Both variants
share the source in :mod:`fedcref.kernels`; the jitted one is built from a
module clone so the plain-python functions stay reachable for benchmarking
and cross-checking.
"""

import importlib.util
import os

from . import kernels as _numpy_kernels

KERNEL_NAMES = ("param_count", "forward", "reconstruction_errors",
                "loss_and_grad", "train_epochs")

_ENV_VAR = "FEDCREF_BACKEND"
_jitted_module = None


def _clone_kernel_module():
    spec = importlib.util.find_spec(_numpy_kernels.__name__)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def _build_jitted():
    """Compile a jitted clone of the kernel module (lazily, once)."""
    global _jitted_module
    if _jitted_module is None:
        import numba

        clone = _clone_kernel_module()
        # Rebind each function in the clone's namespace so jitted callers
        # resolve jitted callees (train_epochs -> loss_and_grad -> forward).
        for name in KERNEL_NAMES:
            jitted = numba.njit(cache=True, nogil=True)(getattr(clone, name))
            setattr(clone, name, jitted)
        _jitted_module = clone
    return _jitted_module


def get_kernels(name=None):
    """Kernel namespace for ``name`` in {"numpy", "numba"} (default: active)."""
    if name is None:
        name = backend_name()
    if name == "numpy":
        return _numpy_kernels
    if name == "numba":
        return _build_jitted()
    raise ValueError(f"unknown backend {name!r} (expected 'numpy' or 'numba')")


def _select():
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested not in ("", "numpy", "numba"):
        raise ValueError(
            f"{_ENV_VAR}={requested!r} not understood; use 'numpy' or 'numba'")
    if requested == "numpy":
        return "numpy"
    try:
        _build_jitted()
        return "numba"
    except ImportError:
        if requested == "numba":
            raise
        return "numpy"


_active_name = _select()
_active = get_kernels(_active_name)


def backend_name():
    """Name of the backend every nn operation dispatches to."""
    return _active_name


param_count = _active.param_count
forward = _active.forward
reconstruction_errors = _active.reconstruction_errors
loss_and_grad = _active.loss_and_grad
train_epochs = _active.train_epochs
