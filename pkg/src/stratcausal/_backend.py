"""Kernel selection.

The compiled extension is used when importable; setting
``STRATCAUSAL_BACKEND=python`` forces the numpy fallback.
"""
import os

from . import _tree_py

try:
    from . import _tree_ext
except ImportError:  # extension not built
    _tree_ext = None

_KERNELS = {"python": _tree_py}
if _tree_ext is not None:
    _KERNELS["cython"] = _tree_ext

_requested = os.environ.get("STRATCAUSAL_BACKEND", "").strip().lower()
if _requested and _requested not in ("python", "cython"):
    raise ImportError(f"unknown STRATCAUSAL_BACKEND {_requested!r}")
if _requested == "cython" and _tree_ext is None:
    raise ImportError("STRATCAUSAL_BACKEND=cython but the extension is not built")

DEFAULT_BACKEND = _requested or ("cython" if _tree_ext is not None else "python")


def available_backends():
    return sorted(_KERNELS)


def get_kernels(backend=None):
    """Return the kernel module for ``backend`` (default: the import-time choice)."""
    name = DEFAULT_BACKEND if backend is None else backend
    try:
        return _KERNELS[name]
    except KeyError:
        raise ValueError(
            f"backend {name!r} unavailable; have {available_backends()}"
        ) from None
