"""Hot-kernel backend selection.

The compiled extension is preferred when available; the pure-numpy fallback
is always present. Set HYPOSCORE_KERNELS=python to force the fallback, or
HYPOSCORE_KERNELS=compiled to fail loudly if the extension is missing.
"""

import importlib
import os

from . import fallback

_requested = os.environ.get("HYPOSCORE_KERNELS", "auto").strip().lower()

_core = None
if _requested not in ("python", "fallback"):
    try:
        _core = importlib.import_module("hyposcore._kernels._core")
    except ImportError:
        if _requested == "compiled":
            raise
        _core = None

_active = _core if _core is not None else fallback


def active_backend() -> str:
    """Name of the backend in use: 'compiled' or 'python'."""
    return "python" if _active is fallback else "compiled"


def get_backend(name: str):
    """Fetch a specific backend module by name (for benchmarks and tests)."""
    if name == "python":
        return fallback
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled kernels are not available")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def raster_fill(*args, **kwargs):
    return _active.raster_fill(*args, **kwargs)


def ppf_vote_accumulate(*args, **kwargs):
    return _active.ppf_vote_accumulate(*args, **kwargs)


def bn_stats(*args, **kwargs):
    return _active.bn_stats(*args, **kwargs)


def bn_relu_apply(*args, **kwargs):
    return _active.bn_relu_apply(*args, **kwargs)


def bn_relu_bwd(*args, **kwargs):
    return _active.bn_relu_bwd(*args, **kwargs)


def group_max_fwd(*args, **kwargs):
    return _active.group_max_fwd(*args, **kwargs)


def group_max_bwd(*args, **kwargs):
    return _active.group_max_bwd(*args, **kwargs)


ppf_pack_keys = fallback.ppf_pack_keys
ref_frame_rotation = fallback.ref_frame_rotation
alpha_bin = fallback.alpha_bin
