"""Backend dispatch for the hot numeric kernels.

Two interchangeable implementations exist: numba-jitted loops
(:mod:`.numba_ops`) and pure numpy (:mod:`.numpy_ops`). Selection order:

  1. the ``DISCOREL_BACKEND`` environment variable (``numba`` | ``numpy``);
  2. otherwise ``numba`` when importable, else ``numpy``.

``use_backend`` switches at runtime (used by tests and the benchmark).
Results are deterministic within a backend; across backends they agree to
floating-point roundoff, not bit-exactly.
"""

import os

from . import numpy_ops

_KERNEL_NAMES = (
    "gelu_fwd",
    "gelu_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "ce_fwd",
    "ce_bwd",
    "adamw_update",
    "embedding_bwd",
)

_impl = numpy_ops
_backend = "numpy"


def use_backend(name: str) -> None:
    global _impl, _backend
    if name == "numpy":
        _impl = numpy_ops
    elif name == "numba":
        from . import numba_ops

        _impl = numba_ops
    else:
        raise ValueError(f"unknown kernel backend {name!r} (expected numba or numpy)")
    _backend = name
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(_impl, fn)


def active_backend() -> str:
    return _backend


def _initial_backend() -> str:
    env = os.environ.get("DISCOREL_BACKEND", "auto").lower()
    if env in ("numba", "numpy"):
        return env
    if env != "auto":
        raise ValueError(f"DISCOREL_BACKEND={env!r} not understood (numba|numpy|auto)")
    try:
        import numba  # noqa: F401

        return "numba"
    except ImportError:
        return "numpy"


use_backend(_initial_backend())
