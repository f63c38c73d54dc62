"""Hot-loop kernels, compiled when the extension is built.

The Cython extension is used when importable; set ``MILKT_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("MILKT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, *, lr: float,
                weight_decay: float, beta1: float, beta2: float, eps: float, step: int,
                impl=None) -> None:
    """Fused in-place Adam step with decoupled weight decay on one tensor."""
    impl = impl or _impl
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update updates in place and needs C-contiguous buffers")
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    impl.adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                     lr, weight_decay, beta1, beta2, eps, bc1, bc2)

