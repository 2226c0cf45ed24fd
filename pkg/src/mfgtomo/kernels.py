"""Hot-loop kernel dispatch.

The compiled extension ``mfgtomo._kernels`` is used when it was built;
otherwise the numpy implementation in ``mfgtomo._kernels_py`` is selected.
Setting ``MFGTOMO_KERNELS=python`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("MFGTOMO_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

eo_hamiltonian = _impl.eo_hamiltonian
eo_hamiltonian_vjp = _impl.eo_hamiltonian_vjp
upwind_divergence = _impl.upwind_divergence
upwind_divergence_vjp = _impl.upwind_divergence_vjp
max_outflow_rate = _impl.max_outflow_rate

__all__ = [
    "BACKEND",
    "eo_hamiltonian",
    "eo_hamiltonian_vjp",
    "upwind_divergence",
    "upwind_divergence_vjp",
    "max_outflow_rate",
]
