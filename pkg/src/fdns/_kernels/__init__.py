"""Particle kernel backends: compiled extension with a pure-numpy fallback.

The compiled backend is preferred when importable; set FDNS_PURE_PYTHON=1
to force the fallback. Both implement identical floating-point semantics
(see `fallback` for the canonical definition), so switching backends never
changes results, only speed. `BACKEND` reports which one is active.
"""

from __future__ import annotations

import os

__all__ = ["em_run", "welford_batches", "BACKEND"]

_force_pure = os.environ.get("FDNS_PURE_PYTHON", "").strip() not in ("", "0")

if _force_pure:
    from .fallback import em_run, welford_batches

    BACKEND = "python"
else:
    try:
        from ._flowkern import em_run, welford_batches

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        from .fallback import em_run, welford_batches

        BACKEND = "python"
