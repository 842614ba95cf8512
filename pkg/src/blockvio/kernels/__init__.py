"""Factor-evaluation kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when it imports cleanly; set
``BLOCKVIO_BACKEND=numpy`` (or ``native``) to force a choice. Both backends
implement the same functions and agree numerically.
"""

from __future__ import annotations

import logging
import os

from . import numpy_backend

logger = logging.getLogger(__name__)

_FORCED = os.environ.get("BLOCKVIO_BACKEND", "").strip().lower()

native_backend = None
if _FORCED != "numpy":
    try:
        from . import _native as native_backend  # type: ignore[no-redef]
    except ImportError:
        native_backend = None
        if _FORCED == "native":
            raise
        logger.info("compiled kernels unavailable, using numpy fallback")

backend = native_backend if native_backend is not None else numpy_backend


def backend_name() -> str:
    return backend.name


def available_backends() -> list:
    out = [numpy_backend]
    if native_backend is not None:
        out.append(native_backend)
    return out


visual_eval = backend.visual_eval
visual_eval_jac = backend.visual_eval_jac
predict_eval_jac = backend.predict_eval_jac
accumulate_h_b = backend.accumulate_h_b
accumulate_b = backend.accumulate_b
