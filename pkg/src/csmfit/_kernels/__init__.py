"""Hot fitting kernels with a compiled core and a pure-numpy fallback.

The compiled extension is preferred when importable; set the environment
variable ``CSMFIT_PURE_PYTHON=1`` to force the numpy implementation.
``BACKEND`` reports which twin is active. Both expose ``ScenarioKernel``
with identical semantics; see ``_ref`` for the packed-buffer layout.
"""

import os

from . import _ref

if os.environ.get("CSMFIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _ref
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _ref
        BACKEND = "python"

ScenarioKernel = _impl.ScenarioKernel


def available_backends() -> dict:
    """Importable kernel implementations keyed by backend name."""
    out = {"python": _ref}
    try:
        from . import _core

        out["compiled"] = _core
    except ImportError:
        pass
    return out
