"""Hot kernels for the filter scans.

The compiled ``_scan`` extension is used when it was built; otherwise the
numpy implementation in ``scan_py`` is used. Setting ``DSSMCAST_PURE_PYTHON=1``
forces the fallback.
"""

import os
from types import ModuleType

from . import scan_py

BACKEND = "python"
kernels: ModuleType = scan_py

if os.environ.get("DSSMCAST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _scan
    except ImportError:  # extension not built
        pass
    else:
        kernels = _scan
        BACKEND = "cython"


def load_backend(name: str) -> ModuleType:
    """Return a specific kernel module (``"python"`` or ``"cython"``)."""
    if name == "python":
        return scan_py
    if name == "cython":
        from . import _scan

        return _scan
    raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    try:
        from . import _scan  # noqa: F401
    except ImportError:
        return False
    return True
