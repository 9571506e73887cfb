"""Pruning backend selection: compiled extension if built, pure Python otherwise.

Set SDCOUPLE_PURE_PYTHON=1 to force the fallback (used by the benchmark
to compare both backends).
"""

import os

if os.environ.get("SDCOUPLE_PURE_PYTHON"):
    from . import _pruning_py as _impl

    PRUNING_BACKEND = "python"
else:
    try:
        from . import _pruning as _impl  # type: ignore[attr-defined]

        PRUNING_BACKEND = "compiled"
    except ImportError:
        from . import _pruning_py as _impl

        PRUNING_BACKEND = "python"

pattern_expectations = _impl.pattern_expectations
observable_total = _impl.observable_total
