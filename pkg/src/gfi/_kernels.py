"""Kernel dispatch: compiled extension if available, pure Python otherwise.

Set ``GFI_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by tests that must cover both paths).  ``KERNEL_BACKEND`` records which one
was selected at import time.
"""
import os

if os.environ.get("GFI_PURE_PYTHON"):
    from ._ccd_py import ccd_lasso
    KERNEL_BACKEND = "python"
else:
    try:
        from ._ccd import ccd_lasso
        KERNEL_BACKEND = "compiled"
    except ImportError:
        from ._ccd_py import ccd_lasso
        KERNEL_BACKEND = "python"

__all__ = ["KERNEL_BACKEND", "ccd_lasso"]
