"""Pick the stance integrator: the compiled extension when it imports, else pure Python.

Set ``IBCTRL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _stance_py

BACKEND = "python"
integrate_stance = _stance_py.integrate_stance

if os.environ.get("IBCTRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _stance_ext
    except ImportError:
        pass
    else:
        integrate_stance = _stance_ext.integrate_stance
        BACKEND = "cython"
