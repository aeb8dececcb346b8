"""Backend selection for the two hot kernels.

The compiled module is preferred; set ``BANDSHARE_PURE_PYTHON=1`` to force
the numpy fallback (the test-suite checks both agree).
"""

import os

from . import _pykernels

BACKEND = "python"
solve_cells = _pykernels.solve_cells
dykstra_project = _pykernels.dykstra_project

if not os.environ.get("BANDSHARE_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        solve_cells = _ckernels.solve_cells
        dykstra_project = _ckernels.dykstra_project
