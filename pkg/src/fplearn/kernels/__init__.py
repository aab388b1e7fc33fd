"""Hot inner loops.

The numba backend is used when numba imports cleanly.  Setting the
environment variable ``FPLEARN_DISABLE_NUMBA=1`` before import selects the
pure-numpy fallback instead; both backends share one signature per kernel.
"""
import os

from . import _numpy

ENV_FLAG = "FPLEARN_DISABLE_NUMBA"

if os.environ.get(ENV_FLAG, "").strip().lower() in ("", "0", "false", "no"):
    try:
        from . import _numba as backend
    except ImportError:  # pragma: no cover
        backend = _numpy
else:
    backend = _numpy

BACKEND = backend.NAME
VDP, LORENZ63, ARCTAN_LORENZ = _numpy.VDP, _numpy.LORENZ63, _numpy.ARCTAN_LORENZ
TANH, SIGMOID = _numpy.TANH, _numpy.SIGMOID

bin_counts = backend.bin_counts
assemble_coo = backend.assemble_coo
# numpy's vectorised exp beats the compiled loop here (see benchmarks/)
logconv = _numpy.logconv
em_builtin = backend.em_builtin
em_mlp = backend.em_mlp
em_poly = backend.em_poly
em_pc = backend.em_pc


def get_backend(name):
    """Return the kernel module called ``name`` ("numba" or "numpy")."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba
        return _numba
    raise ValueError(f"unknown backend {name!r}")
