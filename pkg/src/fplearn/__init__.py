"""Learn drift fields of ODE/SDE models from their invariant measures."""
from .errors import (BlowUpError, DegenerateDynamicsError, DisjointSupportError, DivergenceError,
                     EmptyMeasureError, FPLearnError, GridIndexError, InconsistentStateError, NumericalError,
                     StabilityError)
from .grid import Grid, cfl_dt
from .measure import DensityField, bin_trajectory, gaussian_smooth, positive_support_mask

__version__ = "0.1.0"
