"""Non-rigid point cloud registration at desk scale.

Pipeline: deformation-graph construction over correspondence endpoints,
local spatial-consistency attention for outlier pruning, and an embedded
deformation Gauss-Newton solver for the final warp, plus the synthetic
scene generator and metrics used to exercise all of it.
"""

__version__ = "0.1.0"

from defreg.errors import FileFormatError, NumericalError, ValidationError

__all__ = ["FileFormatError", "NumericalError", "ValidationError", "__version__"]
