"""Desk-scale laboratory for quadratic BSDEs, their gradients and the
nonlinear Feynman-Kac identification."""

__version__ = "0.1.0"

from . import bmo_constants, catalog, forward, gradient_bsde, kolmogorov, quad_bsde  # noqa: F401
from .forward import PathBatch, StateModel, TimeGrid, VariationalBatch  # noqa: F401
from .regression import BasisSpec  # noqa: F401
