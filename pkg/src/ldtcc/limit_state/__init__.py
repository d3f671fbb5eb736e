"""Limit-state models F(u, xi) and a derivative checker."""
from .base import FunctionModel, LimitStateModel, LinearModel, QuadraticModel
from .checks import DerivativeReport, check_derivatives
from .pde import AdvectionDiffusionModel, pde_distribution
from .portfolio import PortfolioModel
from .short_column import ShortColumnModel, short_column_gaussian, short_column_mixture

__all__ = [
    "AdvectionDiffusionModel", "DerivativeReport", "FunctionModel", "LimitStateModel",
    "LinearModel", "PortfolioModel", "QuadraticModel", "ShortColumnModel",
    "check_derivatives", "pde_distribution", "short_column_gaussian", "short_column_mixture",
]
