"""Robust uncertainty-aware segmentation on toy scenes.

Weibull Bayesian mask head, adversarial style and deformation attacks
trained through gradient reversal, calibration metrics and
uncertainty-guided mask correction, all on numpy.
"""
from .grid import as_grid, load_grid, save_grid
from .weibull import GammaPrior, WeibullParams

__all__ = ["as_grid", "load_grid", "save_grid", "GammaPrior", "WeibullParams"]
__version__ = "0.1.0"
