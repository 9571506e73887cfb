"""Coupled MCMC for dated phylogenies under a binary-trait birth-death model."""

from .pruning import PRUNING_BACKEND

__all__ = ["PRUNING_BACKEND"]
__version__ = "0.1.0"
