"""Bimodule KMS-symmetric quantum Markov semigroups on finite inclusions.

Jones-tower coordinates, generator construction and verification, the
directional gradient-flow representation of the dual Laplacian, and
numeric checks of entropy decay and transport inequalities.
"""
from . import clifford, directional, flow, matcore, semigroup, tower
from .errors import KmsFlowError

__all__ = ["clifford", "directional", "flow", "matcore", "semigroup", "tower", "KmsFlowError"]
__version__ = "0.1.0"
