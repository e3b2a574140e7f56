"""glyphflow: a desk-scale lab for unified understanding + generation.

A procedural glyph world stands in for an image corpus; a frozen semantic
featurizer and an invertible patch codec stand in for the two usual latent
pipelines; a small causal transformer with learnable query tokens conditions
either a direct regression head or a flow-matching diffusion transformer.
The evaluator measures prompt alignment, Gaussian Frechet distance, sample
diversity, and training efficiency so the regression-vs-flow and
semantic-vs-pixel comparisons become directional experiments.
"""

from glyphflow.numerics import (
    Adam,
    ContractError,
    DimensionError,
    GradTape,
    NumericError,
    Tensor,
    backward,
    grad_check,
    param,
)

__all__ = [
    "Adam",
    "ContractError",
    "DimensionError",
    "GradTape",
    "NumericError",
    "Tensor",
    "backward",
    "grad_check",
    "param",
]

__version__ = "0.1.0"
