"""Heteroscedastic regression with flow-refined residual densities.

A regression head predicts per-joint means and normalized scales; a
continuous normalizing flow trained by flow matching refines the residual
distribution beyond the parametric base.  The package also carries the
norm-chain likelihood upper bound, sparsification-based uncertainty
metrics, synthetic benchmark tasks, and an experiment CLI.
"""

__version__ = "0.1.0"

from .errors import DomainError, InputError, NumericError, SingularityError

__all__ = ["DomainError", "InputError", "NumericError", "SingularityError", "__version__"]
