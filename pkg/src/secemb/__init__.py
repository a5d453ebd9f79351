"""Two-server secure federated recommendation over sparse embedding updates.

Clients privately fetch the item rows they need and privately upload sparse
gradients, using distributed point functions shared between two
non-colluding servers. Dense parameters use additive sharing. The package
includes a MovieLens federated matrix-factorization simulator.
"""

from .ring import DEFAULT_PARAMS, RingParams, RingScalar, RingVector

__version__ = "0.1.0"

__all__ = ["DEFAULT_PARAMS", "RingParams", "RingScalar", "RingVector", "__version__"]
