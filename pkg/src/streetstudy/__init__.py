"""Street-scene collision benchmark toolkit.

Builds and evaluates a detection-based pedestrian collision frequency
benchmark: geodesic image-to-crossing matching, dataset statistics and
fold splitting, COCO-style detection AP with relative-area size slices,
RMSE/WMAE regression metrics, constant and ridge baselines, a
self-attention collision prediction head with analytic gradients, and a
seeded synthetic benchmark generator that ties it all together.
"""

from .errors import NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "__version__"]
