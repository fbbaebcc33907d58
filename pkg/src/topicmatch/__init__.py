"""Topic-assisted detector-free image matching.

Coarse matching pools global context into a small set of latent topics,
merges that context back into the features, and scores pairs with a
dual-softmax; fine matching refines each coarse match to subpixel
coordinates with a self-detected keypoint. Includes synthetic two-view
data generation, training, evaluation, and an analytic operation-count
profiler.
"""

from .errors import TopicMatchError

__version__ = "0.1.0"

__all__ = ["TopicMatchError", "__version__"]
