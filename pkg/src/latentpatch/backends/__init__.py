"""Model backends: abstract interfaces, the name registry, and the toy
implementations that register themselves on import."""

from .base import (DetectorBackend, DiffusionBackend, SimilarityBackend,
                   create_backend, ensemble_gradient, list_backends,
                   register_backend, resolve_backend)
from .toy import (ToyColorFeatureScorer, ToyDetector, ToyLinearDiffusion,
                  make_toy_dataset, make_toy_patch_spec, make_toy_scenes)

__all__ = [
    "DiffusionBackend",
    "DetectorBackend",
    "SimilarityBackend",
    "register_backend",
    "resolve_backend",
    "create_backend",
    "list_backends",
    "ensemble_gradient",
    "ToyLinearDiffusion",
    "ToyDetector",
    "ToyColorFeatureScorer",
    "make_toy_scenes",
    "make_toy_patch_spec",
    "make_toy_dataset",
]
