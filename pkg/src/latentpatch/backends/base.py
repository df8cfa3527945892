"""Backend interfaces and the name registry used by run configs.

Pipelines talk to models only through these interfaces: a diffusion
backend (noise prediction, latent codec, text embedding), a detector
backend, and a similarity scorer.  Implementations register a factory
under a unique name; run configs select backends by that name, and extra
implementations can be dropped in from plugin files without touching the
pipeline code.

Backends declare how they tolerate concurrent use via a `concurrency`
attribute: "concurrent-read" means inference calls may safely overlap,
"exclusive" means callers must serialize access.
"""

from __future__ import annotations

import abc

import numpy as np

from ..errors import ConfigurationError
from ..ido import detection_loss_weights
from ..schedule import ConditionEmbedding


class DiffusionBackend(abc.ABC):
    concurrency = "concurrent-read"

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple:
        """(channels, height, width) of the latent tensors."""

    @property
    def mask_factor(self) -> int:
        """Pixel-to-latent spatial ratio used when downsampling masks."""
        return 1

    @abc.abstractmethod
    def predict_noise(self, z: np.ndarray, t: int, embedding: np.ndarray) -> np.ndarray:
        """Noise estimate for latent z at training timestep t."""

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) image in [0, 1] to a latent tensor."""

    @abc.abstractmethod
    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        """Latent tensor back to an (H, W, 3) image."""

    @abc.abstractmethod
    def embed_text(self, text: str) -> ConditionEmbedding:
        """Deterministic embedding for a prompt ('' is the null prompt)."""

    # Gradient hooks used by the optimization stages.  A closed-form or
    # autograd-capable backend overrides these.
    def noise_embedding_grad(self, z, t, embedding, upstream) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} cannot differentiate "
                                  "noise w.r.t. embeddings")

    def decode_grad(self, grad_image: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} cannot differentiate "
                                  "its decoder")


class DetectorBackend(abc.ABC):
    concurrency = "concurrent-read"
    confidence_threshold = 0.5

    @property
    @abc.abstractmethod
    def differentiable(self) -> bool:
        """Whether detection_grad is available."""

    @abc.abstractmethod
    def detect(self, images: np.ndarray, min_confidence: float = None,
               nms: bool = True) -> list:
        """Per-image detection lists for an (N, H, W, 3) batch.

        min_confidence overrides the configured confidence_threshold, and
        nms=False skips suppression; optimization passes (0.0, False) so
        every box keeps a gradient below the evaluation threshold.
        """

    def detection_grad(self, image, detections, weights, target_class: int = 0) -> np.ndarray:
        """d(sum_k weights[k] * score_k(target_class)) / d image."""
        raise NotImplementedError(f"{type(self).__name__} is not differentiable")


class SimilarityBackend(abc.ABC):
    concurrency = "concurrent-read"

    @abc.abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        """Feature vector for an (H, W, 3) image."""

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        """Feature vector for a description."""

    def similarity(self, a: np.ndarray, b: np.ndarray) -> float:
        na = float(np.linalg.norm(a))
        nb = float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(np.dot(a, b) / (na * nb))


_REGISTRY: dict = {}


def register_backend(name: str, factory) -> None:
    """Register a backend factory under a unique name."""
    if not name or not isinstance(name, str):
        raise ConfigurationError("backend name must be a non-empty string")
    if name in _REGISTRY:
        raise ConfigurationError(f"backend {name!r} is already registered")
    _REGISTRY[name] = factory


def resolve_backend(name: str):
    """Factory registered under `name`."""
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY)) or "(none)"
        raise ConfigurationError(f"unknown backend {name!r}; registered: {known}") from None


def create_backend(name: str, params: dict = None):
    factory = resolve_backend(name)
    try:
        return factory(**(params or {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for backend {name!r}: {exc}") from exc


def list_backends() -> list:
    return sorted(_REGISTRY)


def ensemble_gradient(detectors: list, images: np.ndarray, gt_boxes: list,
                      loss_config) -> np.ndarray:
    """Mean loss gradient w.r.t. the images across several detectors.

    Every detector runs its own forward pass and loss weighting; the
    per-detector image gradients are averaged.  Any non-differentiable
    member is a configuration error.
    """
    if not detectors:
        raise ConfigurationError("empty detector ensemble")
    for det in detectors:
        if not det.differentiable:
            raise ConfigurationError(f"{type(det).__name__} is not differentiable; "
                                     "cannot join a gradient ensemble")
    images = np.asarray(images, dtype=np.float64)
    total = np.zeros_like(images)
    for det in detectors:
        batch = det.detect(images, min_confidence=0.0, nms=False)
        weights = detection_loss_weights(batch, gt_boxes, loss_config)
        for i in range(images.shape[0]):
            if any(weights[i]):
                total[i] += det.detection_grad(images[i], batch[i], weights[i],
                                               loss_config.target_class)
    return total / len(detectors)
