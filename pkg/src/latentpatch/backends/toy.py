"""Seeded toy backends: fast, deterministic, fully differentiable.

The toy diffusion model predicts noise as an affine function of the
latent (with deliberately weak latent coupling so coarse-step inversion
round-trips cleanly), a text-embedding term, and a per-timestep bias.
Its latent codec is an 8x block mean / nearest upsample pair, which is
exactly the identity on latents: encode(decode(z)) == z bit-for-bit.

The toy detector scans a fixed anchor grid and scores each anchor with a
sigmoid of an affine functional of box pixel statistics (whole-box and
torso-region channel means against person color templates).  Scenes
produced by make_toy_scenes draw rectangle "persons" from those same
templates, so the detector genuinely detects them and a patch over the
torso genuinely degrades the score.  Everything is closed-form
differentiable in the image pixels.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from ..errors import ConfigurationError
from ..ido import Detection, iou
from ..render import TrainingSet
from ..schedule import ConditionEmbedding
from .base import (DetectorBackend, DiffusionBackend, SimilarityBackend,
                   register_backend)

# person drawing geometry, shared by the scene generator and the detector
HEAD_FRAC = 0.15
TORSO_FRAC = 0.65
TORSO_COL_LO = 0.2
TORSO_COL_HI = 0.8
HEAD_COLOR = (0.80, 0.65, 0.55)
SHIRT_COLOR = (0.20, 0.32, 0.68)
PANTS_COLOR = (0.22, 0.20, 0.24)
PERSON_SIZES = ((20, 32), (28, 44))


def _text_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class ToyLinearDiffusion(DiffusionBackend):
    """eps(z, t, e) = a_t * z + B @ pool(e) + c_t with seeded parameters.

    |a_t| stays far below the 0.5 stability cap by default; see a_scale.
    """

    def __init__(self, seed: int = 0, latent_size: int = 16, pixel_factor: int = 8,
                 a_scale: float = 1e-6, embed_tokens: int = 4, embed_dim: int = 8,
                 embed_scale: float = 0.15, bias_scale: float = 1.0,
                 coupling_scale: float = 0.02):
        if not (0.0 <= a_scale <= 0.5):
            raise ConfigurationError("a_scale must lie in [0, 0.5]")
        self.seed = int(seed)
        self._latent_shape = (3, int(latent_size), int(latent_size))
        self._factor = int(pixel_factor)
        self.a_scale = float(a_scale)
        self.embed_tokens = int(embed_tokens)
        self.embed_dim = int(embed_dim)
        self.embed_scale = float(embed_scale)
        self.bias_scale = float(bias_scale)
        rng = np.random.default_rng([self.seed, 3])
        self.coupling = rng.normal(0.0, coupling_scale,
                                   size=self._latent_shape + (self.embed_dim,))
        self._coeff_cache = {}
        self.roundtrip_tolerance = 1e-12  # exact for latent-aligned images

    @property
    def latent_shape(self) -> tuple:
        return self._latent_shape

    @property
    def mask_factor(self) -> int:
        return self._factor

    @property
    def image_size(self) -> int:
        return self._latent_shape[1] * self._factor

    def _coeffs(self, t: int):
        got = self._coeff_cache.get(t)
        if got is None:
            rng = np.random.default_rng([self.seed, 7, int(t)])
            a_t = self.a_scale * rng.uniform(-1.0, 1.0)
            c_t = rng.normal(0.0, self.bias_scale, size=self._latent_shape)
            got = (a_t, c_t)
            self._coeff_cache[t] = got
        return got

    def predict_noise(self, z: np.ndarray, t: int, embedding: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self._latent_shape:
            raise ConfigurationError(f"latent shape {z.shape} != {self._latent_shape}")
        a_t, c_t = self._coeffs(int(t))
        pooled = np.asarray(embedding, dtype=np.float64).mean(axis=0)
        return a_t * z + self.coupling @ pooled + c_t

    def noise_embedding_grad(self, z, t, embedding, upstream) -> np.ndarray:
        embedding = np.asarray(embedding, dtype=np.float64)
        g = np.tensordot(np.asarray(upstream, dtype=np.float64), self.coupling, axes=3)
        return np.tile(g / embedding.shape[0], (embedding.shape[0], 1))

    def embed_text(self, text: str) -> ConditionEmbedding:
        if text == "":
            e = np.zeros((self.embed_tokens, self.embed_dim))
        else:
            rng = np.random.default_rng([self.seed, 11, _text_seed(text)])
            e = rng.normal(0.0, self.embed_scale, size=(self.embed_tokens, self.embed_dim))
        return ConditionEmbedding(e)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        n = self.image_size
        if image.shape != (n, n, 3):
            raise ConfigurationError(f"expected ({n}, {n}, 3) image, got {image.shape}")
        f = self._factor
        c = self._latent_shape[1]
        blocks = image.reshape(c, f, c, f, 3).mean(axis=(1, 3))
        return blocks.transpose(2, 0, 1)

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self._latent_shape:
            raise ConfigurationError(f"latent shape {z.shape} != {self._latent_shape}")
        f = self._factor
        return np.repeat(np.repeat(z.transpose(1, 2, 0), f, axis=0), f, axis=1)

    def decode_grad(self, grad_image: np.ndarray) -> np.ndarray:
        grad_image = np.asarray(grad_image, dtype=np.float64)
        f = self._factor
        c = self._latent_shape[1]
        blocks = grad_image.reshape(c, f, c, f, 3).sum(axis=(1, 3))
        return blocks.transpose(2, 0, 1)


class ToyDetector(DetectorBackend):
    """Sliding anchor grid scored against person color templates.

    objectness = sigmoid(k0 - kc*||mu_torso - torso_template||^2
                            - kw*||mu_box - body_template||^2
                            - kh*||mu_head - head_template||^2).
    The head-band term is what separates a true person from an anchor
    sitting on a solid shirt-colored expanse (whose torso and even
    whole-box means can pass by accident); a patch on the torso never
    touches it.  Class scores are a softmax whose person logit uses the
    whole-box statistic; the remaining classes are seeded constants.
    """

    def __init__(self, seed: int = 0, image_size: int = 64, stride: int = 4,
                 anchor_sizes: tuple = PERSON_SIZES, confidence_threshold: float = 0.5,
                 nms_iou: float = 0.45, num_classes: int = 3,
                 k_obj: float = 3.0, k_torso: float = 160.0, k_whole: float = 150.0,
                 k_head: float = 30.0, k_cls: float = 3.0, k_cls_whole: float = 25.0):
        self.seed = int(seed)
        self.image_size = int(image_size)
        self.stride = int(stride)
        self.anchor_sizes = tuple(tuple(map(int, s)) for s in anchor_sizes)
        self.confidence_threshold = float(confidence_threshold)
        self.nms_iou = float(nms_iou)
        self.num_classes = int(num_classes)
        self.k_obj = float(k_obj)
        self.k_torso = float(k_torso)
        self.k_whole = float(k_whole)
        self.k_head = float(k_head)
        self.k_cls = float(k_cls)
        self.k_cls_whole = float(k_cls_whole)
        rng = np.random.default_rng([self.seed, 5])
        self.decoy_logits = rng.normal(-1.0, 0.25, size=self.num_classes - 1)
        self.torso_template, self.body_template, self.head_template = _person_templates()
        self.anchors = self._build_anchors()

    @property
    def differentiable(self) -> bool:
        return True

    def _build_anchors(self) -> list:
        anchors = []
        for (w, h) in self.anchor_sizes:
            for y in range(0, self.image_size - h + 1, self.stride):
                for x in range(0, self.image_size - w + 1, self.stride):
                    anchors.append((x, y, w, h))
        if not anchors:
            raise ConfigurationError("anchor grid is empty; image too small")
        return anchors

    @staticmethod
    def _torso_region(box):
        x, y, w, h = box
        ty0 = y + int(round(HEAD_FRAC * h))
        ty1 = y + int(round(TORSO_FRAC * h))
        tx0 = x + int(round(TORSO_COL_LO * w))
        tx1 = x + int(round(TORSO_COL_HI * w))
        return ty0, ty1, tx0, tx1

    @staticmethod
    def _head_region(box):
        x, y, w, h = box
        return y, y + int(round(HEAD_FRAC * h)), x, x + w

    def _box_stats(self, image, box):
        x, y, w, h = box
        mu_w = image[y:y + h, x:x + w].mean(axis=(0, 1))
        ty0, ty1, tx0, tx1 = self._torso_region(box)
        mu_c = image[ty0:ty1, tx0:tx1].mean(axis=(0, 1))
        hy0, hy1, hx0, hx1 = self._head_region(box)
        mu_h = image[hy0:hy1, hx0:hx1].mean(axis=(0, 1))
        return mu_w, mu_c, mu_h

    def _score_parts(self, mu_w, mu_c, mu_h):
        dw = mu_w - self.body_template
        dc = mu_c - self.torso_template
        dh = mu_h - self.head_template
        obj_logit = (self.k_obj - self.k_torso * float(dc @ dc)
                     - self.k_whole * float(dw @ dw) - self.k_head * float(dh @ dh))
        p_obj = 1.0 / (1.0 + np.exp(-obj_logit))
        logits = np.concatenate(([self.k_cls - self.k_cls_whole * float(dw @ dw)],
                                 self.decoy_logits))
        logits = logits - logits.max()
        exp = np.exp(logits)
        p_cls = exp / exp.sum()
        return p_obj, p_cls, dw, dc, dh

    def detect(self, images: np.ndarray, min_confidence: float = None,
               nms: bool = True) -> list:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1] != self.image_size or images.shape[2] != self.image_size:
            raise ConfigurationError(f"detector expects {self.image_size}-px images")
        threshold = self.confidence_threshold if min_confidence is None else float(min_confidence)
        out = []
        for image in images:
            # integral image gives O(1) region means per anchor
            ii = np.zeros((self.image_size + 1, self.image_size + 1, 3))
            ii[1:, 1:] = image.cumsum(axis=0).cumsum(axis=1)
            dets = []
            for box in self.anchors:
                x, y, w, h = box
                mu_w = _ii_mean(ii, y, y + h, x, x + w)
                ty0, ty1, tx0, tx1 = self._torso_region(box)
                mu_c = _ii_mean(ii, ty0, ty1, tx0, tx1)
                hy0, hy1, hx0, hx1 = self._head_region(box)
                mu_h = _ii_mean(ii, hy0, hy1, hx0, hx1)
                p_obj, p_cls, _, _, _ = self._score_parts(mu_w, mu_c, mu_h)
                det = Detection(box=box, p_obj=float(p_obj), p_cls=p_cls)
                if det.confidence() >= threshold:
                    dets.append(det)
            if nms:
                dets = _greedy_nms(dets, self.nms_iou)
            out.append(dets)
        return out

    def detection_grad(self, image, detections, weights, target_class: int = 0) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        grad = np.zeros_like(image)
        for det, wk in zip(detections, weights):
            if wk == 0.0:
                continue
            box = tuple(int(round(v)) for v in det.box)
            x, y, w, h = box
            mu_w, mu_c, mu_h = self._box_stats(image, box)
            p_obj, p_cls, dw, dc, dh = self._score_parts(mu_w, mu_c, mu_h)
            pt = p_cls[target_class]
            sig = p_obj * (1.0 - p_obj)
            d_obj_dc = sig * (-2.0 * self.k_torso) * dc
            d_obj_dw = sig * (-2.0 * self.k_whole) * dw
            d_obj_dh = sig * (-2.0 * self.k_head) * dh
            # softmax jacobian row for the person logit (the only non-constant one)
            d_pt_dl0 = pt * ((1.0 if target_class == 0 else 0.0) - p_cls[0])
            d_cls_dw = d_pt_dl0 * (-2.0 * self.k_cls_whole) * dw
            g_mu_c = wk * pt * d_obj_dc
            g_mu_w = wk * (pt * d_obj_dw + p_obj * d_cls_dw)
            g_mu_h = wk * pt * d_obj_dh
            grad[y:y + h, x:x + w] += g_mu_w / (w * h)
            ty0, ty1, tx0, tx1 = self._torso_region(box)
            grad[ty0:ty1, tx0:tx1] += g_mu_c / ((ty1 - ty0) * (tx1 - tx0))
            hy0, hy1, hx0, hx1 = self._head_region(box)
            grad[hy0:hy1, hx0:hx1] += g_mu_h / ((hy1 - hy0) * (hx1 - hx0))
        return grad


def _ii_mean(ii, y0, y1, x0, x1):
    area = (y1 - y0) * (x1 - x0)
    return (ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]) / area


def _greedy_nms(dets: list, nms_iou: float) -> list:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence(), i))
    kept = []
    for i in order:
        if all(iou(dets[i].box, dets[j].box) <= nms_iou for j in kept):
            kept.append(i)
    return [dets[i] for i in sorted(kept)]


class ToyColorFeatureScorer(SimilarityBackend):
    """Cosine similarity over a coarse spatial color histogram.

    Images embed as per-cell channel means on a grid; the features are
    linear in pixel values, so blending an image toward another moves the
    embedding along a straight segment and the cosine to the original
    decays monotonically.  Text embeds as a seeded pseudo-vector.
    """

    def __init__(self, seed: int = 0, grid: int = 4):
        self.seed = int(seed)
        self.grid = int(grid)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        g = self.grid
        if h % g or w % g:
            raise ConfigurationError(f"image size must be divisible by grid {g}")
        cells = image.reshape(g, h // g, g, w // g, 3).mean(axis=(1, 3))
        return cells.ravel()

    def embed_text(self, text: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 13, _text_seed(text)])
        return rng.normal(0.0, 1.0, size=self.grid * self.grid * 3)


def _person_templates():
    """Torso-region, whole-box and head-band mean colors of a canonical
    person."""
    w, h = PERSON_SIZES[1]
    canvas = np.zeros((h, w, 3))
    _draw_person(canvas, 0, 0, w, h, np.zeros(3))
    ty0 = int(round(HEAD_FRAC * h))
    ty1 = int(round(TORSO_FRAC * h))
    tx0 = int(round(TORSO_COL_LO * w))
    tx1 = int(round(TORSO_COL_HI * w))
    return (canvas[ty0:ty1, tx0:tx1].mean(axis=(0, 1)), canvas.mean(axis=(0, 1)),
            canvas[:ty0].mean(axis=(0, 1)))


def _draw_person(image, x, y, w, h, color_shift):
    head_rows = int(round(HEAD_FRAC * h))
    torso_rows = int(round(TORSO_FRAC * h))
    image[y:y + head_rows, x:x + w] = np.clip(np.asarray(HEAD_COLOR) + color_shift, 0, 1)
    image[y + head_rows:y + torso_rows, x:x + w] = np.clip(np.asarray(SHIRT_COLOR) + color_shift, 0, 1)
    image[y + torso_rows:y + h, x:x + w] = np.clip(np.asarray(PANTS_COLOR) + color_shift, 0, 1)


def make_toy_scenes(n: int, seed: int = 0, image_size: int = 64,
                    snap: int = 4, jitter: int = 1) -> TrainingSet:
    """Deterministic scenes with 1-2 template persons on smooth backgrounds.

    Person positions snap to the detector's anchor stride (plus a small
    jitter) so every person has a well-overlapping anchor.
    """
    if n < 1:
        raise ConfigurationError("need at least one scene")
    rng = np.random.default_rng([seed, 17])
    images = np.zeros((n, image_size, image_size, 3))
    person_boxes = []
    for i in range(n):
        coarse = rng.uniform(0.45, 0.65, size=(8, 8, 3))
        bg = np.kron(coarse, np.ones((image_size // 8, image_size // 8, 1)))
        image = np.clip(bg + rng.normal(0.0, 0.01, size=bg.shape), 0.0, 1.0)
        boxes = []
        count = 1 + (i % 2)
        for p in range(count):
            w, h = PERSON_SIZES[(i + p) % len(PERSON_SIZES)]
            lo_x = 2 if count == 1 or p == 0 else image_size // 2 + 2
            hi_x = (image_size - w - 2) if count == 1 or p == 1 else image_size // 2 - w - 2
            if hi_x < lo_x:
                hi_x = lo_x
            gx = rng.integers(lo_x // snap, hi_x // snap + 1) * snap
            gy = rng.integers(2 // snap, (image_size - h - 2) // snap + 1) * snap
            x = int(np.clip(gx + rng.integers(-jitter, jitter + 1), 0, image_size - w))
            y = int(np.clip(gy + rng.integers(-jitter, jitter + 1), 0, image_size - h))
            shift = rng.uniform(-0.02, 0.02, size=3)
            _draw_person(image, x, y, w, h, shift)
            boxes.append((float(x), float(y), float(w), float(h)))
        images[i] = image
        person_boxes.append(boxes)
    return TrainingSet(images=images, person_boxes=person_boxes)


def make_toy_patch_spec(seed: int = 0, size: int = 128, block: int = 8,
                        prompt: str = "printed art patch", tau: float = 0.2):
    """Block-aligned reference image and mask sized for the toy diffusion.

    Block alignment makes the toy codec lossless on the reference and the
    downsampled latent mask an exact cover of the pixel mask.
    """
    from ..render import PatchSpec

    rng = np.random.default_rng([seed, 19])
    cells = size // block
    coarse = rng.uniform(0.1, 0.9, size=(cells, cells, 3))
    image = np.kron(coarse, np.ones((block, block, 1)))
    mask = np.zeros((size, size))
    lo = 3 * block
    hi = size - 3 * block
    mask[lo:hi, lo:hi] = 1.0
    return PatchSpec(reference_image=image, mask=mask, prompt=prompt, tau=tau)


def make_toy_dataset(directory, n: int, seed: int = 0, image_size: int = 64) -> str:
    """Write scene PNGs plus a JSONL annotation manifest; returns its path."""
    from ..render import save_image

    os.makedirs(directory, exist_ok=True)
    scenes = make_toy_scenes(n, seed=seed, image_size=image_size)
    manifest = os.path.join(directory, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for i in range(len(scenes)):
            name = f"scene_{i:04d}.png"
            save_image(os.path.join(directory, name), scenes.images[i])
            record = {
                "image_path": name,
                "boxes": [[0, *box] for box in scenes.person_boxes[i]],
                "patched_person_flags": [True] * len(scenes.person_boxes[i]),
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


register_backend("toy-linear", ToyLinearDiffusion)
register_backend("toy-detector", ToyDetector)
register_backend("toy-color", ToyColorFeatureScorer)
