"""Patch masking, mask resampling, and patch-onto-person compositing.

Images are float arrays shaped (H, W, 3) in [0, 1]; masks are (H, W)
arrays of {0, 1}.  Boxes are (x, y, w, h) tuples in pixels with origin at
the top left.  The compositing path (scale to the configured fraction of
the person box, rotate, shift, brightness/contrast, bilinear resample) is
a linear operator in the patch pixels away from the [0,1] clamp, and
placement_grad implements its exact adjoint so the optimizer can pull
detector gradients back onto the patch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigurationError

log = logging.getLogger(__name__)

# Vertical anchor of the patch centre inside the person box (fraction of
# box height measured from the top), i.e. roughly the torso.
PATCH_ANCHOR_HEIGHT_FRAC = 0.35


@dataclass
class AugmentConfig:
    """Per-application patch transform ranges.

    rotation_deg: max absolute rotation, sampled uniformly.
    brightness: max absolute additive shift.
    contrast: (low, high) multiplicative range.
    jitter_frac: max center shift as a fraction of the person box size.
    """

    rotation_deg: float = 20.0
    brightness: float = 0.1
    contrast: tuple = (0.8, 1.2)
    jitter_frac: float = 0.05
    enabled: bool = True

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_deg=0.0, brightness=0.0, contrast=(1.0, 1.0),
                   jitter_frac=0.0, enabled=False)


@dataclass
class PatchSpec:
    """Reference patch image, its shape mask, and generation settings."""

    reference_image: np.ndarray
    mask: np.ndarray
    prompt: str = ""
    tau: float = 0.2
    background_color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.reference_image = np.asarray(self.reference_image, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.reference_image.ndim != 3 or self.reference_image.shape[2] != 3:
            raise ConfigurationError("reference_image must be (H, W, 3)")
        if self.mask.shape != self.reference_image.shape[:2]:
            raise ConfigurationError("mask must match reference_image spatially")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ConfigurationError("mask must be binary {0, 1}")
        self.mask = self.mask.astype(np.float64)
        if self.mask.sum() == 0:
            raise ConfigurationError("mask selects no pixels")
        if not (0.0 < self.tau < 1.0):
            raise ConfigurationError("tau must lie in (0, 1)")
        self.background_color = tuple(float(c) for c in self.background_color)
        if len(self.background_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.background_color):
            raise ConfigurationError("background_color must be an RGB triple in [0, 1]")


@dataclass
class TrainingSet:
    """Scene images with per-image person boxes used during optimization."""

    images: np.ndarray
    person_boxes: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ConfigurationError("images must be (N, H, W, 3)")
        if len(self.person_boxes) != self.images.shape[0]:
            raise ConfigurationError("person_boxes must have one entry per image")
        h, w = self.images.shape[1:3]
        for boxes in self.person_boxes:
            for (x, y, bw, bh) in boxes:
                if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > w + 1e-9 or y + bh > h + 1e-9:
                    raise ConfigurationError(f"box {(x, y, bw, bh)} outside image bounds")

    def __len__(self) -> int:
        return int(self.images.shape[0])


def apply_background(spec: PatchSpec) -> np.ndarray:
    """Replace everything outside the mask with the solid background color."""
    m = spec.mask[:, :, None]
    color = np.asarray(spec.background_color, dtype=np.float64)
    return spec.reference_image * m + color * (1.0 - m)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-reduce a binary mask: a block is 1 iff its mean is >= 0.5.

    Dimensions that do not divide evenly are zero-padded first.
    """
    if factor < 1 or int(factor) != factor:
        raise ConfigurationError("factor must be a positive integer")
    factor = int(factor)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ConfigurationError("mask must be 2-d")
    h, w = mask.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        mask = np.pad(mask, ((0, ph), (0, pw)))
        h, w = mask.shape
    blocks = mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float64)


def upsample_mask(latent_mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor expansion, the right inverse of downsample_mask on
    block-aligned masks."""
    return np.kron(np.asarray(latent_mask, dtype=np.float64), np.ones((factor, factor)))


@dataclass
class Placement:
    """Resolved geometry and photometry for one patch application."""

    center_y: float
    center_x: float
    target_h: int
    target_w: int
    angle_rad: float
    brightness: float
    contrast: float
    patch_shape: tuple
    image_shape: tuple
    # filled by _geometry: flat target indices and source sample coords
    _geo: tuple = field(default=None, repr=False, compare=False)


def plan_placement(person_box, patch_shape, mask_area: float, tau: float,
                   aug: AugmentConfig, rng=None, image_shape=None) -> Placement:
    """Choose scale/rotation/shift/photometry for one application.

    The patch is scaled so its masked pixel area equals
    (tau * sqrt(box_w * box_h))**2, then centred horizontally at
    PATCH_ANCHOR_HEIGHT_FRAC of the box height.  If the scaled patch
    would not fit in the box the scale is clamped with a warning.
    """
    x, y, w, h = (float(v) for v in person_box)
    if w <= 0 or h <= 0:
        raise ConfigurationError("person box must have positive size")
    if mask_area <= 0:
        raise ConfigurationError("patch mask selects no pixels")
    ph, pw = int(patch_shape[0]), int(patch_shape[1])
    target_area = (tau * math.sqrt(w * h)) ** 2
    scale = math.sqrt(target_area / mask_area)
    if ph * scale > h or pw * scale > w:
        clamped = min(h / ph, w / pw)
        log.warning("patch at scale %.4f exceeds person box %s; clamping to %.4f",
                    scale, person_box, clamped)
        scale = clamped
    th = max(1, int(round(ph * scale)))
    tw = max(1, int(round(pw * scale)))

    angle = 0.0
    brightness = 0.0
    contrast = 1.0
    jx = jy = 0.0
    if aug.enabled and rng is not None:
        angle = math.radians(rng.uniform(-aug.rotation_deg, aug.rotation_deg))
        brightness = rng.uniform(-aug.brightness, aug.brightness)
        contrast = rng.uniform(aug.contrast[0], aug.contrast[1])
        jx = rng.uniform(-aug.jitter_frac, aug.jitter_frac) * w
        jy = rng.uniform(-aug.jitter_frac, aug.jitter_frac) * h
    return Placement(
        center_y=y + PATCH_ANCHOR_HEIGHT_FRAC * h + jy,
        center_x=x + 0.5 * w + jx,
        target_h=th,
        target_w=tw,
        angle_rad=angle,
        brightness=brightness,
        contrast=contrast,
        patch_shape=(ph, pw),
        image_shape=None if image_shape is None else tuple(image_shape),
    )


def _geometry(placement: Placement, image_shape, patch_mask: np.ndarray):
    """Target pixel indices and bilinear source coordinates for a placement.

    Cached on the placement so forward and adjoint share one resolution.
    """
    if placement._geo is not None:
        return placement._geo
    ih, iw = int(image_shape[0]), int(image_shape[1])
    ph, pw = placement.patch_shape
    th, tw = placement.target_h, placement.target_w
    cos_a = math.cos(placement.angle_rad)
    sin_a = math.sin(placement.angle_rad)
    fh = int(math.ceil(th * abs(cos_a) + tw * abs(sin_a))) + 1
    fw = int(math.ceil(tw * abs(cos_a) + th * abs(sin_a))) + 1
    y0 = int(math.floor(placement.center_y - fh / 2.0))
    x0 = int(math.floor(placement.center_x - fw / 2.0))
    rows = np.arange(max(0, y0), min(ih, y0 + fh))
    cols = np.arange(max(0, x0), min(iw, x0 + fw))
    if rows.size == 0 or cols.size == 0:
        geo = (np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0))
        placement._geo = geo
        return geo
    gy, gx = np.meshgrid(rows, cols, indexing="ij")
    dy = gy.ravel() + 0.5 - placement.center_y
    dx = gx.ravel() + 0.5 - placement.center_x
    # rotate target offsets back into the unrotated patch frame
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    src_x = (u / tw + 0.5) * pw - 0.5
    src_y = (v / th + 0.5) * ph - 0.5
    inside = (src_x > -0.5) & (src_x < pw - 0.5) & (src_y > -0.5) & (src_y < ph - 0.5)
    # nearest-sampled mask keeps the footprint binary
    myi = np.clip(np.round(src_y), 0, ph - 1).astype(int)
    mxi = np.clip(np.round(src_x), 0, pw - 1).astype(int)
    inside &= patch_mask[myi, mxi] > 0.5
    geo = (gy.ravel()[inside], gx.ravel()[inside], src_y[inside], src_x[inside])
    placement._geo = geo
    return geo


def _bilinear_weights(src_y, src_x, ph, pw):
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = src_y - y0
    fx = src_x - x0
    y0c = np.clip(y0, 0, ph - 1)
    y1c = np.clip(y0 + 1, 0, ph - 1)
    x0c = np.clip(x0, 0, pw - 1)
    x1c = np.clip(x0 + 1, 0, pw - 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return (y0c, y1c, x0c, x1c, w00, w01, w10, w11)


def _sample_bilinear(patch: np.ndarray, src_y, src_x):
    ph, pw = patch.shape[:2]
    y0, y1, x0, x1, w00, w01, w10, w11 = _bilinear_weights(src_y, src_x, ph, pw)
    return (patch[y0, x0] * w00[:, None] + patch[y0, x1] * w01[:, None]
            + patch[y1, x0] * w10[:, None] + patch[y1, x1] * w11[:, None])


def _sample_bilinear_adjoint(grad_vals, src_y, src_x, patch_shape):
    ph, pw = patch_shape[:2]
    y0, y1, x0, x1, w00, w01, w10, w11 = _bilinear_weights(src_y, src_x, ph, pw)
    grad = np.zeros((ph, pw, grad_vals.shape[1]), dtype=np.float64)
    np.add.at(grad, (y0, x0), grad_vals * w00[:, None])
    np.add.at(grad, (y0, x1), grad_vals * w01[:, None])
    np.add.at(grad, (y1, x0), grad_vals * w10[:, None])
    np.add.at(grad, (y1, x1), grad_vals * w11[:, None])
    return grad


def apply_placement(image: np.ndarray, patch_image: np.ndarray, patch_mask: np.ndarray,
                    placement: Placement) -> np.ndarray:
    """Composite the patch into a copy of `image` per the placement.

    Pixels outside the placed masked footprint are never written.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    gy, gx, sy, sx = _geometry(placement, image.shape, patch_mask)
    if gy.size == 0:
        return out
    vals = _sample_bilinear(patch_image, sy, sx)
    vals = np.clip(placement.contrast * vals + placement.brightness, 0.0, 1.0)
    out[gy, gx] = vals
    return out


def placement_grad(grad_image: np.ndarray, patch_image: np.ndarray, patch_mask: np.ndarray,
                   placement: Placement) -> np.ndarray:
    """Adjoint of apply_placement in the patch pixels.

    The [0,1] clamp contributes a zero subgradient where it saturates, so
    the forward pre-clamp values are recomputed to gate the pullback.
    """
    gy, gx, sy, sx = _geometry(placement, grad_image.shape, patch_mask)
    grad_patch = np.zeros_like(patch_image, dtype=np.float64)
    if gy.size == 0:
        return grad_patch
    pre = placement.contrast * _sample_bilinear(patch_image, sy, sx) + placement.brightness
    open_gate = ((pre > 0.0) & (pre < 1.0)).astype(np.float64)
    upstream = grad_image[gy, gx] * open_gate * placement.contrast
    return _sample_bilinear_adjoint(upstream, sy, sx, patch_image.shape)


def apply_patch(image: np.ndarray, person_box, patch_image: np.ndarray,
                patch_mask: np.ndarray, tau: float, aug: AugmentConfig = None,
                rng=None) -> np.ndarray:
    """Scale, transform, and composite one patch onto one person box."""
    if aug is None:
        aug = AugmentConfig.identity()
    if float(np.sum(patch_mask)) == 0.0:
        return np.array(image, dtype=np.float64, copy=True)
    placement = plan_placement(person_box, patch_image.shape[:2],
                               float(np.sum(patch_mask)), tau, aug, rng,
                               image_shape=image.shape[:2])
    return apply_placement(image, patch_image, patch_mask, placement)


def make_control_patch(kind: str, shape, mask: np.ndarray, seed: int = 0) -> np.ndarray:
    """Gray or seeded-random control patch for evaluation baselines."""
    h, w = int(shape[0]), int(shape[1])
    if kind == "gray":
        patch = np.full((h, w, 3), 0.5, dtype=np.float64)
    elif kind == "random":
        patch = np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w, 3))
    else:
        raise ConfigurationError(f"unknown control patch kind {kind!r}")
    return patch * np.asarray(mask, dtype=np.float64)[:, :, None]


# ---------------------------------------------------------------------------
# image / mask file IO

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"unreadable image {path}: {exc}") from exc
    return arr


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Single-channel mask file; >= 128 counts as inside."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"unreadable mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def save_patch_rgba(path, patch_image: np.ndarray, mask: np.ndarray, meta: dict = None) -> None:
    """Export a patch as RGBA with the mask as the alpha channel.

    Optional metadata (for instance the run's config hash) is embedded as
    PNG text chunks so the artifact stays self-describing.
    """
    rgb = np.clip(np.asarray(patch_image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    alpha = ((np.asarray(mask) > 0.5) * 255).astype(np.uint8)
    rgba = np.dstack([rgb, alpha])
    im = Image.fromarray(rgba, mode="RGBA")
    if meta:
        from PIL.PngImagePlugin import PngInfo

        info = PngInfo()
        for key, value in sorted(meta.items()):
            info.add_text(str(key), str(value))
        im.save(path, pnginfo=info)
    else:
        im.save(path)


def load_patch_rgba(path):
    """(patch_image, mask) from an RGBA export; alpha >= 128 is inside."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"unreadable patch {path}: {exc}") from exc
    return arr[:, :, :3] / 255.0, (arr[:, :, 3] >= 128).astype(np.float64)
