"""Latent patch optimization against a detector.

The optimizer perturbs the mid-trajectory latent of an inversion
trajectory, decodes the perturbed latent through the frozen guided
sampler, composites the masked result onto every training person, and
descends a detection loss.  The gradient skips the sampler itself: the
loss gradient at the decoded pixels is pulled back through compositing
and decoding, then scaled by the telescoped alpha-bar ratio of the
sampling steps (the exact chain for a noise model with no latent
coupling, and the working approximation otherwise).  Updates are Adam
directions, clipped to an L-infinity ball and zeroed outside the
downsampled patch mask.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .archive import load_archive, save_archive
from .errors import ConfigurationError, PipelineError
from .inversion import (InversionTrajectory, guided_sample, optimize_null_text,
                        pivotal_invert)
from .optim import Adam
from .render import (AugmentConfig, PatchSpec, TrainingSet, apply_background,
                     apply_placement, downsample_mask, placement_grad,
                     plan_placement)
from .schedule import LatentState, NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class Detection:
    """One detector output: box (x, y, w, h), objectness, class scores."""

    box: tuple
    p_obj: float
    p_cls: np.ndarray

    def __post_init__(self):
        x, y, w, h = self.box
        if w <= 0 or h <= 0:
            raise ConfigurationError("detection box must have positive size")
        self.box = (float(x), float(y), float(w), float(h))
        self.p_obj = float(self.p_obj)
        self.p_cls = np.asarray(self.p_cls, dtype=np.float64)
        if not 0.0 <= self.p_obj <= 1.0:
            raise ConfigurationError("p_obj must lie in [0, 1]")
        if self.p_cls.ndim != 1 or np.any(self.p_cls < 0.0) or np.any(self.p_cls > 1.0):
            raise ConfigurationError("p_cls must be a probability vector")

    def score(self, target_class: int) -> float:
        return self.p_obj * float(self.p_cls[target_class])

    def confidence(self) -> float:
        return self.p_obj * float(self.p_cls.max())


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0  # degenerate box overlaps nothing
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


@dataclass
class LossConfig:
    """Which detection loss drives the optimization, and its knobs."""

    kind: str = "iou_detection"
    iou_threshold: float = 0.5
    target_class: int = 0

    def __post_init__(self):
        if self.kind not in ("iou_detection", "common_detection"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if not (0.0 < self.iou_threshold < 1.0):
            raise ConfigurationError("iou_threshold must lie in (0, 1)")
        if self.target_class < 0:
            raise ConfigurationError("target_class must be >= 0")


def common_detection_loss(batch: list, config: LossConfig) -> float:
    """Mean over images of the maximum target-class score.

    Images with no detections contribute 0.
    """
    if not batch:
        raise ConfigurationError("empty batch")
    total = 0.0
    for dets in batch:
        if dets:
            total += max(d.score(config.target_class) for d in dets)
    return total / len(batch)


def common_detection_loss_weights(batch: list, config: LossConfig) -> list:
    """d loss / d score_k for every detection, matching common_detection_loss."""
    n = len(batch)
    weights = []
    for dets in batch:
        w = [0.0] * len(dets)
        if dets:
            scores = [d.score(config.target_class) for d in dets]
            w[int(np.argmax(scores))] = 1.0 / n
        weights.append(w)
    return weights


def _kept_flags(dets, gt_boxes, threshold):
    flags = []
    for d in dets:
        best = max((iou(d.box, g) for g in gt_boxes), default=0.0)
        flags.append(best > threshold)
    return flags


def iou_detection_loss(batch: list, gt_boxes: list, config: LossConfig) -> float:
    """Mean over images of the average target-class score among detections
    that overlap some ground-truth box above the IoU threshold.

    Detections below the threshold with every ground-truth box are
    excluded entirely; an image with no kept detections contributes 0.
    """
    if len(batch) != len(gt_boxes):
        raise ConfigurationError("batch and ground truth lengths differ")
    if not batch:
        raise ConfigurationError("empty batch")
    total = 0.0
    for dets, gts in zip(batch, gt_boxes):
        kept = [d for d, keep in zip(dets, _kept_flags(dets, gts, config.iou_threshold)) if keep]
        if kept:
            total += sum(d.score(config.target_class) for d in kept) / len(kept)
    return total / len(batch)


def iou_detection_loss_weights(batch: list, gt_boxes: list, config: LossConfig) -> list:
    if len(batch) != len(gt_boxes):
        raise ConfigurationError("batch and ground truth lengths differ")
    n = len(batch)
    weights = []
    for dets, gts in zip(batch, gt_boxes):
        flags = _kept_flags(dets, gts, config.iou_threshold)
        m = sum(flags)
        weights.append([1.0 / (n * m) if keep else 0.0 for keep in flags])
    return weights


def detection_loss(batch: list, gt_boxes: list, config: LossConfig) -> float:
    if config.kind == "iou_detection":
        return iou_detection_loss(batch, gt_boxes, config)
    return common_detection_loss(batch, config)


def detection_loss_weights(batch: list, gt_boxes: list, config: LossConfig) -> list:
    if config.kind == "iou_detection":
        return iou_detection_loss_weights(batch, gt_boxes, config)
    return common_detection_loss_weights(batch, config)


def approx_gradient_scale(s: NoiseSchedule, depth: int) -> float:
    """Product of sqrt(alpha-bar ratios) across the sampling steps.

    Telescopes to sqrt(1 / alpha_ladder[depth]); computed as the product
    so the code mirrors the step-by-step chain it stands in for.
    """
    if not 0 <= depth <= s.ddim_steps:
        raise ConfigurationError(f"depth {depth} outside [0, {s.ddim_steps}]")
    scale = 1.0
    for t in range(1, depth + 1):
        scale *= math.sqrt(s.alpha_ladder[t - 1] / s.alpha_ladder[t])
    return scale


def project_delta(delta: np.ndarray, epsilon: float, latent_mask: np.ndarray = None) -> np.ndarray:
    """Clip to the L-infinity ball of radius epsilon, then zero every
    latent cell outside the mask."""
    if epsilon <= 0.0:
        raise ConfigurationError("epsilon must be > 0")
    out = np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)
    if latent_mask is not None:
        mask = np.asarray(latent_mask, dtype=np.float64)
        if mask.shape != out.shape[-2:]:
            raise ConfigurationError("latent mask shape does not match delta")
        out = out * mask
    return out


@dataclass
class OptimizationState:
    """Mutable state of one optimization run."""

    delta: np.ndarray
    epsilon: float
    latent_mask: np.ndarray
    loss_history: list = field(default_factory=list)
    iteration: int = 0

    def check(self) -> None:
        if np.max(np.abs(self.delta)) > self.epsilon + 1e-12:
            raise PipelineError("delta escaped the L-infinity ball")
        off = self.delta * (1.0 - self.latent_mask)
        if np.any(off != 0.0):
            raise PipelineError("delta non-zero outside the latent mask")


@dataclass
class IdoConfig:
    """Latent patch optimization settings."""

    learning_rate: float = 0.003
    epsilon: float = 0.5
    iterations: int = 200
    batch_size: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    mask_control: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def decode_patch(traj: InversionTrajectory, delta: np.ndarray, spec: PatchSpec,
                 diffusion) -> tuple:
    """Masked decoded patch plus the raw decoded image for the perturbed
    trajectory start."""
    start = LatentState(traj.start.z + delta, traj.depth)
    z0 = guided_sample(start, traj.cond, traj.null_embeddings, traj.guidance,
                       traj.schedule, diffusion, traj.formula)
    raw = diffusion.decode_latent(z0.z)
    return raw * spec.mask[:, :, None], raw


def _batches(n: int, batch_size: int):
    return [list(range(lo, min(lo + batch_size, n))) for lo in range(0, n, batch_size)]


def ido_run(traj: InversionTrajectory, spec: PatchSpec, data: TrainingSet,
            detector, diffusion, config: IdoConfig, on_iteration=None,
            checkpoint_dir=None, resume=None, config_hash: str = "") -> tuple:
    """Optimize the latent perturbation; returns (patch_image, mask, state).

    `on_iteration(state, raw_decoded)` fires after every update.  When a
    checkpoint directory is given, full state (including optimizer
    moments and the augmentation RNG) is written every
    config.checkpoint_every updates, and `resume` restarts from such a
    file bit-exactly.
    """
    if len(data) == 0:
        raise ConfigurationError("training set is empty")
    mask_area = float(np.sum(spec.mask))
    latent_shape = diffusion.latent_shape
    factor = diffusion.mask_factor
    if config.mask_control:
        latent_mask = downsample_mask(spec.mask, factor)
        if latent_mask.sum() == 0:
            raise ConfigurationError("latent mask is empty after downsampling")
    else:
        latent_mask = np.ones(latent_shape[-2:], dtype=np.float64)

    if resume is not None:
        state, adam, rng = load_checkpoint(resume, expect_hash=config_hash or None)
        if state.latent_mask.shape != latent_mask.shape or np.any(state.latent_mask != latent_mask):
            raise ConfigurationError("checkpoint latent mask does not match this run")
    else:
        state = OptimizationState(
            delta=np.zeros(latent_shape, dtype=np.float64),
            epsilon=config.epsilon,
            latent_mask=latent_mask,
        )
        adam = Adam()
        rng = np.random.default_rng(config.seed)

    scale = approx_gradient_scale(traj.schedule, traj.depth)
    batches = _batches(len(data), config.batch_size)
    total_updates = config.iterations * len(batches)
    mask3 = spec.mask[:, :, None]

    try:
        while state.iteration < total_updates:
            batch_idx = batches[state.iteration % len(batches)]
            patch, raw = decode_patch(traj, state.delta, spec, diffusion)

            patched = []
            placements = []
            per_image_boxes = []
            for i in batch_idx:
                img = data.images[i]
                img_placements = []
                out = img
                for box in data.person_boxes[i]:
                    pl = plan_placement(box, patch.shape[:2], mask_area, spec.tau,
                                        config.augment, rng, image_shape=img.shape[:2])
                    out = apply_placement(out, patch, spec.mask, pl)
                    img_placements.append(pl)
                patched.append(out)
                placements.append(img_placements)
                per_image_boxes.append(data.person_boxes[i])

            dets = detector.detect(np.stack(patched), min_confidence=0.0, nms=False)
            loss = detection_loss(dets, per_image_boxes, config.loss)
            weights = detection_loss_weights(dets, per_image_boxes, config.loss)

            grad_patch = np.zeros_like(patch)
            for img_out, img_dets, img_w, img_placements in zip(patched, dets, weights, placements):
                if not any(img_w):
                    continue
                grad_img = detector.detection_grad(img_out, img_dets, img_w,
                                                   config.loss.target_class)
                for pl in img_placements:
                    grad_patch += placement_grad(grad_img, patch, spec.mask, pl)

            grad_latent = diffusion.decode_grad(grad_patch * mask3)
            grad = scale * grad_latent

            if np.all(np.isfinite(grad)):
                step = config.learning_rate * adam.direction(grad)
                state.delta = project_delta(state.delta - step, config.epsilon,
                                            state.latent_mask)
            else:
                log.warning("non-finite gradient at update %d; skipping step", state.iteration)
            state.loss_history.append(float(loss))
            state.iteration += 1
            state.check()
            if on_iteration is not None:
                on_iteration(state, raw)
            if checkpoint_dir is not None and config.checkpoint_every > 0 \
                    and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(_ckpt_path(checkpoint_dir, state.iteration),
                                state, adam, rng, config_hash)
    except (ConfigurationError, PipelineError):
        raise
    except Exception as exc:
        if checkpoint_dir is not None:
            save_checkpoint(_ckpt_path(checkpoint_dir, state.iteration, aborted=True),
                            state, adam, rng, config_hash)
        raise PipelineError(f"optimization failed at update {state.iteration}: {exc}") from exc

    patch, _ = decode_patch(traj, state.delta, spec, diffusion)
    return patch, spec.mask.copy(), state


def _ckpt_path(directory, iteration, aborted=False):
    import os

    name = f"checkpoint_{iteration:06d}{'_aborted' if aborted else ''}.npz"
    return os.path.join(directory, name)


def save_checkpoint(path, state: OptimizationState, adam: Adam, rng, config_hash: str = "") -> None:
    opt = adam.state_dict()
    arrays = {
        "delta": state.delta,
        "latent_mask": state.latent_mask,
        "loss_history": np.asarray(state.loss_history, dtype=np.float64),
        "adam_m": opt["m"] if opt["m"] is not None else np.zeros(0),
        "adam_v": opt["v"] if opt["v"] is not None else np.zeros(0),
    }
    meta = {
        "kind": "ido-checkpoint",
        "iteration": state.iteration,
        "epsilon": state.epsilon,
        "adam": {k: opt[k] for k in ("beta1", "beta2", "eps", "t")},
        "adam_empty": opt["m"] is None,
        "rng_state": json.dumps(rng.bit_generator.state),
        "config_hash": config_hash,
    }
    save_archive(path, arrays, meta)


def load_checkpoint(path, expect_hash: str = None) -> tuple:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "ido-checkpoint":
        raise ConfigurationError(f"{path} is not an optimization checkpoint")
    if expect_hash and meta.get("config_hash") and meta["config_hash"] != expect_hash:
        raise ConfigurationError("checkpoint was produced under a different config")
    state = OptimizationState(
        delta=arrays["delta"],
        epsilon=float(meta["epsilon"]),
        latent_mask=arrays["latent_mask"],
        loss_history=[float(v) for v in arrays["loss_history"]],
        iteration=int(meta["iteration"]),
    )
    opt = dict(meta["adam"])
    opt["m"] = None if meta["adam_empty"] else arrays["adam_m"]
    opt["v"] = None if meta["adam_empty"] else arrays["adam_v"]
    adam = Adam.from_state_dict(opt)
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    return state, adam, rng


@dataclass
class RoundResult:
    """Artifacts of one optimization round."""

    trajectory: InversionTrajectory
    patch_image: np.ndarray
    patch_mask: np.ndarray
    state: OptimizationState


def iterative_optimize(spec: PatchSpec, data: TrainingSet, detector, diffusion,
                       s: NoiseSchedule, rounds: int, ido_config: IdoConfig,
                       depth: int = None, guidance: float = 7.5,
                       null_inner: int = 10, null_lr: float = 0.01,
                       formula: str = "standard", initial_traj: InversionTrajectory = None,
                       on_round=None, checkpoint_root=None, config_hash: str = "") -> list:
    """Run full invert-optimize rounds, feeding each round's patch back in
    as the next round's reference image.

    Optimizer moments reset between rounds; the perturbation restarts at
    zero against the fresh trajectory.  `on_round(index, result)` runs
    after each round so callers can persist partial artifacts before a
    later round can fail.
    """
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    if depth is None:
        depth = s.ddim_steps // 2
    results = []
    current = spec
    for r in range(rounds):
        if r == 0 and initial_traj is not None:
            traj = initial_traj
        else:
            flat = apply_background(current)
            z0 = LatentState(diffusion.encode_image(flat), 0)
            pivots = pivotal_invert(z0, diffusion.embed_text(current.prompt), s,
                                    diffusion, depth, formula)
            traj = optimize_null_text(pivots, diffusion.embed_text(current.prompt),
                                      s, diffusion, w=guidance, n_inner=null_inner,
                                      lr=null_lr, formula=formula)
        ckpt_dir = None
        if checkpoint_root is not None:
            ckpt_dir = os.path.join(checkpoint_root, f"round{r:02d}")
            os.makedirs(ckpt_dir, exist_ok=True)
        patch, mask, state = ido_run(traj, current, data, detector, diffusion,
                                     ido_config, checkpoint_dir=ckpt_dir,
                                     config_hash=config_hash)
        result = RoundResult(trajectory=traj, patch_image=patch, patch_mask=mask,
                             state=state)
        results.append(result)
        if on_round is not None:
            on_round(r, result)
        current = replace(current, reference_image=patch)
    return results


def iters_to_fraction(history, fraction: float = 0.9) -> int:
    """First update index at which the loss has realized `fraction` of its
    total start-to-end reduction."""
    if not history:
        raise ConfigurationError("empty loss history")
    start = history[0]
    end = history[-1]
    target = start - fraction * (start - end)
    for i, v in enumerate(history):
        if v <= target:
            return i
    return len(history) - 1
