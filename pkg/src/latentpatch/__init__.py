"""Mask-shaped adversarial patches via latent-space optimization.

The pipeline inverts a reference patch image into a diffusion model's
latent trajectory (pivotal DDIM inversion plus null-text embedding
optimization), perturbs the mid-trajectory latent inside an L-infinity
ball to defeat a person detector, and evaluates the resulting patch
with attack-success-rate and average-precision metrics.
"""

from .archive import load_archive, save_archive
from .backends import (DetectorBackend, DiffusionBackend, SimilarityBackend,
                       ToyColorFeatureScorer, ToyDetector, ToyLinearDiffusion,
                       create_backend, ensemble_gradient, list_backends,
                       make_toy_dataset, make_toy_patch_spec, make_toy_scenes,
                       register_backend, resolve_backend)
from .errors import ConfigurationError, PipelineError
from .evalkit import (AnnotationRecord, EvalReport, PerImageEval, REPORT_SCHEMA,
                      compute_ap, compute_asr, cross_dataset_eval,
                      evaluate_dataset, load_report, load_training_set,
                      match_detections, naturalness_score, read_manifest,
                      report_table, save_report, write_manifest)
from .ido import (Detection, IdoConfig, LossConfig, OptimizationState,
                  RoundResult, approx_gradient_scale, common_detection_loss,
                  decode_patch, detection_loss, ido_run, iou,
                  iou_detection_loss, iterative_optimize, iters_to_fraction,
                  load_checkpoint, project_delta, save_checkpoint)
from .inversion import (InversionTrajectory, guided_sample, load_trajectory,
                        optimize_null_text, pivotal_invert, reconstruct,
                        save_trajectory)
from .optim import Adam
from .render import (AugmentConfig, PatchSpec, Placement, TrainingSet,
                     apply_background, apply_patch, apply_placement,
                     downsample_mask, load_image, load_mask, load_patch_rgba,
                     make_control_patch, plan_placement, save_image, save_mask,
                     save_patch_rgba, upsample_mask)
from .schedule import (ConditionEmbedding, FORMULA_VARIANTS, GuidanceConfig,
                       LatentState, NoiseSchedule, build_schedule, cfg_noise,
                       ddim_invert_step, ddim_sample_step)

__version__ = "0.1.0"
