"""Noise schedules and deterministic DDIM stepping with guidance mixing.

Conventions used throughout the package:

  - Training timesteps run 0..t_train-1 with cumulative signal level
    alpha_bar[t] = prod_{i<=t} (1 - beta_i).
  - A run subsamples the training schedule into T sampling rungs.  Rung 0
    is clean data and carries an alpha-bar of exactly 1.0; rung s >= 1
    sits at training timestep timestep_index[s-1].
  - The step between rungs s and s+1 (either direction) evaluates the
    noise model at training timestep timestep_index[s].  Because the
    sampling step is the exact algebraic inverse of the inversion step,
    invert-then-sample with the same noise tensor is an identity.

Two inversion formula variants are supported.  `paper` uses

    z_{s+1} = sqrt(ab1/ab0) * z_s + (sqrt(1/ab1 - 1) - sqrt(1/ab0 - 1)) * eps

with ab0/ab1 the alpha-bars at the lower/upper rung; `standard` (the
default) additionally multiplies the eps coefficient by sqrt(ab1), which
recovers the usual DDIM update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PipelineError

FORMULA_VARIANTS = ("standard", "paper")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta schedule plus the DDIM subsampling of it."""

    betas: np.ndarray
    alpha_bar: np.ndarray
    ddim_steps: int
    timestep_index: np.ndarray
    alpha_ladder: np.ndarray = field(default=None)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigurationError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigurationError("betas must lie strictly in (0, 1)")
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if alpha_bar.shape != betas.shape:
            raise ConfigurationError("alpha_bar must match betas in shape")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        if np.any(alpha_bar <= 0.0) or np.any(alpha_bar >= 1.0):
            raise ConfigurationError("alpha_bar must lie strictly in (0, 1)")
        idx = np.asarray(self.timestep_index, dtype=np.int64)
        if idx.shape != (self.ddim_steps,):
            raise ConfigurationError("timestep_index length must equal ddim_steps")
        if self.ddim_steps < 1:
            raise ConfigurationError("ddim_steps must be >= 1")
        if idx[0] != 0:
            raise ConfigurationError("timestep_index must start at training step 0")
        if np.any(np.diff(idx) <= 0) or idx[-1] >= betas.size:
            raise ConfigurationError("timestep_index must be strictly increasing within the schedule")
        # Rung 0 is clean data: alpha-bar exactly 1 by convention.
        ladder = np.concatenate(([1.0], alpha_bar[idx]))
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "timestep_index", idx)
        object.__setattr__(self, "alpha_ladder", ladder)

    @classmethod
    def from_betas(cls, betas, ddim_steps: int) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
        if ddim_steps < 1 or ddim_steps > betas.size:
            raise ConfigurationError("ddim_steps must be in [1, len(betas)]")
        stride = betas.size // ddim_steps
        idx = np.arange(ddim_steps, dtype=np.int64) * stride
        return cls(betas=betas, alpha_bar=alpha_bar, ddim_steps=ddim_steps, timestep_index=idx)

    @property
    def num_train_steps(self) -> int:
        return int(self.betas.size)

    def model_timestep(self, step: int) -> int:
        """Training timestep at which the model is queried for the rung
        transition step <-> step+1."""
        if not 0 <= step < self.ddim_steps:
            raise ConfigurationError(f"step {step} outside [0, {self.ddim_steps})")
        return int(self.timestep_index[step])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rung", "train_timestep", "beta", "alpha_bar"])
            writer.writerow([0, "", "", repr(1.0)])
            for s in range(self.ddim_steps):
                t = int(self.timestep_index[s])
                writer.writerow([s + 1, t, repr(float(self.betas[t])), repr(float(self.alpha_ladder[s + 1]))])


def build_schedule(t_train: int, beta_min: float, beta_max: float, ddim_steps: int) -> NoiseSchedule:
    """Scaled-linear beta schedule: linspace in sqrt-beta space, squared."""
    if t_train < 1:
        raise ConfigurationError("t_train must be >= 1")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ConfigurationError("need 0 < beta_min < beta_max < 1")
    betas = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), t_train, dtype=np.float64) ** 2
    return NoiseSchedule.from_betas(betas, ddim_steps)


@dataclass
class LatentState:
    """A latent tensor tagged with the sampling rung it lives at."""

    z: np.ndarray
    step: int

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.step < 0:
            raise ConfigurationError("latent step must be >= 0")


@dataclass
class ConditionEmbedding:
    """Token embedding matrix (tokens x dim) driving the noise model."""

    e: np.ndarray

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        if self.e.ndim != 2:
            raise ConfigurationError("embedding must be 2-d (tokens, dim)")
        if not np.all(np.isfinite(self.e)):
            raise ConfigurationError("embedding contains non-finite values")


@dataclass
class GuidanceConfig:
    """Cond/uncond embedding pair and the guidance weight mixing them."""

    w: float
    cond: ConditionEmbedding
    uncond: ConditionEmbedding

    def __post_init__(self):
        if self.w < 0.0:
            raise ConfigurationError("guidance weight must be >= 0")


def cfg_noise(z: LatentState, t: int, g: GuidanceConfig, backend) -> np.ndarray:
    """Guided noise estimate: w * eps(z,t,cond) + (1-w) * eps(z,t,uncond).

    The two coefficients sum to 1; w = 1 reduces to the conditional
    prediction and skips the unconditional pass entirely.
    """
    try:
        eps_c = backend.predict_noise(z.z, t, g.cond.e)
        if g.w == 1.0:
            return np.asarray(eps_c, dtype=np.float64)
        eps_u = backend.predict_noise(z.z, t, g.uncond.e)
    except (ConfigurationError, PipelineError):
        raise
    except Exception as exc:
        raise PipelineError(f"noise prediction failed at t={t}: {exc}") from exc
    return g.w * np.asarray(eps_c, dtype=np.float64) + (1.0 - g.w) * np.asarray(eps_u, dtype=np.float64)


def _step_coeffs(s: NoiseSchedule, lower: int, formula: str):
    """(ratio, noise_coeff) for the transition between rungs lower, lower+1."""
    if formula not in FORMULA_VARIANTS:
        raise ConfigurationError(f"unknown formula variant {formula!r}")
    if not 0 <= lower < s.ddim_steps:
        raise ConfigurationError(f"transition {lower}->{lower + 1} outside the schedule")
    ab0 = s.alpha_ladder[lower]
    ab1 = s.alpha_ladder[lower + 1]
    ratio = math.sqrt(ab1 / ab0)
    coeff = math.sqrt(1.0 / ab1 - 1.0) - math.sqrt(1.0 / ab0 - 1.0)
    if formula == "standard":
        coeff *= math.sqrt(ab1)
    return ratio, coeff


def ddim_invert_step(state: LatentState, eps: np.ndarray, s: NoiseSchedule,
                     formula: str = "standard") -> LatentState:
    """One deterministic inversion step, rung `state.step` up to step+1."""
    ratio, coeff = _step_coeffs(s, state.step, formula)
    z_next = ratio * state.z + coeff * np.asarray(eps, dtype=np.float64)
    return LatentState(z=z_next, step=state.step + 1)


def ddim_sample_step(state: LatentState, eps: np.ndarray, s: NoiseSchedule,
                     formula: str = "standard") -> LatentState:
    """One sampling step, rung `state.step` down to step-1.

    Defined as the exact algebraic inverse of ddim_invert_step, so a
    round trip with the same eps tensor reproduces the input bit-for-bit
    up to float rounding.  For the `standard` variant this is the usual
    DDIM sampler written in a different arrangement.
    """
    if state.step < 1:
        raise ConfigurationError("cannot sample below rung 0")
    ratio, coeff = _step_coeffs(s, state.step - 1, formula)
    z_prev = (state.z - coeff * np.asarray(eps, dtype=np.float64)) / ratio
    return LatentState(z=z_prev, step=state.step - 1)
