"""Pivotal DDIM inversion and per-step null-embedding optimization.

The inversion stage runs in two passes.  First the reference latent is
pushed up the schedule at guidance weight 1, recording the pivot latents
z*_depth .. z*_0.  Then, walking back down at the working guidance
weight, the unconditional embedding for each step is tuned with Adam so
the guided sampling step lands on the recorded pivot; the achieved
latent (not the pivot) seeds the next step, and each step's embedding
initializes the next one.  The result is a trajectory object that can
regenerate the reference and serves as the launch point for latent
patch optimization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .archive import load_archive, save_archive
from .errors import ConfigurationError, PipelineError
from .optim import Adam
from .schedule import (ConditionEmbedding, GuidanceConfig, LatentState,
                       NoiseSchedule, cfg_noise, ddim_invert_step,
                       ddim_sample_step)

log = logging.getLogger(__name__)

NULL_EARLY_EXIT = 1e-5


@dataclass
class InversionTrajectory:
    """Pivot latents, tuned null embeddings, and regeneration settings.

    pivot_latents[0] is the deepest latent (rung `depth`) and
    pivot_latents[-1] the clean reference latent.  null_embeddings[i]
    belongs to the sampling step from rung depth-i down to depth-i-1.
    reconstruction_error is relative L2 against the clean pivot.
    """

    pivot_latents: list
    null_embeddings: list
    cond: ConditionEmbedding
    depth: int
    reconstruction_error: float
    schedule: NoiseSchedule
    guidance: float
    formula: str = "standard"
    inner_objectives: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.pivot_latents) != self.depth + 1:
            raise ConfigurationError("expected depth+1 pivot latents")
        if len(self.null_embeddings) != self.depth:
            raise ConfigurationError("expected one null embedding per sampling step")
        for i, state in enumerate(self.pivot_latents):
            if state.step != self.depth - i:
                raise ConfigurationError("pivot latents out of order")

    @property
    def start(self) -> LatentState:
        return self.pivot_latents[0]

    @property
    def z0(self) -> LatentState:
        return self.pivot_latents[-1]

    def null_for_step(self, upper_step: int) -> ConditionEmbedding:
        """Null embedding for the transition upper_step -> upper_step - 1."""
        return self.null_embeddings[self.depth - upper_step]


def pivotal_invert(z0: LatentState, cond: ConditionEmbedding, s: NoiseSchedule,
                   backend, depth: int, formula: str = "standard") -> list:
    """Invert `depth` steps at guidance 1, returning latents deepest-first."""
    if z0.step != 0:
        raise ConfigurationError("pivotal inversion starts from a rung-0 latent")
    if not 0 <= depth <= s.ddim_steps:
        raise ConfigurationError(f"depth {depth} outside [0, {s.ddim_steps}]")
    states = [z0]
    state = z0
    for step in range(depth):
        try:
            eps = backend.predict_noise(state.z, s.model_timestep(step), cond.e)
        except (ConfigurationError, PipelineError):
            raise
        except Exception as exc:
            raise PipelineError(f"noise prediction failed at inversion step {step}: {exc}") from exc
        state = ddim_invert_step(state, eps, s, formula)
        if not np.all(np.isfinite(state.z)):
            raise PipelineError(f"non-finite latent after inversion step {step}")
        states.append(state)
    states.reverse()
    return states


def _null_objective_and_state(z_bar: LatentState, pivot_prev: LatentState,
                              cond, phi, w, s, backend, formula):
    g = GuidanceConfig(w=w, cond=cond, uncond=phi)
    eps = cfg_noise(z_bar, s.model_timestep(z_bar.step - 1), g, backend)
    achieved = ddim_sample_step(z_bar, eps, s, formula)
    diff = achieved.z - pivot_prev.z
    return float(np.sum(diff * diff)), achieved, diff


def optimize_null_text(pivots: list, cond: ConditionEmbedding, s: NoiseSchedule,
                       backend, w: float = 7.5, n_inner: int = 10,
                       lr: float = 0.01, formula: str = "standard",
                       early_exit: float = NULL_EARLY_EXIT) -> InversionTrajectory:
    """Tune one null embedding per sampling step against the pivot latents.

    Each step keeps the best embedding seen (an inner iteration counts as
    accepted only when it improves the objective); if no inner iteration
    improves, the step keeps its initialization and logs a warning.
    """
    if n_inner < 0 or lr <= 0 or w < 0:
        raise ConfigurationError("bad null-text optimizer settings")
    depth = len(pivots) - 1
    phi = backend.embed_text("")
    z_bar = pivots[0]
    nulls = []
    histories = []
    for i in range(depth):
        pivot_prev = pivots[i + 1]
        obj, achieved, diff = _null_objective_and_state(
            z_bar, pivot_prev, cond, phi, w, s, backend, formula)
        history = [obj]
        best_obj, best_phi, best_state = obj, phi, achieved
        if obj >= early_exit and w != 1.0:
            opt = Adam()
            cur_phi = phi
            cur_diff = diff
            ratio_coeff = _sample_coeff(s, z_bar.step, formula)
            improved = False
            for _ in range(n_inner):
                # d obj / d eps_uncond = 2 * diff * (d achieved / d eps) * (1 - w)
                upstream = 2.0 * cur_diff * ratio_coeff * (1.0 - w)
                grad_e = backend.noise_embedding_grad(
                    z_bar.z, s.model_timestep(z_bar.step - 1), cur_phi.e, upstream)
                cur_phi = ConditionEmbedding(cur_phi.e - lr * opt.direction(grad_e))
                obj, achieved, cur_diff = _null_objective_and_state(
                    z_bar, pivot_prev, cond, cur_phi, w, s, backend, formula)
                if obj < best_obj:
                    best_obj, best_phi, best_state = obj, cur_phi, achieved
                    improved = True
                # the trace follows the kept iterate, not the raw proposal
                history.append(best_obj)
                if best_obj < early_exit:
                    break
            if not improved:
                log.warning("null-text objective did not improve at step %d; keeping start", z_bar.step)
        nulls.append(best_phi)
        histories.append(history)
        z_bar = best_state
        phi = best_phi
        if not np.all(np.isfinite(z_bar.z)):
            raise PipelineError(f"non-finite latent during null-text pass at rung {z_bar.step}")
    err = _relative_error(z_bar.z, pivots[-1].z)
    return InversionTrajectory(
        pivot_latents=pivots, null_embeddings=nulls, cond=cond, depth=depth,
        reconstruction_error=err, schedule=s, guidance=w, formula=formula,
        inner_objectives=histories)


def _sample_coeff(s: NoiseSchedule, upper_step: int, formula: str) -> float:
    """d (sample step output) / d eps for the transition upper_step -> upper_step-1."""
    from .schedule import _step_coeffs

    ratio, coeff = _step_coeffs(s, upper_step - 1, formula)
    return -coeff / ratio


def guided_sample(state: LatentState, cond: ConditionEmbedding, nulls, w: float,
                  s: NoiseSchedule, backend, formula: str = "standard") -> LatentState:
    """Sample from `state` down to rung 0 with per-step null embeddings.

    `nulls` is ordered deepest step first (trajectory convention); pass
    None to sample purely conditionally (w is forced to 1 then).
    """
    depth = state.step
    for step in range(depth, 0, -1):
        if nulls is None:
            g = GuidanceConfig(w=1.0, cond=cond, uncond=cond)
        else:
            g = GuidanceConfig(w=w, cond=cond, uncond=nulls[depth - step])
        eps = cfg_noise(state, s.model_timestep(step - 1), g, backend)
        state = ddim_sample_step(state, eps, s, formula)
    if not np.all(np.isfinite(state.z)):
        raise PipelineError("non-finite latent during guided sampling")
    return state


def _relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = np.linalg.norm(exact)
    return float(np.linalg.norm(approx - exact) / (scale if scale > 0 else 1.0))


def reconstruct(traj: InversionTrajectory, backend) -> tuple:
    """Regenerate the clean latent from the trajectory start; returns
    (latent state, relative L2 error against the recorded clean pivot)."""
    z0 = guided_sample(traj.start, traj.cond, traj.null_embeddings,
                       traj.guidance, traj.schedule, backend, traj.formula)
    return z0, _relative_error(z0.z, traj.z0.z)


def save_trajectory(path, traj: InversionTrajectory, extra_arrays: dict = None,
                    meta: dict = None) -> None:
    arrays = {
        "betas": traj.schedule.betas,
        "timestep_index": traj.schedule.timestep_index,
        "cond": traj.cond.e,
        "pivots": np.stack([st.z for st in traj.pivot_latents]),
        "nulls": (np.stack([n.e for n in traj.null_embeddings])
                  if traj.null_embeddings else np.zeros((0,) + traj.cond.e.shape)),
    }
    if extra_arrays:
        arrays.update(extra_arrays)
    info = {
        "kind": "inversion-trajectory",
        "depth": traj.depth,
        "ddim_steps": traj.schedule.ddim_steps,
        "guidance": traj.guidance,
        "formula": traj.formula,
        "reconstruction_error": traj.reconstruction_error,
    }
    if meta:
        info.update(meta)
    save_archive(path, arrays, info)


def load_trajectory(path) -> tuple:
    """Load (trajectory, extra_arrays, meta) saved by save_trajectory."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "inversion-trajectory":
        raise ConfigurationError(f"{path} is not a trajectory archive")
    betas = arrays.pop("betas")
    s = NoiseSchedule(
        betas=betas,
        alpha_bar=np.cumprod(1.0 - betas),
        ddim_steps=int(meta["ddim_steps"]),
        timestep_index=arrays.pop("timestep_index"),
    )
    cond = ConditionEmbedding(arrays.pop("cond"))
    pivots_arr = arrays.pop("pivots")
    depth = int(meta["depth"])
    pivots = [LatentState(pivots_arr[i], depth - i) for i in range(pivots_arr.shape[0])]
    nulls_arr = arrays.pop("nulls")
    nulls = [ConditionEmbedding(nulls_arr[i]) for i in range(nulls_arr.shape[0])]
    traj = InversionTrajectory(
        pivot_latents=pivots, null_embeddings=nulls, cond=cond, depth=depth,
        reconstruction_error=float(meta["reconstruction_error"]),
        schedule=s, guidance=float(meta["guidance"]), formula=meta["formula"])
    return traj, arrays, meta
