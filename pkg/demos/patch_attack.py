"""End-to-end toy attack: optimize a mask-shaped patch that hides people.

Inverts the reference patch, then runs 200 projected-perturbation
updates on the mid-trajectory latent against the toy detector, and
finally compares detections on a scene before and after the patch.
"""

import os

import numpy as np

from latentpatch import (AugmentConfig, IdoConfig, LatentState, LossConfig,
                         ToyDetector, ToyLinearDiffusion, build_schedule,
                         make_toy_patch_spec, make_toy_scenes, pivotal_invert,
                         save_patch_rgba)
from latentpatch.inversion import optimize_null_text
from latentpatch.ido import ido_run
from latentpatch.render import apply_background, apply_patch, save_image

OUT = os.path.join(os.path.dirname(__file__), "out")


def count_people(detector, image):
    return len(detector.detect(image[None])[0])


def main():
    diffusion = ToyLinearDiffusion(seed=0)
    detector = ToyDetector(seed=0)
    s = build_schedule(1000, 0.00085, 0.012, 10)
    spec = make_toy_patch_spec(seed=0)
    data = make_toy_scenes(16, seed=0)

    z0 = LatentState(diffusion.encode_image(apply_background(spec)), 0)
    cond = diffusion.embed_text(spec.prompt)
    pivots = pivotal_invert(z0, cond, s, diffusion, depth=5)
    traj = optimize_null_text(pivots, cond, s, diffusion)
    print(f"trajectory ready (reconstruction error {traj.reconstruction_error:.1e})")

    cfg = IdoConfig(iterations=200, learning_rate=0.01, epsilon=0.5,
                    loss=LossConfig(kind="iou_detection"), seed=0,
                    augment=AugmentConfig.identity())
    patch, mask, state = ido_run(traj, spec, data, detector, diffusion, cfg)
    h = state.loss_history
    print(f"detection loss over {len(h)} updates: {h[0]:.4f} -> {h[-1]:.4f}")

    scene = np.array(data.images[0])
    patched = np.array(scene)
    for box in data.person_boxes[0]:
        patched = apply_patch(patched, box, patch, mask, spec.tau)
    print(f"scene 0 holds {len(data.person_boxes[0])} person(s)")
    print(f"detections without patch: {count_people(detector, scene)}")
    print(f"detections with patch:    {count_people(detector, patched)}")

    os.makedirs(OUT, exist_ok=True)
    save_patch_rgba(os.path.join(OUT, "patch.png"), patch, mask)
    save_image(os.path.join(OUT, "scene_patched.png"), patched)
    print(f"wrote {OUT}/patch.png and {OUT}/scene_patched.png")


if __name__ == "__main__":
    main()
