"""Score a patch on a labelled dataset: baseline vs gray control vs attack.

Writes a small toy dataset to disk, optimizes a patch against it, and
then runs the evaluation harness three ways so the ASR/AP numbers can
be compared side by side.
"""

import os
import tempfile

from latentpatch import (AugmentConfig, IdoConfig, LossConfig, ToyDetector,
                         ToyLinearDiffusion, build_schedule, make_control_patch,
                         make_toy_dataset, make_toy_patch_spec, read_manifest,
                         report_table)
from latentpatch.evalkit import (evaluate_dataset, load_training_set,
                                 pr_curve_points, save_pr_plot)
from latentpatch.ido import iterative_optimize

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    diffusion = ToyLinearDiffusion(seed=0)
    detector = ToyDetector(seed=0)
    s = build_schedule(1000, 0.00085, 0.012, 10)
    spec = make_toy_patch_spec(seed=0)

    with tempfile.TemporaryDirectory() as tmp:
        manifest = make_toy_dataset(tmp, 16, seed=0)
        records = read_manifest(manifest)
        data = load_training_set(manifest)

        cfg = IdoConfig(iterations=200, learning_rate=0.01, epsilon=0.5,
                        loss=LossConfig(kind="iou_detection"), seed=0,
                        augment=AugmentConfig.identity())
        res = iterative_optimize(spec, data, detector, diffusion, s,
                                 rounds=1, ido_config=cfg)[0]
        print(f"optimized patch; final loss {res.state.loss_history[-1]:.4f}\n")

        gray = make_control_patch("gray", spec.mask.shape, spec.mask)
        runs = [
            ("baseline", None, None),
            ("gray control", gray, spec.mask),
            ("optimized", res.patch_image, res.patch_mask),
        ]
        reports = []
        for name, patch, mask in runs:
            report, preds, gts = evaluate_dataset(
                records, tmp, patch, mask, detector, tau=spec.tau,
                dataset_id=name, patch_id=name, want_raw=True)
            reports.append(report)
            if name == "optimized":
                os.makedirs(OUT, exist_ok=True)
                recall, precision = pr_curve_points(preds, gts)
                save_pr_plot(os.path.join(OUT, "pr_optimized.png"),
                             recall, precision, title="optimized patch")

        print(report_table(reports))
        print(f"\nwrote {OUT}/pr_optimized.png")


if __name__ == "__main__":
    main()
