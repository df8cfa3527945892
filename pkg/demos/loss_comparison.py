"""Compare the two detection losses on identical optimization runs.

The IoU-gated loss only averages detections that still overlap a target
person, so once the box scores there collapse the loss stops chasing
background detections; the max-score loss keeps pulling on whichever
detection is currently strongest.  On the toy stack the gated loss
reaches 90% of its total reduction in fewer updates.
"""

import os

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from latentpatch import (AugmentConfig, IdoConfig, LossConfig, ToyDetector,
                         ToyLinearDiffusion, build_schedule,
                         make_toy_patch_spec, make_toy_scenes)
from latentpatch.ido import iterative_optimize, iters_to_fraction

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    diffusion = ToyLinearDiffusion(seed=0)
    detector = ToyDetector(seed=0)
    s = build_schedule(1000, 0.00085, 0.012, 10)
    spec = make_toy_patch_spec(seed=0)
    data = make_toy_scenes(16, seed=0)

    histories = {}
    for kind in ("iou_detection", "common_detection"):
        cfg = IdoConfig(iterations=200, learning_rate=0.01, epsilon=1.0,
                        loss=LossConfig(kind=kind), seed=0,
                        augment=AugmentConfig.identity())
        res = iterative_optimize(spec, data, detector, diffusion, s,
                                 rounds=1, ido_config=cfg)[0]
        histories[kind] = res.state.loss_history
        point = iters_to_fraction(histories[kind], 0.9)
        print(f"{kind}: {histories[kind][0]:.4f} -> {histories[kind][-1]:.4f}, "
              f"90% of the reduction after {point} updates")

    fig = Figure(figsize=(6, 4))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    for kind, h in histories.items():
        ax.plot(range(len(h)), [v / h[0] for v in h], label=kind)
    ax.set_xlabel("update")
    ax.set_ylabel("loss / initial loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    os.makedirs(OUT, exist_ok=True)
    path = os.path.join(OUT, "loss_comparison.png")
    fig.savefig(path, dpi=110)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
