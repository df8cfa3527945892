"""Attack evaluation: greedy matching, ASR, average precision, reports.

A ground-truth person counts as detected when a prediction with
confidence above the threshold matches it one-to-one at IoU above the
threshold; predictions claim ground truths greedily in descending
confidence order.  Attack success rate is the fraction of patched
persons that go undetected.  Average precision integrates the
precision envelope over recall (all-point interpolation by default,
the 11-point variant behind a flag).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .ido import Detection, iou
from .render import (AugmentConfig, TrainingSet, apply_patch, load_image)

PERSON_CLASS = 0


@dataclass
class AnnotationRecord:
    """One dataset row: image path, class-tagged boxes, patched flags."""

    image_path: str
    boxes: list  # [(class_id, x, y, w, h), ...]
    patched_person_flags: list

    def __post_init__(self):
        if len(self.boxes) != len(self.patched_person_flags):
            raise ConfigurationError("one patched flag per box required")
        self.boxes = [(int(c), float(x), float(y), float(w), float(h))
                      for (c, x, y, w, h) in self.boxes]
        self.patched_person_flags = [bool(f) for f in self.patched_person_flags]

    def person_boxes(self) -> list:
        return [(x, y, w, h) for (c, x, y, w, h) in self.boxes if c == PERSON_CLASS]

    def patched_boxes(self) -> list:
        return [(x, y, w, h) for (c, x, y, w, h), flag
                in zip(self.boxes, self.patched_person_flags)
                if c == PERSON_CLASS and flag]


def write_manifest(path, records: list) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "image_path": rec.image_path,
                "boxes": [list(b) for b in rec.boxes],
                "patched_person_flags": rec.patched_person_flags,
            }) + "\n")


def read_manifest(path) -> list:
    records = []
    try:
        with open(path) as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    records.append(AnnotationRecord(
                        image_path=row["image_path"],
                        boxes=row["boxes"],
                        patched_person_flags=row["patched_person_flags"]))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ConfigurationError(
                        f"bad manifest row {path}:{line_no}: {exc}") from exc
    except OSError as exc:
        raise ConfigurationError(f"unreadable manifest {path}: {exc}") from exc
    if not records:
        raise ConfigurationError(f"manifest {path} is empty")
    return records


def load_training_set(manifest_path) -> TrainingSet:
    """Scenes plus person boxes from a JSONL manifest (paths resolve
    relative to the manifest)."""
    records = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = []
    boxes = []
    for rec in records:
        images.append(load_image(os.path.join(base, rec.image_path)))
        boxes.append(rec.person_boxes())
    return TrainingSet(images=np.stack(images), person_boxes=boxes)


def match_detections(preds: list, gt_boxes: list, conf_threshold: float,
                     iou_threshold: float, target_class: int = PERSON_CLASS) -> list:
    """Greedy one-to-one matching; returns (pred_idx, gt_idx) pairs.

    Predictions are visited in descending confidence (ties by index);
    each claims its best-IoU unmatched ground truth above the IoU
    threshold.  Predictions at or below the confidence threshold never
    match.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score(target_class), i))
    taken = set()
    pairs = []
    for i in order:
        if preds[i].score(target_class) <= conf_threshold:
            continue
        best_j = None
        best_iou = iou_threshold
        for j, g in enumerate(gt_boxes):
            if j in taken:
                continue
            v = iou(preds[i].box, g)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j is not None:
            taken.add(best_j)
            pairs.append((i, best_j))
    return pairs


@dataclass
class PerImageEval:
    """Patched-person bookkeeping for one image."""

    gt_count: int
    matched_count: int
    evaded_count: int


def compute_asr(per_image: list) -> float:
    """Fraction of patched persons that evaded detection."""
    total = sum(r.gt_count for r in per_image)
    if total == 0:
        raise ConfigurationError("no patched persons; attack success rate undefined")
    return sum(r.evaded_count for r in per_image) / total


def compute_ap(preds: list, gt_boxes: list, iou_threshold: float = 0.5,
               interpolation: str = "all_point", target_class: int = PERSON_CLASS) -> float:
    """Average precision over pooled per-image predictions.

    preds and gt_boxes are parallel per-image lists.  TP/FP flags come
    from greedy matching within each image; the PR curve is integrated
    with the precision envelope (all-point) or sampled at the 11 evenly
    spaced recall levels.
    """
    if interpolation not in ("all_point", "11point"):
        raise ConfigurationError(f"unknown interpolation {interpolation!r}")
    if len(preds) != len(gt_boxes):
        raise ConfigurationError("preds and gt_boxes lengths differ")
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        raise ConfigurationError("no ground-truth boxes; AP undefined")
    scored = []
    for img_preds, img_gt in zip(preds, gt_boxes):
        pairs = match_detections(img_preds, img_gt, conf_threshold=-1.0,
                                 iou_threshold=iou_threshold, target_class=target_class)
        matched = {i for i, _ in pairs}
        for i, det in enumerate(img_preds):
            scored.append((det.score(target_class), i in matched))
    if not scored:
        return 0.0
    scored.sort(key=lambda t: -t[0])
    tp = np.cumsum([1.0 if hit else 0.0 for _, hit in scored])
    fp = np.cumsum([0.0 if hit else 1.0 for _, hit in scored])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    if tp[-1] == 0:
        return 0.0
    if interpolation == "11point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r
            total += precision[mask].max() if mask.any() else 0.0
        return float(total / 11.0)
    # precision envelope, integrated over recall
    recall = np.concatenate(([0.0], recall, [recall[-1]]))
    precision = np.concatenate(([0.0], precision, [0.0]))
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.where(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[idx + 1] - recall[idx]) * precision[idx + 1]))


def naturalness_score(patch_image: np.ndarray, description: str, scorer) -> float:
    """Cosine similarity between the patch and its description under a
    pluggable scorer backend."""
    if scorer is None:
        raise ConfigurationError("no similarity scorer configured")
    return scorer.similarity(scorer.embed_image(patch_image),
                             scorer.embed_text(description))


@dataclass
class EvalReport:
    """Per-dataset attack metrics plus per-image accounting."""

    dataset_id: str
    patch_id: str
    asr: float
    ap: float
    conf_threshold: float
    iou_threshold: float
    per_image: list = field(default_factory=list)
    config_hash: str = ""

    def validate(self) -> None:
        if not (0.0 <= self.asr <= 1.0) or not (0.0 <= self.ap <= 1.0):
            raise ConfigurationError("metrics must lie in [0, 1]")
        for r in self.per_image:
            if r.matched_count + r.evaded_count != r.gt_count:
                raise ConfigurationError("per-image accounting is inconsistent")
        if self.per_image:
            if abs(compute_asr(self.per_image) - self.asr) > 1e-12:
                raise ConfigurationError("asr does not match per-image records")

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "patch_id": self.patch_id,
            "asr": self.asr,
            "ap": self.ap,
            "conf_threshold": self.conf_threshold,
            "iou_threshold": self.iou_threshold,
            "per_image": [{"gt_count": r.gt_count, "matched_count": r.matched_count,
                           "evaded_count": r.evaded_count} for r in self.per_image],
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        report = cls(
            dataset_id=data["dataset_id"], patch_id=data["patch_id"],
            asr=float(data["asr"]), ap=float(data["ap"]),
            conf_threshold=float(data["conf_threshold"]),
            iou_threshold=float(data["iou_threshold"]),
            per_image=[PerImageEval(int(r["gt_count"]), int(r["matched_count"]),
                                    int(r["evaded_count"])) for r in data["per_image"]],
            config_hash=data.get("config_hash", ""),
        )
        report.validate()
        return report


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["dataset_id", "patch_id", "asr", "ap",
                 "conf_threshold", "iou_threshold", "per_image"],
    "properties": {
        "dataset_id": {"type": "string"},
        "patch_id": {"type": "string"},
        "asr": {"type": "number", "minimum": 0, "maximum": 1},
        "ap": {"type": "number", "minimum": 0, "maximum": 1},
        "conf_threshold": {"type": "number"},
        "iou_threshold": {"type": "number"},
        "config_hash": {"type": "string"},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["gt_count", "matched_count", "evaded_count"],
                "properties": {
                    "gt_count": {"type": "integer", "minimum": 0},
                    "matched_count": {"type": "integer", "minimum": 0},
                    "evaded_count": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


def save_report(path, report: EvalReport) -> None:
    report.validate()
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path) -> EvalReport:
    try:
        with open(path) as fh:
            return EvalReport.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"unreadable report {path}: {exc}") from exc


def evaluate_dataset(records: list, image_root, patch_image, patch_mask, detector,
                     tau: float, conf_threshold: float = 0.5, iou_threshold: float = 0.5,
                     dataset_id: str = "", patch_id: str = "",
                     config_hash: str = "", want_raw: bool = False):
    """Patch every flagged person (identity augmentation), detect, score.

    patch_image=None evaluates the unpatched baseline, whose ASR is the
    detector's intrinsic miss rate on the same persons.  Returns the
    report, or (report, preds, gts) when want_raw is set.
    """
    per_image = []
    all_preds = []
    all_gts = []
    identity = AugmentConfig.identity()
    for rec in records:
        image = load_image(os.path.join(image_root, rec.image_path))
        person_boxes = rec.person_boxes()
        flags = [f for (c, *_), f in zip(rec.boxes, rec.patched_person_flags)
                 if c == PERSON_CLASS]
        target_idx = [k for k, f in enumerate(flags) if f]
        if patch_image is not None:
            for k in target_idx:
                image = apply_patch(image, person_boxes[k], patch_image, patch_mask,
                                    tau, identity)
        dets = detector.detect(image[None])[0]
        pairs = match_detections(dets, person_boxes, conf_threshold, iou_threshold)
        matched_gt = {j for _, j in pairs}
        matched = sum(1 for k in target_idx if k in matched_gt)
        per_image.append(PerImageEval(gt_count=len(target_idx), matched_count=matched,
                                      evaded_count=len(target_idx) - matched))
        all_preds.append(dets)
        all_gts.append(person_boxes)
    report = EvalReport(
        dataset_id=dataset_id, patch_id=patch_id,
        asr=compute_asr(per_image),
        ap=compute_ap(all_preds, all_gts, iou_threshold),
        conf_threshold=conf_threshold, iou_threshold=iou_threshold,
        per_image=per_image, config_hash=config_hash)
    report.validate()
    if want_raw:
        return report, all_preds, all_gts
    return report


def cross_dataset_eval(patch_image, patch_mask, manifests: list, detector,
                       tau: float, conf_threshold: float = 0.5,
                       iou_threshold: float = 0.5, patch_id: str = "",
                       config_hash: str = "") -> tuple:
    """Evaluate one patch across several manifests.

    Returns (reports, errors); a dataset that fails to load or evaluate
    contributes an error message and the rest proceed.
    """
    reports = []
    errors = {}
    for manifest in manifests:
        dataset_id = str(manifest)
        try:
            records = read_manifest(manifest)
            root = os.path.dirname(os.path.abspath(manifest))
            reports.append(evaluate_dataset(
                records, root, patch_image, patch_mask, detector, tau,
                conf_threshold, iou_threshold, dataset_id=dataset_id,
                patch_id=patch_id, config_hash=config_hash))
        except ConfigurationError as exc:
            errors[dataset_id] = str(exc)
    return reports, errors


def report_table(reports: list, errors: dict = None) -> str:
    """Fixed-width summary table over datasets."""
    lines = [f"{'dataset':<40} {'ASR':>8} {'AP':>8} {'persons':>8}"]
    for rep in reports:
        persons = sum(r.gt_count for r in rep.per_image)
        name = rep.dataset_id if len(rep.dataset_id) <= 40 else "..." + rep.dataset_id[-37:]
        lines.append(f"{name:<40} {rep.asr:>8.3f} {rep.ap:>8.3f} {persons:>8d}")
    for dataset_id, msg in (errors or {}).items():
        name = dataset_id if len(dataset_id) <= 40 else "..." + dataset_id[-37:]
        lines.append(f"{name:<40} ERROR: {msg}")
    return "\n".join(lines)


def pr_curve_points(preds: list, gt_boxes: list, iou_threshold: float = 0.5,
                    target_class: int = PERSON_CLASS) -> tuple:
    """(recall, precision) arrays for plotting."""
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        raise ConfigurationError("no ground-truth boxes")
    scored = []
    for img_preds, img_gt in zip(preds, gt_boxes):
        pairs = match_detections(img_preds, img_gt, conf_threshold=-1.0,
                                 iou_threshold=iou_threshold, target_class=target_class)
        matched = {i for i, _ in pairs}
        for i, det in enumerate(img_preds):
            scored.append((det.score(target_class), i in matched))
    scored.sort(key=lambda t: -t[0])
    tp = np.cumsum([1.0 if hit else 0.0 for _, hit in scored]) if scored else np.zeros(1)
    fp = np.cumsum([0.0 if hit else 1.0 for _, hit in scored]) if scored else np.ones(1)
    return tp / n_gt, tp / np.maximum(tp + fp, 1e-12)


def save_pr_plot(path, recall, precision, title: str = "precision-recall") -> None:
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 4))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    ax.plot(recall, precision, marker=".")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
