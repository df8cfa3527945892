"""Command-line front end: invert, optimize, evaluate, report.

Configuration lives in one JSON document (see DEFAULT_CONFIG for the
schema and defaults); a config file overrides defaults and repeated
--set KEY=VALUE flags override both, with dotted keys naming nested
fields.  Every artifact embeds the hash of the resolved config so runs
can be audited and resumed safely.

Exit codes: 0 success, 2 configuration/validation error, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import importlib
import importlib.util
import json
import logging
import os
import sys
import time

from . import __version__
from .backends import create_backend
from .errors import ConfigurationError, PipelineError
from .evalkit import (evaluate_dataset, load_report, load_training_set,
                      naturalness_score, pr_curve_points, read_manifest,
                      report_table, save_pr_plot, save_report)
from .ido import IdoConfig, LossConfig, ido_run, iterative_optimize, RoundResult
from .inversion import (InversionTrajectory, load_trajectory, optimize_null_text,
                        pivotal_invert, reconstruct, save_trajectory)
from .render import (AugmentConfig, PatchSpec, apply_background, load_image,
                     load_mask, load_patch_rgba, make_control_patch, save_mask,
                     save_patch_rgba)
from .schedule import FORMULA_VARIANTS, LatentState, build_schedule

log = logging.getLogger(__name__)

PLUGIN_ENV = "LATENTPATCH_PLUGINS"

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs",
    "backends": {
        "diffusion": {"name": "toy-linear", "params": {}},
        "detector": {"name": "toy-detector", "params": {}},
        "scorer": {"name": "", "params": {}},
    },
    "schedule": {
        "train_steps": 1000,
        "beta_min": 0.00085,
        "beta_max": 0.012,
        "ddim_steps": 50,
    },
    "inversion": {
        "depth": None,  # null -> ddim_steps // 2
        "guidance": 7.5,
        "null_inner": 10,
        "null_lr": 0.01,
        "formula": "standard",
    },
    "ido": {
        "learning_rate": 0.003,
        "epsilon": 0.5,
        "iterations": 200,
        "batch_size": 32,
        "loss": "iou_detection",
        "iou_threshold": 0.5,
        "target_class": 0,
        "mask_control": True,
        "rounds": 2,
        "checkpoint_every": 50,
    },
    "render": {
        "tau": 0.2,
        "background": [0.5, 0.5, 0.5],
        "augment": {
            "rotation_deg": 20.0,
            "brightness": 0.1,
            "contrast": [0.8, 1.2],
            "jitter_frac": 0.05,
            "enabled": True,
        },
    },
    "eval": {
        "conf_threshold": 0.5,
        "iou_threshold": 0.5,
        "interpolation": "all_point",
        "datasets": [],
    },
}

# free-form subtrees: file keys under these paths are not checked
_OPEN_PATHS = ("backends.diffusion.params", "backends.detector.params",
               "backends.scorer.params")


def _merge(base: dict, new: dict, path: str = "") -> None:
    for key, value in new.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            if path in _OPEN_PATHS or any(path.startswith(p) for p in _OPEN_PATHS):
                base[key] = value
                continue
            raise ConfigurationError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, here)
        elif isinstance(base[key], dict) != isinstance(value, dict):
            raise ConfigurationError(f"config key {here!r} expects a "
                                     f"{'section' if isinstance(base[key], dict) else 'value'}")
        else:
            base[key] = value


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"--set expects KEY=VALUE, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw  # bare strings are fine
    node = cfg
    parts = dotted.split(".")
    for i, part in enumerate(parts[:-1]):
        prefix = ".".join(parts[:i + 1])
        if part not in node:
            if prefix in _OPEN_PATHS or any(prefix.startswith(p) for p in _OPEN_PATHS):
                node[part] = {}
            else:
                raise ConfigurationError(f"unknown config key {prefix!r}")
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigurationError(f"config key {prefix!r} is not a section")
    leaf = parts[-1]
    prefix = ".".join(parts[:-1])
    if leaf not in node and prefix not in _OPEN_PATHS \
            and not any(prefix.startswith(p) for p in _OPEN_PATHS):
        raise ConfigurationError(f"unknown config key {dotted!r}")
    node[leaf] = value


def resolve_config(config_path, sets) -> tuple:
    """Defaults <- file <- --set overrides; returns (config, hash)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        if not os.path.isfile(config_path):
            raise ConfigurationError(f"config file not found: {config_path}")
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except ValueError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigurationError("config root must be a JSON object")
        _merge(cfg, file_cfg)
    for assignment in sets or []:
        _apply_set(cfg, assignment)
    return cfg, config_hash(cfg)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise ConfigurationError(f"input file not found: {p}")


def _build_backend(cfg: dict, role: str, required: bool = True):
    entry = cfg["backends"][role]
    name = entry.get("name", "")
    if not name:
        if required:
            raise ConfigurationError(f"no {role} backend configured")
        return None
    return create_backend(name, entry.get("params", {}))


def _build_schedule(cfg: dict):
    sc = cfg["schedule"]
    return build_schedule(int(sc["train_steps"]), float(sc["beta_min"]),
                          float(sc["beta_max"]), int(sc["ddim_steps"]))


def _depth(cfg: dict, s) -> int:
    depth = cfg["inversion"]["depth"]
    depth = s.ddim_steps // 2 if depth is None else int(depth)
    if not 1 <= depth <= s.ddim_steps:
        raise ConfigurationError(f"inversion depth {depth} outside [1, {s.ddim_steps}]")
    return depth


def _build_augment(cfg: dict) -> AugmentConfig:
    a = cfg["render"]["augment"]
    return AugmentConfig(rotation_deg=float(a["rotation_deg"]),
                         brightness=float(a["brightness"]),
                         contrast=tuple(float(v) for v in a["contrast"]),
                         jitter_frac=float(a["jitter_frac"]),
                         enabled=bool(a["enabled"]))


def _build_ido(cfg: dict) -> IdoConfig:
    d = cfg["ido"]
    return IdoConfig(
        learning_rate=float(d["learning_rate"]), epsilon=float(d["epsilon"]),
        iterations=int(d["iterations"]), batch_size=int(d["batch_size"]),
        loss=LossConfig(kind=d["loss"], iou_threshold=float(d["iou_threshold"]),
                        target_class=int(d["target_class"])),
        mask_control=bool(d["mask_control"]), augment=_build_augment(cfg),
        seed=int(cfg["seed"]), checkpoint_every=int(d["checkpoint_every"]))


def _make_run_dir(cfg: dict, cfg_hash: str, override) -> str:
    if override:
        run_dir = override
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = os.path.join(cfg["output_dir"], f"{stamp}-{cfg_hash}")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def _write_config(run_dir: str, cfg: dict) -> None:
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _build_spec(cfg: dict, image_path, mask_path, prompt: str) -> PatchSpec:
    return PatchSpec(reference_image=load_image(image_path),
                     mask=load_mask(mask_path), prompt=prompt,
                     tau=float(cfg["render"]["tau"]),
                     background_color=tuple(float(v) for v in cfg["render"]["background"]))


def _invert_once(spec: PatchSpec, diffusion, s, cfg: dict):
    inv = cfg["inversion"]
    if inv["formula"] not in FORMULA_VARIANTS:
        raise ConfigurationError(f"unknown formula variant {inv['formula']!r}")
    depth = _depth(cfg, s)
    flat = apply_background(spec)
    z0 = LatentState(diffusion.encode_image(flat), 0)
    cond = diffusion.embed_text(spec.prompt)
    pivots = pivotal_invert(z0, cond, s, diffusion, depth, inv["formula"])
    traj = optimize_null_text(pivots, cond, s, diffusion, w=float(inv["guidance"]),
                              n_inner=int(inv["null_inner"]), lr=float(inv["null_lr"]),
                              formula=inv["formula"])
    return traj, pivots, cond


def cmd_invert(args) -> int:
    cfg, cfg_hash = resolve_config(args.config, args.set)
    _require_files(args.image, args.mask)
    diffusion = _build_backend(cfg, "diffusion")
    s = _build_schedule(cfg)
    _depth(cfg, s)  # range check before compute
    spec = _build_spec(cfg, args.image, args.mask, args.prompt)

    run_dir = _make_run_dir(cfg, cfg_hash, args.run_dir)
    _write_config(run_dir, cfg)
    s.to_csv(os.path.join(run_dir, "schedule.csv"))

    traj, pivots, cond = _invert_once(spec, diffusion, s, cfg)

    # same pivots, untouched uncond embedding: the improvement baseline
    plain = InversionTrajectory(
        pivot_latents=pivots, null_embeddings=[diffusion.embed_text("")] * traj.depth,
        cond=cond, depth=traj.depth, reconstruction_error=float("nan"),
        schedule=s, guidance=traj.guidance, formula=traj.formula)
    _, plain_err = reconstruct(plain, diffusion)

    traj_dir = os.path.join(run_dir, "trajectory")
    os.makedirs(traj_dir, exist_ok=True)
    traj_path = os.path.join(traj_dir, "trajectory.zip")
    save_trajectory(traj_path, traj, meta={
        "config_hash": cfg_hash, "prompt": spec.prompt,
        "image": os.path.basename(args.image), "mask": os.path.basename(args.mask)})

    report = {
        "reconstruction_error": traj.reconstruction_error,
        "unoptimized_error": plain_err,
        "improvement_ratio": (plain_err / traj.reconstruction_error
                              if traj.reconstruction_error > 0 else float("inf")),
        "per_step_objective_initial": [h[0] for h in traj.inner_objectives],
        "per_step_objective_final": [h[-1] for h in traj.inner_objectives],
        "depth": traj.depth,
        "config_hash": cfg_hash,
    }
    with open(os.path.join(traj_dir, "reconstruction.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")

    print(f"trajectory: {traj_path}")
    print(f"reconstruction error: {traj.reconstruction_error:.3e} "
          f"(unoptimized {plain_err:.3e})")
    return 0


def _save_loss_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("update,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v:.10g}\n")


def _save_loss_plot(path, histories) -> None:
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    fig = Figure(figsize=(6, 4))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    for r, hist in enumerate(histories):
        ax.plot(range(len(hist)), hist, label=f"round {r}")
    ax.set_xlabel("update")
    ax.set_ylabel("detection loss")
    if len(histories) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)


def cmd_optimize(args) -> int:
    cfg, cfg_hash = resolve_config(args.config, args.set)
    _require_files(args.image, args.mask, args.dataset, args.trajectory, args.resume)
    rounds = int(cfg["ido"]["rounds"])
    if rounds < 1:
        raise ConfigurationError("ido.rounds must be >= 1")
    if args.resume and rounds != 1:
        raise ConfigurationError("--resume requires ido.rounds=1")

    diffusion = _build_backend(cfg, "diffusion")
    detector = _build_backend(cfg, "detector")
    s = _build_schedule(cfg)
    depth = _depth(cfg, s)
    ido_cfg = _build_ido(cfg)
    spec = _build_spec(cfg, args.image, args.mask, args.prompt)
    data = load_training_set(args.dataset)

    initial_traj = None
    if args.trajectory:
        initial_traj, _, meta = load_trajectory(args.trajectory)
        if meta.get("config_hash") and meta["config_hash"] != cfg_hash:
            log.warning("trajectory %s was produced under a different config",
                        args.trajectory)
        if initial_traj.depth != depth:
            raise ConfigurationError(
                f"trajectory depth {initial_traj.depth} != configured depth {depth}")

    run_dir = _make_run_dir(cfg, cfg_hash, args.run_dir)
    _write_config(run_dir, cfg)
    ckpt_root = os.path.join(run_dir, "checkpoints")
    patch_dir = os.path.join(run_dir, "patch")
    plots_dir = os.path.join(run_dir, "plots")
    for d in (ckpt_root, patch_dir, plots_dir):
        os.makedirs(d, exist_ok=True)

    inv = cfg["inversion"]
    round_dirs = []

    def persist_round(r: int, result: RoundResult) -> None:
        rdir = os.path.join(run_dir, "rounds", f"round{r:02d}")
        os.makedirs(rdir, exist_ok=True)
        round_dirs.append(rdir)
        save_trajectory(os.path.join(rdir, "trajectory.zip"), result.trajectory,
                        meta={"config_hash": cfg_hash, "round": r})
        save_patch_rgba(os.path.join(rdir, "patch.png"), result.patch_image,
                        result.patch_mask, meta={"config_hash": cfg_hash,
                                                 "round": str(r)})
        _save_loss_csv(os.path.join(rdir, "loss.csv"), result.state.loss_history)

    if args.resume:
        traj = initial_traj
        if traj is None:
            traj, _, _ = _invert_once(spec, diffusion, s, cfg)
        ckpt_dir = os.path.join(ckpt_root, "round00")
        os.makedirs(ckpt_dir, exist_ok=True)
        patch, mask, state = ido_run(traj, spec, data, detector, diffusion, ido_cfg,
                                     checkpoint_dir=ckpt_dir, resume=args.resume,
                                     config_hash=cfg_hash)
        results = [RoundResult(trajectory=traj, patch_image=patch,
                               patch_mask=mask, state=state)]
        persist_round(0, results[0])
    else:
        results = iterative_optimize(
            spec, data, detector, diffusion, s, rounds, ido_cfg, depth=depth,
            guidance=float(inv["guidance"]), null_inner=int(inv["null_inner"]),
            null_lr=float(inv["null_lr"]), formula=inv["formula"],
            initial_traj=initial_traj, on_round=persist_round,
            checkpoint_root=ckpt_root, config_hash=cfg_hash)

    final = results[-1]
    patch_path = os.path.join(patch_dir, "patch.png")
    save_patch_rgba(patch_path, final.patch_image, final.patch_mask,
                    meta={"config_hash": cfg_hash, "prompt": spec.prompt})
    save_mask(os.path.join(patch_dir, "mask.png"), final.patch_mask)
    _save_loss_csv(os.path.join(patch_dir, "loss.csv"), final.state.loss_history)
    histories = [r.state.loss_history for r in results]
    if any(h for h in histories):
        _save_loss_plot(os.path.join(plots_dir, "loss.png"), histories)

    summary = {
        "rounds": len(results),
        "updates_per_round": [r.state.iteration for r in results],
        "final_loss_per_round": [(r.state.loss_history[-1] if r.state.loss_history
                                  else None) for r in results],
        "config_hash": cfg_hash,
    }
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")

    print(f"patch: {patch_path}")
    for r, hist in enumerate(histories):
        if hist:
            print(f"round {r}: loss {hist[0]:.4f} -> {hist[-1]:.4f} "
                  f"({len(hist)} updates)")
        else:
            print(f"round {r}: no updates")
    return 0


def cmd_evaluate(args) -> int:
    cfg, cfg_hash = resolve_config(args.config, args.set)
    datasets = list(args.datasets) or [str(p) for p in cfg["eval"]["datasets"]]
    if not datasets:
        raise ConfigurationError("no evaluation datasets given")
    sources = sum(1 for v in (args.patch, args.control, args.baseline) if v)
    if sources != 1:
        raise ConfigurationError("give exactly one of --patch, --control, --baseline")
    _require_files(args.patch, *datasets)

    if args.patch:
        patch_image, patch_mask = load_patch_rgba(args.patch)
        patch_id = os.path.basename(args.patch)
    elif args.control:
        if not args.mask:
            raise ConfigurationError("--control requires --mask for the patch shape")
        _require_files(args.mask)
        patch_mask = load_mask(args.mask)
        patch_image = make_control_patch(args.control, patch_mask.shape, patch_mask,
                                         seed=int(cfg["seed"]))
        patch_id = f"{args.control}-control"
    else:
        patch_image, patch_mask = None, None
        patch_id = "baseline"

    detector = _build_backend(cfg, "detector")
    run_dir = _make_run_dir(cfg, cfg_hash, args.run_dir)
    _write_config(run_dir, cfg)
    reports_dir = os.path.join(run_dir, "reports")
    os.makedirs(reports_dir, exist_ok=True)

    ev = cfg["eval"]
    reports = []
    errors = {}
    for manifest in datasets:
        try:
            records = read_manifest(manifest)
            root = os.path.dirname(os.path.abspath(manifest))
            report, preds, gts = evaluate_dataset(
                records, root, patch_image, patch_mask, detector,
                tau=float(cfg["render"]["tau"]),
                conf_threshold=float(ev["conf_threshold"]),
                iou_threshold=float(ev["iou_threshold"]),
                dataset_id=manifest, patch_id=patch_id,
                config_hash=cfg_hash, want_raw=True)
            reports.append(report)
            stem = os.path.splitext(os.path.basename(manifest))[0]
            save_report(os.path.join(reports_dir, f"{stem}.json"), report)
            if args.plot:
                plots_dir = os.path.join(run_dir, "plots")
                os.makedirs(plots_dir, exist_ok=True)
                recall, precision = pr_curve_points(preds, gts,
                                                    float(ev["iou_threshold"]))
                save_pr_plot(os.path.join(plots_dir, f"pr_{stem}.png"),
                             recall, precision, title=f"{patch_id} on {stem}")
        except ConfigurationError as exc:
            errors[manifest] = str(exc)

    table = report_table(reports, errors)
    with open(os.path.join(reports_dir, "summary.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)

    if args.describe:
        scorer = _build_backend(cfg, "scorer", required=False)
        if patch_image is None:
            raise ConfigurationError("--describe needs a patch to score")
        score = naturalness_score(patch_image, args.describe, scorer)
        print(f"naturalness({args.describe!r}) = {score:.4f}")

    if errors and not reports:
        raise ConfigurationError("all datasets failed: "
                                 + "; ".join(errors.values()))
    return 0


def cmd_report(args) -> int:
    reports = [load_report(p) for p in args.reports]
    print(report_table(reports))
    return 0


def load_plugins(env: str = PLUGIN_ENV) -> None:
    """Import backend plugins named by the environment variable.

    Entries are os.pathsep-separated module names or .py file paths;
    importing a plugin registers its backends as a side effect.
    """
    raw = os.environ.get(env, "")
    for entry in filter(None, raw.split(os.pathsep)):
        try:
            if entry.endswith(".py"):
                name = f"_latentpatch_plugin_{os.path.splitext(os.path.basename(entry))[0]}"
                spec = importlib.util.spec_from_file_location(name, entry)
                if spec is None or spec.loader is None:
                    raise ImportError(f"cannot load {entry}")
                module = importlib.util.module_from_spec(spec)
                sys.modules[name] = module
                spec.loader.exec_module(module)
            else:
                importlib.import_module(entry)
        except Exception as exc:
            raise ConfigurationError(f"plugin {entry!r} failed to load: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentpatch",
        description="Mask-shaped adversarial patches via latent-space optimization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path)")
        p.add_argument("--run-dir", help="output directory (default: runs/<stamp>-<hash>)")

    p = sub.add_parser("invert", help="map a reference patch into the latent trajectory")
    common(p)
    p.add_argument("--image", required=True, help="reference patch image (PNG)")
    p.add_argument("--mask", required=True, help="binary patch mask (PNG)")
    p.add_argument("--prompt", default="", help="text condition for the image")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("optimize", help="run the latent patch attack")
    common(p)
    p.add_argument("--image", required=True, help="reference patch image (PNG)")
    p.add_argument("--mask", required=True, help="binary patch mask (PNG)")
    p.add_argument("--prompt", default="", help="text condition for the image")
    p.add_argument("--dataset", required=True, help="training manifest (JSONL)")
    p.add_argument("--trajectory", help="reuse a saved inversion for round one")
    p.add_argument("--resume", help="checkpoint file to resume from (rounds=1 only)")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="score a patch on labelled datasets")
    common(p)
    p.add_argument("datasets", nargs="*", help="dataset manifests (JSONL)")
    p.add_argument("--patch", help="patch RGBA file from `optimize`")
    p.add_argument("--control", choices=("gray", "random"),
                   help="evaluate a synthetic control patch instead")
    p.add_argument("--baseline", action="store_true",
                   help="evaluate unpatched images instead")
    p.add_argument("--mask", help="mask PNG (required with --control)")
    p.add_argument("--describe", metavar="TEXT",
                   help="also report patch/description similarity")
    p.add_argument("--plot", action="store_true", help="write PR-curve plots")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render saved report JSONs as a table")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        load_plugins()
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:  # anything unplanned is a runtime failure
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
