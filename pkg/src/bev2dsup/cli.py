"""Command-line entry point: ``bev2dsup <command> ...``.

Exit codes: 0 success, 1 internal failure or failed check, 2 usage,
configuration or input-data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import RunConfig, dump_json, dump_run_config, load_run_config
from .errors import Bev2DError, ChecksumMismatch, ConfigError, FormatError, LabelAccessError, UnsupportedVersion
from .finetune import (
    ToyDetector,
    camera_targets,
    evaluate,
    evaluation_scenes,
    finetune,
    history_to_csv,
    metric_config_for,
)
from .geometry import project_params
from .gradcheck import GradCheckConfig, run_grad_check
from .losses import LossBreakdown, Normalization, softmax, total_loss_grad_3d
from .matching import build_cost_matrix, hungarian
from .overlay import scene_overlay_svg
from .scenegen import Dataset, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("bev2dsup")

USAGE_ERRORS = (ConfigError, FormatError, ChecksumMismatch, UnsupportedVersion, LabelAccessError, FileNotFoundError, KeyError)


class UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{float(x):.6f}"


def _row(values) -> str:
    return " ".join(_fmt(v) for v in values)


# ---------------------------------------------------------------- shared helpers


def _run_config(args) -> RunConfig:
    return load_run_config(args.config) if getattr(args, "config", None) else RunConfig()


def _load_dataset(path) -> Dataset:
    if not Path(path, "manifest.json").is_file():
        raise UsageError(f"{path}: not a dataset directory (no manifest.json)")
    return read_dataset(path)


def _load_params(path) -> ToyDetector:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc.msg}", line=exc.lineno) from exc
    try:
        return ToyDetector.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed parameter file: {exc}") from exc


def _detector(args, dataset: Dataset, config: RunConfig) -> ToyDetector:
    if getattr(args, "params", None):
        det = _load_params(args.params)
        missing = [s.id for s in dataset.scenes if s.id not in det.scenes]
        if missing:
            raise ConfigError(f"parameter file has no entry for scene(s) {', '.join(missing[:3])}")
        return det
    return ToyDetector.initialize(dataset, config.noise, config.init_seed, config.train.min_dim)


def _cameras(scene, which: str):
    if which == "all":
        return list(scene.cameras)
    try:
        return [scene.camera(which)]
    except KeyError:
        raise UsageError(f"scene {scene.id} has no camera {which!r}; choose from {[c.id for c in scene.cameras]} or 'all'")


def _scene(dataset: Dataset, scene_id: str):
    try:
        return dataset.scene(scene_id)
    except KeyError:
        raise UsageError(f"dataset has no scene {scene_id!r}")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    config = _run_config(args)
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    if not 0 <= args.split <= 1:
        raise UsageError("--split must lie in [0, 1]")
    dataset = generate_dataset(args.seed, args.scenes, args.split, config.scene, config.rig)
    manifest = write_dataset(dataset, args.out)
    n_full = len(manifest["split"]["full3d"])
    print(f"dataset: {args.out}")
    print(f"version: {manifest['version']}")
    print(f"seed: {manifest['seed']}")
    print(f"scenes: {manifest['scene_count']} (full3d {n_full}, only2d {manifest['scene_count'] - n_full})")
    print(f"classes: {', '.join(manifest['class_names'])}")
    cams = manifest["rig"]["cameras"]
    print(f"cameras: {len(cams)} x {cams[0]['width']}x{cams[0]['height']}" if cams else "cameras: 0")
    print(f"files: {len(manifest['files'])}")
    print(f"scenes.jsonl sha256: {manifest['files']['scenes.jsonl']}")
    return 0


def _projections(scene, det: ToyDetector, cam):
    params = det.effective_params(scene.id)
    out = []
    for i, p in enumerate(params):
        proj = project_params(cam, p)
        if proj is not None:
            out.append((i, proj))
    return out


def cmd_project(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = _run_config(args)
    scene = _scene(dataset, args.scene)
    det = _detector(args, dataset, config)
    n = det.effective_params(scene.id).shape[0]
    print(f"scene {scene.id} ({scene.label_mode}), {n} predictions")
    for cam in _cameras(scene, args.camera):
        visible = _projections(scene, det, cam)
        print(f"[camera {cam.id}]")
        print(f"visible: {len(visible)}")
        print("pred x y w h depth")
        for i, proj in visible:
            print(f"{i} {_row(proj.box)}")
    return 0


def _match_camera(scene, det, cam, targets, config: RunConfig):
    visible = _projections(scene, det, cam)
    logits = det.logits(scene.id)
    preds = [(proj.box, softmax(logits[i])) for i, proj in visible]
    gts = [(t.box, t.class_id) for t in targets.get(cam.id, ())]
    if not preds or not gts:
        return visible, None, None
    norm = Normalization(cam.height, config.train.d_max)
    costs = build_cost_matrix(preds, gts, config.train.cost_weights, norm)
    return visible, costs, hungarian(costs)


def cmd_match(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = _run_config(args)
    scene = _scene(dataset, args.scene)
    det = _detector(args, dataset, config)
    targets = camera_targets(scene)
    print(f"scene {scene.id} ({scene.label_mode})")
    for cam in _cameras(scene, args.camera):
        visible, costs, assignment = _match_camera(scene, det, cam, targets, config)
        print(f"[camera {cam.id}]")
        print(f"predictions: {' '.join(str(i) for i, _ in visible) or '-'}")
        print(f"labels: {len(targets.get(cam.id, ()))}")
        if costs is None:
            print("cost matrix: empty")
            continue
        print("cost matrix:")
        for row in costs:
            print(f"  {_row(row)}")
        print("assignment (pred, label):")
        for i, j in assignment.pairs:
            print(f"  {visible[i][0]} {j}")
        print(f"unmatched predictions: {' '.join(str(visible[i][0]) for i in assignment.unmatched_preds) or '-'}")
        print(f"unmatched labels: {' '.join(str(j) for j in assignment.unmatched_gts) or '-'}")
        print(f"total cost: {_fmt(assignment.total_cost)}")
    return 0


def _breakdown_lines(b: LossBreakdown) -> List[str]:
    return [f"l_cls: {_fmt(b.l_cls)}", f"l_reg: {_fmt(b.l_reg)}", f"l_iou: {_fmt(b.l_iou)}", f"total: {_fmt(b.total)}"]


def cmd_loss(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = _run_config(args)
    scene = _scene(dataset, args.scene)
    det = _detector(args, dataset, config)
    cams = _cameras(scene, args.camera)
    t = config.train
    result = total_loss_grad_3d(
        det.effective_params(scene.id), det.logits(scene.id), cams, camera_targets(scene),
        t.loss_weights, t.focal, t.d_max, t.cost_weights,
    )
    by_cam = {term.camera_id: term for term in result.cameras}
    print(f"scene {scene.id} ({scene.label_mode})")
    for cam in cams:
        print(f"[camera {cam.id}]")
        term = by_cam.get(cam.id)
        if term is None:
            print("no visible predictions")
            continue
        print(f"predictions: {' '.join(str(i) for i in term.pred_indices)}")
        print("\n".join(_breakdown_lines(term.breakdown)))
    print("[sum]")
    print("\n".join(_breakdown_lines(result.loss)))
    print(f"invisible predictions: {' '.join(str(i) for i in result.invisible) or '-'}")
    return 0


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = run_grad_check(GradCheckConfig(trials=args.trials, seed=args.seed), inject_fault=args.inject_fault)
    print(report.to_text(), end="")
    return 0 if report.passed else 1


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_finetune(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = _run_config(args).with_train(
        epochs=args.epochs, lr=args.lr, mix_ratio=args.mix_ratio, seed=args.seed, eval_split=args.split
    )
    det = _detector(args, dataset, config)
    initial = det.copy()
    metric_config = metric_config_for(dataset, config.metrics)
    eval_scenes = evaluation_scenes(dataset, config.train.eval_split)
    history = finetune(det, dataset, config.train, metric_config, eval_scenes)

    out = Path(args.out)
    _write(out / "config.yaml", dump_run_config(config))
    _write(out / "history.csv", history_to_csv(history))
    _write(out / "metrics.csv", history[-1].report.to_csv())
    _write(out / "params_initial.json", dump_json(initial.to_dict()))
    _write(out / "params_final.json", dump_json(det.to_dict()))
    if not args.no_overlays:
        for scene in eval_scenes:
            svg = scene_overlay_svg(scene, initial.effective_params(scene.id), det.effective_params(scene.id))
            _write(out / "overlays" / f"{scene.id}.svg", svg)

    first, last = history[0], history[-1]
    print(f"epochs: {config.train.epochs}")
    print(f"evaluation scenes: {len(eval_scenes)} ({config.train.eval_split})")
    print(f"initial: mAP {_fmt(first.report.mAP)} NDS {_fmt(first.report.NDS)}")
    print(f"final:   mAP {_fmt(last.report.mAP)} NDS {_fmt(last.report.NDS)}")
    print(f"outputs: {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = _run_config(args).with_train(eval_split=args.split)
    det = _detector(args, dataset, config)
    scenes = evaluation_scenes(dataset, config.train.eval_split)
    report = evaluate(det, scenes, metric_config_for(dataset, config.metrics))
    print(report.to_text(), end="")
    if args.out:
        _write(Path(args.out), report.to_csv())
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bev2dsup", description="2D-supervised fine-tuning of 3D box predictions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=60)
    p.add_argument("--split", type=float, default=1 / 3, help="fraction of scenes with 3D labels (default 1/3)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config (rig and scene sections are used)")
    p.set_defaults(func=cmd_gen)

    for name, func, text in (
        ("project", cmd_project, "project predictions into cameras"),
        ("match", cmd_match, "cost matrix and assignment per camera"),
        ("loss", cmd_loss, "loss breakdown per camera"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--dataset", required=True)
        p.add_argument("--scene", required=True)
        p.add_argument("--camera", default="all", help="camera id or 'all' (default)")
        p.add_argument("--params", help="detector parameter file (default: simulated pre-trained detector)")
        p.add_argument("--config")
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", help="finite-difference audit of the analytic gradients")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("finetune", help="fine-tune the toy detector and write reports")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="start from this parameter file instead of the simulated detector")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mix-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("only2d", "full3d", "all"), help="evaluation slice")
    p.add_argument("--no-overlays", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a parameter file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--split", choices=("only2d", "full3d", "all"), help="evaluation slice")
    p.add_argument("--out", help="write the metric report CSV here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Bev2DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
