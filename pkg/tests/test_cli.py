"""Command-line tests.

The golden files under ``golden/`` hold the expected ``project``, ``match``
and ``loss`` output for a small fixture dataset. They are rendered by the
oracles below, which rebuild each stage from module-level functions
(``project_box``, ``brute_force_assignment``, the per-term costs and
``total_loss``) instead of going through the command implementations. Set
``BEV2DSUP_REGEN_GOLDEN=1`` to rewrite them.
"""

import hashlib
import os
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from bev2dsup.cli import main
from bev2dsup.config import ACCEPTANCE_NOISE
from bev2dsup.depth import box_depth_from_map
from bev2dsup.finetune import ToyDetector
from bev2dsup.geometry import Box2D, project_box
from bev2dsup.losses import LossBreakdown, LossWeights, Normalization, Pred2D, Target2D, giou_loss, l1_regression_loss, softmax, total_loss
from bev2dsup.matching import brute_force_assignment
from bev2dsup.scenegen import generate_dataset, read_dataset, write_dataset

from conftest import SMALL_RIG

GOLDEN = Path(__file__).parent / "golden"
SCENE = "scene_0001"
D_MAX = 61.2


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_ds")
    write_dataset(generate_dataset(5, 4, 0.5, rig=SMALL_RIG), path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def f6(x):
    return f"{float(x):.6f}"


# ---------------------------------------------------------------- oracles


def _oracle_inputs(path):
    dataset = read_dataset(path)
    scene = dataset.scene(SCENE)
    det = ToyDetector.initialize(dataset, ACCEPTANCE_NOISE, 0)
    return scene, det.boxes(SCENE), det.logits(SCENE)


def _visible(cam, boxes):
    return [(i, b2d) for i, box in enumerate(boxes) if (b2d := project_box(cam, box)) is not None]


def _targets(scene, cam):
    out = []
    for ann in scene.ann2d[cam.id]:
        depth = box_depth_from_map(scene.depth_maps[cam.id], ann.box)
        out.append(Target2D(Box2D(ann.box.x, ann.box.y, ann.box.w, ann.box.h, depth), ann.class_id))
    return out


def _costs(cam, visible, logits, targets):
    costs = np.empty((len(visible), len(targets)))
    for a, (i, box) in enumerate(visible):
        probs = softmax(logits[i])
        for b, t in enumerate(targets):
            reg = l1_regression_loss(box, t.box, cam.height, D_MAX)
            costs[a, b] = 2.0 * (1.0 - probs[t.class_id]) + 0.75 * reg + 0.25 * giou_loss(box, t.box)
    return costs


def oracle_project(path) -> str:
    scene, boxes, _ = _oracle_inputs(path)
    lines = [f"scene {scene.id} ({scene.label_mode}), {len(boxes)} predictions"]
    for cam in scene.cameras:
        visible = _visible(cam, boxes)
        lines += [f"[camera {cam.id}]", f"visible: {len(visible)}", "pred x y w h depth"]
        lines += [f"{i} " + " ".join(f6(v) for v in b.as_array()) for i, b in visible]
    return "\n".join(lines) + "\n"


def oracle_match(path) -> str:
    scene, boxes, logits = _oracle_inputs(path)
    lines = [f"scene {scene.id} ({scene.label_mode})"]
    for cam in scene.cameras:
        visible = _visible(cam, boxes)
        targets = _targets(scene, cam)
        lines += [f"[camera {cam.id}]", f"predictions: {' '.join(str(i) for i, _ in visible) or '-'}", f"labels: {len(targets)}"]
        if not visible or not targets:
            lines.append("cost matrix: empty")
            continue
        costs = _costs(cam, visible, logits, targets)
        best = brute_force_assignment(costs)
        lines.append("cost matrix:")
        lines += ["  " + " ".join(f6(v) for v in row) for row in costs]
        lines.append("assignment (pred, label):")
        lines += [f"  {visible[a][0]} {b}" for a, b in best.pairs]
        lines.append(f"unmatched predictions: {' '.join(str(visible[a][0]) for a in best.unmatched_preds) or '-'}")
        lines.append(f"unmatched labels: {' '.join(str(b) for b in best.unmatched_gts) or '-'}")
        lines.append(f"total cost: {f6(sum(costs[a, b] for a, b in best.pairs))}")
    return "\n".join(lines) + "\n"


def _breakdown(b: LossBreakdown):
    return [f"l_cls: {f6(b.l_cls)}", f"l_reg: {f6(b.l_reg)}", f"l_iou: {f6(b.l_iou)}", f"total: {f6(b.total)}"]


def oracle_loss(path) -> str:
    scene, boxes, logits = _oracle_inputs(path)
    lines = [f"scene {scene.id} ({scene.label_mode})"]
    total = LossBreakdown.zero()
    seen = set()
    for cam in scene.cameras:
        visible = _visible(cam, boxes)
        lines.append(f"[camera {cam.id}]")
        if not visible:
            lines.append("no visible predictions")
            continue
        seen.update(i for i, _ in visible)
        targets = _targets(scene, cam)
        preds = [Pred2D(b.as_array(), logits[i]) for i, b in visible]
        if targets:
            best = brute_force_assignment(_costs(cam, visible, logits, targets))
        else:
            best = brute_force_assignment(np.zeros((len(preds), 0)))
        part = total_loss(best, preds, targets, LossWeights(), norm=Normalization(cam.height, D_MAX))
        total = total + part
        lines.append(f"predictions: {' '.join(str(i) for i, _ in visible)}")
        lines += _breakdown(part)
    lines.append("[sum]")
    lines += _breakdown(total)
    hidden = [str(i) for i in range(len(boxes)) if i not in seen]
    lines.append(f"invisible predictions: {' '.join(hidden) or '-'}")
    return "\n".join(lines) + "\n"


ORACLES = {"project": oracle_project, "match": oracle_match, "loss": oracle_loss}


@pytest.mark.parametrize("command", sorted(ORACLES))
def test_golden_output(command, fixture_dir, capsys):
    golden = GOLDEN / f"{command}.txt"
    expected = ORACLES[command](fixture_dir)
    if os.environ.get("BEV2DSUP_REGEN_GOLDEN"):
        golden.write_text(expected)
    assert golden.read_text() == expected
    code, out, _ = run(capsys, command, "--dataset", fixture_dir, "--scene", SCENE)
    assert code == 0
    assert out == golden.read_text()


def test_single_camera_section(fixture_dir, capsys):
    code, out, _ = run(capsys, "project", "--dataset", fixture_dir, "--scene", SCENE)
    cams = [line for line in out.splitlines() if line.startswith("[camera ")]
    assert len(cams) == 6
    code, out, _ = run(capsys, "project", "--dataset", fixture_dir, "--scene", SCENE, "--camera", "CAM_FRONT")
    assert code == 0
    assert [line for line in out.splitlines() if line.startswith("[camera ")] == ["[camera CAM_FRONT]"]


@pytest.mark.parametrize(
    "argv",
    [
        ["project", "--scene", "nope"],
        ["match", "--scene", SCENE, "--camera", "nope"],
        ["loss", "--scene", "nope"],
    ],
)
def test_missing_ids_exit_2(argv, fixture_dir, capsys):
    code, _, err = run(capsys, *argv, "--dataset", fixture_dir)
    assert code == 2
    assert "error" in err


def test_usage_errors_exit_2(tmp_path, fixture_dir, capsys):
    assert run(capsys, "grad-check", "--trials", "0")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "project", "--dataset", tmp_path, "--scene", SCENE)[0] == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  learning_rate: 3\n")
    assert run(capsys, "gen", "--out", tmp_path / "g", "--config", bad)[0] == 2
    assert run(capsys, "gen", "--out", tmp_path / "g", "--split", "2")[0] == 2


def test_corrupted_dataset_exit_2(tmp_path, capsys):
    root = tmp_path / "ds"
    write_dataset(generate_dataset(1, 2, 0.5, rig=SMALL_RIG), root)
    depth = sorted((root / "depth").iterdir())[0]
    depth.write_bytes(depth.read_bytes()[:-4] + b"\0\0\0\0")
    code, _, err = run(capsys, "project", "--dataset", root, "--scene", "scene_0000")
    assert code == 2 and "checksum" in err


def test_grad_check_small_run_and_fault(capsys):
    code, out, _ = run(capsys, "grad-check", "--trials", "20", "--seed", "1")
    assert code == 0 and out.rstrip().endswith("result: PASS")
    code, out, _ = run(capsys, "grad-check", "--trials", "20", "--seed", "1", "--inject-fault")
    assert code == 1 and out.rstrip().endswith("result: FAIL")


def test_gen_is_reproducible(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen", "--seed", "4", "--scenes", "3", "--out", tmp_path / name, "--config", _small_rig_config(tmp_path))
        assert code == 0
        outs.append(out.replace(str(tmp_path / name), "<out>"))
    assert outs[0] == outs[1]
    digest = {n: hashlib.sha256((tmp_path / n / "manifest.json").read_bytes()).hexdigest() for n in ("a", "b")}
    assert digest["a"] == digest["b"]


def _small_rig_config(tmp_path):
    path = tmp_path / "rig.yaml"
    path.write_text(f"rig:\n  width: {SMALL_RIG.width}\n  height: {SMALL_RIG.height}\n")
    return path


def test_finetune_outputs_and_eval(fixture_dir, tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "finetune", "--dataset", fixture_dir, "--out", out, "--epochs", "2")
    assert code == 0 and "final:" in text
    for name in ("config.yaml", "history.csv", "metrics.csv", "params_initial.json", "params_final.json"):
        assert (out / name).is_file()
    history = (out / "history.csv").read_text().splitlines()
    assert len(history) == 4

    svgs = sorted((out / "overlays").glob("*.svg"))
    assert svgs
    root = ET.parse(svgs[0]).getroot()
    classes = {el.get("class") for el in root.iter("{http://www.w3.org/2000/svg}rect")}
    assert {"gt", "initial", "final"} <= classes

    code, report, _ = run(capsys, "eval", "--dataset", fixture_dir, "--params", out / "params_initial.json", "--out", tmp_path / "m.csv")
    assert code == 0
    row0 = dict(zip(history[0].split(","), history[1].split(",")))
    assert f"mAP: {float(row0['mAP']):.4f}" in report
    assert f"NDS: {float(row0['NDS']):.4f}" in report

    code, _, _ = run(capsys, "eval", "--dataset", fixture_dir, "--params", out / "params_final.json", "--out", tmp_path / "final.csv")
    assert (tmp_path / "final.csv").read_text() == (out / "metrics.csv").read_text()


def test_finetune_config_flags_override(fixture_dir, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochs: 5\n  lr: 2.0\n")
    out = tmp_path / "run"
    assert run(capsys, "finetune", "--dataset", fixture_dir, "--out", out, "--config", cfg, "--epochs", "1", "--no-overlays")[0] == 0
    saved = (out / "config.yaml").read_text()
    assert "epochs: 1" in saved and "lr: 2.0" in saved
    assert not (out / "overlays").exists()
