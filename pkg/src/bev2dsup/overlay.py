"""SVG overlays of 2D labels and projected predictions, one panel per camera."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Dict, Optional, Sequence

import numpy as np

from .geometry import project_params
from .scenegen import Scene

SVG_NS = "http://www.w3.org/2000/svg"

# stroke styles: ground-truth labels, initial projections, final projections
STYLES = {
    "gt": {"stroke": "#2ca02c", "stroke-width": "2", "fill": "none"},
    "initial": {"stroke": "#d62728", "stroke-width": "1.5", "stroke-dasharray": "4 3", "fill": "none"},
    "final": {"stroke": "#1f77b4", "stroke-width": "1.5", "fill": "none"},
}


def _rect(parent, box, scale: float, kind: str, title: str):
    x, y, w, h = (float(v) for v in box[:4])
    el = ET.SubElement(
        parent,
        "rect",
        {
            "x": f"{(x - w / 2) * scale:.2f}",
            "y": f"{(y - h / 2) * scale:.2f}",
            "width": f"{w * scale:.2f}",
            "height": f"{h * scale:.2f}",
            "class": kind,
            **STYLES[kind],
        },
    )
    ET.SubElement(el, "title").text = title


def scene_overlay_svg(
    scene: Scene,
    initial_params: Optional[np.ndarray] = None,
    final_params: Optional[np.ndarray] = None,
    panel_width: int = 320,
    columns: int = 3,
) -> str:
    """Grid of camera panels with labels (green), initial (red, dashed) and final (blue) boxes.

    ``initial_params`` / ``final_params`` are ``(n, 7)`` box parameter arrays.
    """
    cams = scene.cameras
    scale = panel_width / cams[0].width
    panel_h = cams[0].height * scale
    label_h = 16
    rows = (len(cams) + columns - 1) // columns
    width = columns * panel_width
    height = rows * (panel_h + label_h)
    root = ET.Element(
        "svg",
        {"xmlns": SVG_NS, "width": f"{width:.0f}", "height": f"{height:.0f}", "viewBox": f"0 0 {width:.0f} {height:.0f}"},
    )
    ET.SubElement(root, "title").text = f"{scene.id} ({scene.label_mode})"
    sets: Dict[str, Optional[np.ndarray]] = {"initial": initial_params, "final": final_params}
    for k, cam in enumerate(cams):
        ox = (k % columns) * panel_width
        oy = (k // columns) * (panel_h + label_h)
        group = ET.SubElement(root, "g", {"id": f"{scene.id}-{cam.id}", "transform": f"translate({ox:.2f},{oy:.2f})"})
        caption = ET.SubElement(group, "text", {"x": "4", "y": "12", "font-size": "11", "font-family": "monospace"})
        caption.text = cam.id
        panel = ET.SubElement(group, "g", {"transform": f"translate(0,{label_h})"})
        ET.SubElement(
            panel,
            "rect",
            {"x": "0", "y": "0", "width": f"{panel_width:.2f}", "height": f"{panel_h:.2f}", "fill": "#f4f4f4", "stroke": "#999"},
        )
        for j, ann in enumerate(scene.ann2d.get(cam.id, ())):
            _rect(panel, ann.box.as_array(), scale, "gt", f"label {j} class {ann.class_id}")
        for kind, params in sets.items():
            if params is None:
                continue
            for i, p in enumerate(np.asarray(params).reshape(-1, 7)):
                proj = project_params(cam, p)
                if proj is not None:
                    _rect(panel, proj.box, scale, kind, f"{kind} prediction {i}")
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"
