import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import plotly.graph_objects as go
import torch
from matplotlib import colormaps
from PIL import Image

from fabgpt.core.errors import InputError
from fabgpt.models.pipeline import LABEL_SET, FabPipeline

HEAT_CMAP = "inferno"


@dataclass
class DetectionResult:
    binary: np.ndarray          # H x W uint8
    anomaly_map: np.ndarray     # H x W float32
    label: str
    p_n: float


def detect_image(pipeline: FabPipeline, image: np.ndarray, text_marks: str = "") -> DetectionResult:
    want = (pipeline.image_size, pipeline.image_size)
    if image.shape != want:
        raise InputError(f"image is {image.shape[0]}x{image.shape[1]}, checkpoint expects {want[0]}x{want[1]}")
    pipeline.eval()
    pm_out, mask = pipeline.detect(torch.from_numpy(image.astype(np.float32))[None], [text_marks])
    return DetectionResult(
        binary=mask.binary[0].numpy().astype(np.uint8),
        anomaly_map=mask.anomaly_map[0].numpy().astype(np.float32),
        label=LABEL_SET[int(pm_out.predicted[0])],
        p_n=float(pm_out.p_n[0]),
    )


def heat_rgb(anomaly_map: np.ndarray) -> np.ndarray:
    rgba = colormaps[HEAT_CMAP](np.clip(anomaly_map, 0.0, 1.0))
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def write_heat_html(anomaly_map: np.ndarray, path: str, title: Optional[str] = None) -> str:
    fig = go.Figure(go.Heatmap(z=anomaly_map, zmin=0.0, zmax=1.0, colorscale="Inferno"))
    fig.update_layout(title=title or os.path.basename(path), template="plotly_white",
                      yaxis=dict(autorange="reversed", scaleanchor="x"))
    # fixed div id keeps repeated exports byte-identical
    fig.write_html(path, include_plotlyjs="cdn", div_id="fabgpt-heat")
    return path


def write_detection(prefix: str, result: DetectionResult, *, html: bool = True, meta: Optional[dict] = None) -> dict:
    """P_mask.png, P_heat.png, P_map.bin + P_map.json and optionally P_heat.html."""
    folder = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(folder, exist_ok=True)
    paths = {
        "mask": f"{prefix}_mask.png",
        "heat": f"{prefix}_heat.png",
        "map": f"{prefix}_map.bin",
        "shape": f"{prefix}_map.json",
    }
    Image.fromarray((result.binary * 255).astype(np.uint8)).save(paths["mask"], format="PNG")
    Image.fromarray(heat_rgb(result.anomaly_map)).save(paths["heat"], format="PNG")
    with open(paths["map"], "wb") as f:
        f.write(result.anomaly_map.astype("<f4").tobytes(order="C"))
    with open(paths["shape"], "w") as f:
        json.dump({"shape": list(result.anomaly_map.shape), "dtype": "float32", "byte_order": "little",
                   "label": result.label, "p_n": result.p_n, **(meta or {})},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    if html:
        paths["html"] = write_heat_html(result.anomaly_map, f"{prefix}_heat.html",
                                        title=f"{result.label} (P_n={result.p_n:.3f})")
    return paths


def read_map(prefix: str) -> np.ndarray:
    with open(f"{prefix}_map.json", "r") as f:
        shape = json.load(f)["shape"]
    return np.fromfile(f"{prefix}_map.bin", dtype="<f4").reshape(shape)
