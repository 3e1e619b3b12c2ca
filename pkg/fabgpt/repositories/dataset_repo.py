import json
import os
from typing import List, Optional

import numpy as np
from PIL import Image
from pydantic import ValidationError

from fabgpt.core.errors import DataError
from fabgpt.schemas.dataset import DatasetManifest, ManifestEntry, SampleMeta
from fabgpt.services.synth_service import WaferSample


def load_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no manifest.json under {root}")
    try:
        with open(path, "r") as f:
            manifest = DatasetManifest.model_validate(json.load(f))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DataError(f"manifest {path} does not parse: {e}")
    return manifest.model_copy(update={"root": os.path.abspath(root)})


def read_png(path: str) -> np.ndarray:
    """8-bit grayscale PNG as float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}")
    return arr / 255.0


def read_meta(path: str) -> SampleMeta:
    try:
        with open(path, "r") as f:
            return SampleMeta.model_validate(json.load(f))
    except FileNotFoundError:
        raise DataError(f"missing metadata {path}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise DataError(f"metadata {path} does not parse: {e}")


def load_sample(root: str, entry: ManifestEntry) -> WaferSample:
    image = read_png(os.path.join(root, entry.image))
    mask = (read_png(os.path.join(root, entry.mask)) > 0.5).astype(np.uint8)
    meta = read_meta(os.path.join(root, entry.meta))
    if image.shape != mask.shape:
        raise DataError(f"{entry.sample_id}: image {image.shape} and mask {mask.shape} differ")
    return WaferSample(image=image, mask=mask, label=meta.label, text_marks=meta.text_marks,
                       sample_id=meta.sample_id, seed=meta.seed, meta=meta)


def load_split(manifest: DatasetManifest, split: str) -> List[WaferSample]:
    return [load_sample(manifest.root, e) for e in manifest.entries(split)]


def find_meta_for_image(image_path: str) -> Optional[SampleMeta]:
    """<root>/images/<id>.png -> <root>/meta/<id>.json when the image sits in a dataset tree."""
    folder = os.path.dirname(os.path.abspath(image_path))
    stem = os.path.splitext(os.path.basename(image_path))[0]
    candidate = os.path.join(os.path.dirname(folder), "meta", stem + ".json")
    if os.path.basename(folder) == "images" and os.path.exists(candidate):
        return read_meta(candidate)
    return None


def verify_manifest(manifest: DatasetManifest) -> None:
    """Every listed file exists and parses."""
    for split in manifest.splits:
        for e in manifest.entries(split):
            load_sample(manifest.root, e)
