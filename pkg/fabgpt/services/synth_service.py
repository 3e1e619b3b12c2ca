"""
Seeded generator for a synthetic SEM-like wafer defect dataset.

Every sample is a pure function of (seed, label, generation config): the
patterned background and its noise come from `seed`, the defect from a child
stream of it, so the clean background of any sample can be re-rendered for
comparison.
"""
import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import dask.bag as db
import numpy as np
from PIL import Image

from fabgpt.core.errors import ConfigurationError, DataError, DatasetIOError, InputError
from fabgpt.core.seeding import derive_seed
from fabgpt.schemas.config import GenerationConfig
from fabgpt.schemas.dataset import (
    LABEL_ORDER, DatasetManifest, DefectLabel, ManifestEntry, SampleMeta,
)

# ===== constants =====
PRODUCTION_STEPS = ("ETCH", "CMP", "DEPO", "IMPL", "LITH")
TEXT_BAND = 9           # bottom rows reserved for the text marks
MAX_ATTEMPTS = 64

# 5x7 bitmap font, only the glyphs our marks use
FONT_5X7: Dict[str, Tuple[str, ...]] = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
}


@dataclass(frozen=True, eq=False)
class WaferSample:
    image: np.ndarray           # H x W float32 in [0, 1], 8-bit quantised
    mask: np.ndarray            # H x W uint8 {0, 1}
    label: DefectLabel
    text_marks: str
    sample_id: str
    seed: int
    meta: Optional[SampleMeta] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape


# ===== helpers =====
def _as_label(label: Union[str, DefectLabel]) -> DefectLabel:
    try:
        return DefectLabel(label)
    except ValueError:
        raise InputError(f"unknown defect label {label!r}; expected one of {[l.value for l in LABEL_ORDER]}")


def _check_dims(cfg: GenerationConfig) -> None:
    if cfg.height <= 0 or cfg.width <= 0 or cfg.height % 16 or cfg.width % 16:
        raise ConfigurationError(f"image dims must be positive multiples of 16, got {cfg.height}x{cfg.width}")


def _quantise(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def default_text_marks(seed: int) -> str:
    return f"W{seed % 10000:04d}-{PRODUCTION_STEPS[seed % len(PRODUCTION_STEPS)]}"


def render_text(img: np.ndarray, text: str) -> np.ndarray:
    """Stamp `text` into the bottom-left band. Glyphs past the right edge are clipped."""
    out = img.copy()
    h, w = out.shape
    top = h - TEXT_BAND
    out[top:, :] = 0.12
    col = 2
    for ch in text.upper():
        glyph = FONT_5X7.get(ch)
        if glyph is not None:
            for r, row in enumerate(glyph):
                for c, bit in enumerate(row):
                    x = col + c
                    if bit == "1" and x < w:
                        out[top + 1 + r, x] = 0.92
        col += 6
        if col >= w:
            break
    return out


def _stripe(u: np.ndarray, period: float, phase: float, width: float) -> np.ndarray:
    # smooth periodic square wave in [0, 1]; continuous so warps stay smooth
    c = np.cos(2.0 * np.pi * (u + phase) / period)
    edge = np.cos(np.pi * width / period)
    return np.clip((c - edge) * 4.0 + 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class _Pattern:
    kind: str
    period: float
    phase_y: float
    phase_x: float
    line_width: float
    base: float
    line: float

    def render(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        sy = _stripe(yy, self.period, self.phase_y, self.line_width)
        sx = _stripe(xx, self.period, self.phase_x, self.line_width)
        if self.kind == "horizontal":
            s = sy
        elif self.kind == "vertical":
            s = sx
        else:
            s = np.maximum(sy, sx)
        return self.base + (self.line - self.base) * s


def _background(seed: int, cfg: GenerationConfig) -> Tuple[_Pattern, np.ndarray]:
    rng = np.random.default_rng(seed)
    pattern = _Pattern(
        kind=str(rng.choice(["horizontal", "vertical", "grid"])),
        period=float(rng.choice([6.0, 8.0, 10.0])),
        phase_y=float(rng.uniform(0, 10)),
        phase_x=float(rng.uniform(0, 10)),
        line_width=float(rng.uniform(2.0, 3.0)),
        base=float(rng.uniform(0.32, 0.42)),
        line=float(rng.uniform(0.58, 0.68)),
    )
    noise = rng.normal(0.0, cfg.noise_std, size=(cfg.height, cfg.width))
    return pattern, noise


def render_clean(seed: int, cfg: GenerationConfig, text_marks: Optional[str] = None) -> np.ndarray:
    """The defect-free render of `seed`: pattern + noise + text marks."""
    _check_dims(cfg)
    pattern, noise = _background(seed, cfg)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    img = pattern.render(yy, xx) + noise
    text = default_text_marks(seed) if text_marks is None else text_marks
    return _quantise(render_text(img, text))


# ===== defect painters =====
# each returns (float image before text, boolean mask)

def _paint_hole(rng, base: np.ndarray, yy, xx, usable_h: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w = base.shape
    cy, cx = rng.uniform(5, usable_h - 5), rng.uniform(5, w - 5)
    a, b = rng.uniform(2.0, 5.5), rng.uniform(2.0, 5.5)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dy * np.cos(theta) + dx * np.sin(theta)) / a
    v = (-dy * np.sin(theta) + dx * np.cos(theta)) / b
    mask = (u * u + v * v) <= 1.0
    img = base.copy()
    img[mask] = 0.05 + rng.normal(0.0, 0.015, size=int(mask.sum()))
    return img, mask


def _paint_particles(rng, base: np.ndarray, yy, xx, usable_h: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w = base.shape
    n = int(rng.integers(1, 4))
    blobs: List[Tuple[float, float, float]] = []
    for _ in range(n * 20):
        if len(blobs) == n:
            break
        r = rng.uniform(1.5, 3.2)
        cy, cx = rng.uniform(r + 2, usable_h - r - 2), rng.uniform(r + 2, w - r - 2)
        # keep blobs apart so each is its own 4-connected component
        if all(math.hypot(cy - by, cx - bx) > r + br + 2.5 for by, bx, br in blobs):
            blobs.append((cy, cx, r))
    img = base.copy()
    mask = np.zeros_like(base, dtype=bool)
    for cy, cx, r in blobs:
        d = np.hypot(yy - cy, xx - cx)
        disc = d <= r
        img[disc] = 0.86 + 0.12 * (1.0 - d[disc] / r)
        mask |= disc
    return img, mask


def _segment_distance(yy, xx, p0, p1) -> np.ndarray:
    (y0, x0), (y1, x1) = p0, p1
    vy, vx = y1 - y0, x1 - x0
    L2 = vy * vy + vx * vx
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / max(L2, 1e-9), 0.0, 1.0)
    return np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))


def _paint_scratch(rng, base: np.ndarray, yy, xx, usable_h: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w = base.shape
    n_seg = int(rng.integers(2, 4))
    pts = [(rng.uniform(4, usable_h - 4), rng.uniform(4, w - 4))]
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(n_seg):
        angle += rng.uniform(-0.5, 0.5)
        length = rng.uniform(5.0, 12.0)
        y, x = pts[-1]
        pts.append((float(np.clip(y + length * np.sin(angle), 1, usable_h - 2)),
                    float(np.clip(x + length * np.cos(angle), 1, w - 2))))
    half_width = rng.uniform(0.55, 0.95)
    dist = np.min(np.stack([_segment_distance(yy, xx, pts[i], pts[i + 1]) for i in range(n_seg)]), axis=0)
    mask = dist <= half_width
    img = base.copy()
    img[mask] = 0.80 + rng.normal(0.0, 0.02, size=int(mask.sum()))
    return img, mask


def _paint_deformation(rng, pattern: _Pattern, noise: np.ndarray, yy, xx, usable_h: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w = noise.shape
    cy, cx = rng.uniform(6, usable_h - 6), rng.uniform(6, w - 6)
    sigma = rng.uniform(2.5, 4.5)
    amp = rng.uniform(2.0, 3.5) * rng.choice([-1.0, 1.0])
    if pattern.kind == "horizontal":
        direction = (1.0, 0.0)
    elif pattern.kind == "vertical":
        direction = (0.0, 1.0)
    else:
        t = rng.uniform(0, 2 * np.pi)
        direction = (np.sin(t), np.cos(t))
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    bump = amp * np.exp(-r2 / (2.0 * sigma * sigma))
    warped = pattern.render(yy - bump * direction[0], xx - bump * direction[1]) + noise
    clean = pattern.render(yy, xx) + noise
    footprint = r2 <= (2.5 * sigma) ** 2
    mask = footprint & (np.abs(warped - clean) > 0.04)
    # smooth the warp back into the clean render outside the footprint
    img = np.where(footprint, warped, clean)
    return img, mask


# ===== operations =====
def generate_sample(seed: int, label: Union[str, DefectLabel], cfg: GenerationConfig,
                    *, sample_id: Optional[str] = None, text_marks: Optional[str] = None) -> WaferSample:
    label = _as_label(label)
    _check_dims(cfg)
    text = default_text_marks(seed) if text_marks is None else text_marks
    sid = sample_id or f"{label.value}-{seed:08x}"

    pattern, noise = _background(seed, cfg)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = pattern.render(yy, xx) + noise
    clean = _quantise(render_text(base, text))

    if label == DefectLabel.good:
        mask = np.zeros((h, w), dtype=np.uint8)
        return _finish(clean, mask, label, text, sid, seed)

    usable_h = h - TEXT_BAND - 1
    rng = np.random.default_rng([seed, 1])
    for _ in range(MAX_ATTEMPTS):
        if label == DefectLabel.hole:
            img, m = _paint_hole(rng, base, yy, xx, usable_h)
        elif label == DefectLabel.particle:
            img, m = _paint_particles(rng, base, yy, xx, usable_h)
        elif label == DefectLabel.scratch:
            img, m = _paint_scratch(rng, base, yy, xx, usable_h)
        else:
            img, m = _paint_deformation(rng, pattern, noise, yy, xx, usable_h)
        img = _quantise(render_text(img, text))
        # a defect pixel must visibly differ from the clean render
        m = m & (img != clean)
        count = int(m.sum())
        if cfg.min_defect_pixels <= count <= cfg.max_defect_pixels:
            return _finish(img, m.astype(np.uint8), label, text, sid, seed)
    raise ConfigurationError(
        f"could not place a {label.value} within [{cfg.min_defect_pixels}, {cfg.max_defect_pixels}] pixels "
        f"at {h}x{w} after {MAX_ATTEMPTS} attempts")


def _finish(img: np.ndarray, mask: np.ndarray, label: DefectLabel, text: str, sid: str, seed: int) -> WaferSample:
    bbox = None
    count = int(mask.sum())
    if count:
        rows, cols = np.nonzero(mask)
        bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    meta = SampleMeta(
        sample_id=sid, label=label, text_marks=text, seed=seed, defect_bbox=bbox,
        defect_pixel_count=count, cause_key=None if label == DefectLabel.good else label.value,
    )
    return WaferSample(image=img, mask=mask, label=label, text_marks=text, sample_id=sid, seed=seed, meta=meta)


def extract_text_marks(sample: WaferSample) -> str:
    """OCR stand-in: the marks come from the sample's metadata record, not from pixels."""
    if sample.meta is None:
        raise DataError(f"sample {sample.sample_id} has no metadata record")
    return sample.meta.text_marks


# ===== dataset =====
def split_count(n: int, ratio: float) -> int:
    """Train share of n, round-half-up."""
    return int(math.floor(n * ratio + 0.5))


def _write_png(path: str, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def write_sample(root: str, sample: WaferSample) -> ManifestEntry:
    entry = ManifestEntry(
        sample_id=sample.sample_id, label=sample.label,
        image=f"images/{sample.sample_id}.png",
        mask=f"masks/{sample.sample_id}.png",
        meta=f"meta/{sample.sample_id}.json",
    )
    _write_png(os.path.join(root, entry.image), np.round(sample.image * 255.0))
    _write_png(os.path.join(root, entry.mask), sample.mask * 255)
    with open(os.path.join(root, entry.meta), "w") as f:
        json.dump(sample.meta.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
    return entry


def generate_dataset(cfg: GenerationConfig, out_dir: str, seed: int) -> DatasetManifest:
    _check_dims(cfg)
    counts = {DefectLabel(k): int(v) for k, v in cfg.counts.items()}
    if any(v < 0 for v in counts.values()):
        raise ConfigurationError("generation.counts must be non-negative")
    if sum(counts.values()) == 0:
        raise ConfigurationError("generation.counts sums to zero; nothing to generate")

    try:
        for sub in ("images", "masks", "meta"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset directory {out_dir}: {e}")

    jobs = []  # (global index, label, split)
    index = 0
    for label in LABEL_ORDER:
        n = counts.get(label, 0)
        n_train = split_count(n, cfg.train_ratio)
        for k in range(n):
            jobs.append((index, label, "train" if k < n_train else "test"))
            index += 1

    def _build(job):
        i, label, split = job
        s = derive_seed(seed, i)
        text = f"W{i:04d}-{PRODUCTION_STEPS[s % len(PRODUCTION_STEPS)]}"
        sample = generate_sample(s, label, cfg, sample_id=f"{i:04d}_{label.value}", text_marks=text)
        return split, write_sample(out_dir, sample)

    try:
        bag = db.from_sequence(jobs, npartitions=max(1, min(len(jobs), cfg.workers * 4)))
        if cfg.workers > 1:
            built = bag.map(_build).compute(scheduler="threads", num_workers=cfg.workers)
        else:
            built = bag.map(_build).compute(scheduler="synchronous")
    except OSError as e:
        raise DatasetIOError(f"writing samples under {out_dir} failed: {e}")

    splits: Dict[str, List[ManifestEntry]] = {"train": [], "test": []}
    for split, entry in built:
        splits[split].append(entry)

    manifest = DatasetManifest(root=".", seed=seed, generation=cfg.model_dump(mode="json"), splits=splits)
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    try:
        with open(tmp, "w") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except OSError as e:
        raise DatasetIOError(f"cannot write manifest {path}: {e}")
    return manifest.model_copy(update={"root": os.path.abspath(out_dir)})
