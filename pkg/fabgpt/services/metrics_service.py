"""
Detection metrics (Image-AUC, Pixel-AUC, PRO, AP) and Q&A accuracy
aggregation. Anomaly maps are arrays of shape N x H x W (or one H x W map).
"""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.metrics import auc, average_precision_score, roc_auc_score

from fabgpt.core.errors import InputError, MetricUndefinedError
from fabgpt.schemas.corpus import DEFECT_FACETS, Facet
from fabgpt.schemas.report import DETECTION_METRICS, DetectionScores, QAScores

log = logging.getLogger(__name__)

PRO_FPR_LIMIT = 0.3
UNRELATED = "unrelated"


def _stack(maps, masks) -> Tuple[np.ndarray, np.ndarray]:
    m = np.asarray(maps, dtype=np.float64)
    y = np.asarray(masks)
    if m.ndim == 2:
        m, y = m[None], y[None]
    if m.shape != y.shape:
        raise InputError(f"anomaly maps {m.shape} and masks {y.shape} differ in shape")
    return m, (y > 0).astype(np.int64)


def _both_classes(labels: np.ndarray, what: str) -> None:
    if labels.size == 0 or labels.min() == labels.max():
        raise MetricUndefinedError(f"{what} needs both classes present")


def image_scores(maps) -> np.ndarray:
    """Image-level score: the maximum of each anomaly map."""
    m = np.asarray(maps, dtype=np.float64)
    return m.reshape(m.shape[0], -1).max(axis=1)


def image_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = (np.asarray(labels) > 0).astype(np.int64).ravel()
    _both_classes(y, "image AUC")
    return float(roc_auc_score(y, s))


def pixel_auc(maps, masks) -> float:
    m, y = _stack(maps, masks)
    _both_classes(y, "pixel AUC")
    return float(roc_auc_score(y.ravel(), m.ravel()))


def average_precision(maps, masks) -> float:
    m, y = _stack(maps, masks)
    if not y.any():
        raise MetricUndefinedError("average precision needs at least one defect pixel")
    return float(average_precision_score(y.ravel(), m.ravel()))


def pro_curve(maps, masks) -> Tuple[np.ndarray, np.ndarray]:
    """
    (fpr, pro) for every distinct threshold t, descending, a pixel predicted
    defective when its score >= t; prefixed with (0, 0).
    """
    m, y = _stack(maps, masks)
    weights = np.zeros(m.shape, dtype=np.float64)
    labelled_maps: List[Tuple[int, np.ndarray]] = []
    n_regions = 0
    for i in range(m.shape[0]):
        labelled, n = ndimage.label(y[i])           # 4-connected
        if n:
            labelled_maps.append((i, labelled))
            n_regions += n
    if n_regions == 0:
        raise MetricUndefinedError("PRO needs at least one defect region")
    n_normal = int((y == 0).sum())
    if n_normal == 0:
        raise MetricUndefinedError("PRO needs normal pixels for the false-positive rate")
    for i, labelled in labelled_maps:
        sizes = np.bincount(labelled.ravel()).astype(np.float64)
        inside = labelled > 0
        weights[i][inside] = 1.0 / (n_regions * sizes[labelled[inside]])

    scores = m.ravel()
    defect = y.ravel() > 0
    pro_w = np.where(defect, weights.ravel(), 0.0)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    pro_cum = np.cumsum(pro_w[order])
    # integer counts keep fpr exact at the limit
    fpr_cum = np.cumsum(~defect[order]) / n_normal
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    fpr = np.r_[0.0, fpr_cum[ends]]
    pro_v = np.r_[0.0, pro_cum[ends]]
    return np.clip(fpr, 0.0, 1.0), np.clip(pro_v, 0.0, 1.0)


def integrate_pro(fpr: np.ndarray, pro_v: np.ndarray, fpr_limit: float = PRO_FPR_LIMIT) -> float:
    """
    Trapezoid area up to fpr_limit, normalised by the limit. The last point at
    or below the limit is held flat to the limit; no interpolation toward the
    next threshold.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise InputError("fpr_limit must lie in (0, 1]")
    keep = fpr <= fpr_limit
    x = np.r_[fpr[keep], fpr_limit]
    y = np.r_[pro_v[keep], pro_v[keep][-1]]
    return float(auc(x, y) / fpr_limit)


def pro(maps, masks, fpr_limit: float = PRO_FPR_LIMIT) -> float:
    fpr, pro_v = pro_curve(maps, masks)
    return integrate_pro(fpr, pro_v, fpr_limit)


# ===== aggregation =====
def _safe(fn, *args) -> Optional[float]:
    try:
        return fn(*args)
    except MetricUndefinedError as e:
        log.warning("%s", e.detail)
        return None


def detection_scores(maps: np.ndarray, masks: np.ndarray) -> DetectionScores:
    labels = (masks.reshape(masks.shape[0], -1).max(axis=1) > 0).astype(np.int64)
    return DetectionScores(
        image_auc=_safe(image_auc, image_scores(maps), labels),
        pixel_auc=_safe(pixel_auc, maps, masks),
        pro=_safe(pro, maps, masks),
        ap=_safe(average_precision, maps, masks),
    )


def per_class_scores(maps: np.ndarray, masks: np.ndarray, labels: Sequence[str],
                     classes: Sequence[str], normal: str = "good") -> Tuple[Dict[str, DetectionScores], DetectionScores]:
    """Each defect class is scored against the normal images; the average is the unweighted class mean."""
    labels = np.asarray(labels)
    per_class: Dict[str, DetectionScores] = {}
    for c in classes:
        sel = (labels == c) | (labels == normal)
        if not (labels == c).any():
            log.warning("no test images of class %s", c)
            continue
        per_class[c] = detection_scores(maps[sel], masks[sel])
    avg = {}
    for k in DETECTION_METRICS:
        vals = [getattr(s, k) for s in per_class.values() if getattr(s, k) is not None]
        avg[k] = float(np.mean(vals)) if vals else None
    return per_class, DetectionScores(**avg)


def qa_accuracy(results: Iterable[Tuple[str, bool]]) -> QAScores:
    """
    results: (facet, correct) pairs, facet "general" counted as the unrelated
    group. Overall is the unweighted mean over the non-empty groups.
    """
    groups: Dict[str, List[bool]] = {f.value: [] for f in DEFECT_FACETS}
    groups[UNRELATED] = []
    for facet, ok in results:
        key = UNRELATED if facet in (Facet.general, Facet.general.value, UNRELATED) else Facet(facet).value
        groups[key].append(bool(ok))
    pct: Dict[str, Optional[float]] = {}
    for key, vals in groups.items():
        if not vals:
            log.warning("Q&A group '%s' has no graded questions; excluded from overall", key)
            pct[key] = None
        else:
            pct[key] = 100.0 * sum(vals) / len(vals)
    present = [v for v in pct.values() if v is not None]
    defect = [ok for f in DEFECT_FACETS for ok in groups[f.value]]
    return QAScores(
        facets={f.value: pct[f.value] for f in DEFECT_FACETS},
        unrelated=pct[UNRELATED],
        overall=float(np.mean(present)) if present else None,
        defect_related=100.0 * sum(defect) / len(defect) if defect else None,
        counts={k: len(v) for k, v in groups.items()},
    )
