"""Region similarity J, contour accuracy F and their mean over masks and datasets."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import LoadError, dataset_entries, load_clip, rle_decode, rle_encode


def _pair(pred, gt):
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a, b = _pair(pred, gt)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; the image edge counts as background."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def default_tol_radius(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def contour_accuracy(pred, gt, tol_radius: float | None = None) -> float:
    """Boundary F-measure with a Euclidean distance tolerance in pixels."""
    a, b = _pair(pred, gt)
    if tol_radius is None:
        tol_radius = default_tol_radius(a.shape)
    if tol_radius < 0:
        raise ValueError("tol_radius must be >= 0")
    if not a.any() and not b.any():
        return 1.0
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        return 0.0
    # exact distance from every pixel to the nearest boundary pixel of the other mask
    to_gt = ndimage.distance_transform_edt(~bb)
    to_pred = ndimage.distance_transform_edt(~ba)
    precision = float(np.mean(to_gt[ba] <= tol_radius))
    recall = float(np.mean(to_pred[bb] <= tol_radius))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf_score(pred, gt, tol_radius: float | None = None) -> tuple[float, float, float]:
    """Frame-averaged (J, F, J&F) over (T, H, W) binary volumes."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    j = float(np.mean([region_similarity(p, g) for p, g in zip(pred, gt)]))
    f = float(np.mean([contour_accuracy(p, g, tol_radius) for p, g in zip(pred, gt)]))
    return j, f, (j + f) / 2


@dataclass
class MetricReport:
    per_clip: dict[str, tuple[float, float, float]] = field(default_factory=dict)   # id -> (J, F, J&F)

    def mean(self) -> tuple[float, float, float]:
        if not self.per_clip:
            return 0.0, 0.0, 0.0
        arr = np.array(list(self.per_clip.values()))
        j, f = float(arr[:, 0].mean()), float(arr[:, 1].mean())
        return j, f, (j + f) / 2

    @property
    def J(self):
        return self.mean()[0]

    @property
    def F(self):
        return self.mean()[1]

    @property
    def JF(self):
        return self.mean()[2]

    def table(self) -> str:
        """Aligned text table with J&F, J, F columns in percent."""
        rows = [(k, v) for k, v in sorted(self.per_clip.items())]
        rows.append(("mean", self.mean()))
        width = max(len("clip"), *(len(k) for k, _ in rows))
        lines = [f"{'clip':<{width}} | {'J&F':>6} {'J':>6} {'F':>6}", "-" * (width + 24)]
        for k, (j, f, jf) in rows:
            lines.append(f"{k:<{width}} | {100 * jf:6.1f} {100 * j:6.1f} {100 * f:6.1f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip", "J&F", "J", "F"])
        for k, (j, f, jf) in sorted(self.per_clip.items()):
            w.writerow([k, f"{jf:.6f}", f"{j:.6f}", f"{f:.6f}"])
        j, f, jf = self.mean()
        w.writerow(["mean", f"{jf:.6f}", f"{j:.6f}", f"{f:.6f}"])
        return buf.getvalue()


# -------------------------------------------------------------- predictions IO

PRED_FORMAT = "refquery-pred"


def write_prediction(path, clip_id: str, masks: np.ndarray, video_id: str | None = None):
    """Per-frame RLE masks for one clip, in the clip manifest's mask encoding."""
    masks = np.asarray(masks, dtype=np.uint8)
    doc = {"format": PRED_FORMAT, "version": 1, "clip_id": clip_id, "video_id": video_id or clip_id,
           "frames": int(masks.shape[0]), "mask_size": [int(masks.shape[1]), int(masks.shape[2])],
           "masks": [rle_encode(m) for m in masks]}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def read_prediction(path) -> tuple[str, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError("prediction", f"cannot read {path} ({exc})") from None
    if doc.get("format") != PRED_FORMAT:
        raise LoadError("format", f"{path} is not a prediction file")
    size = doc["mask_size"]
    try:
        masks = np.stack([rle_decode(c, size) for c in doc["masks"]])
    except ValueError as exc:
        raise LoadError("masks", str(exc)) from None
    if masks.shape[0] != doc["frames"]:
        raise LoadError("frames", f"declares {doc['frames']} frames, holds {masks.shape[0]}")
    return doc["clip_id"], masks


def evaluate_dataset(pred_dir, gt, tol_radius: float | None = None) -> MetricReport:
    """Score prediction files in ``pred_dir`` against the clips listed by ``gt``.

    Clips sharing a video id (several expressions) are averaged into one entry.
    """
    clips = [load_clip(p) for p in dataset_entries(gt)]
    pred_dir = Path(pred_dir)
    missing = []
    scores = defaultdict(list)
    for clip in clips:
        path = pred_dir / f"{clip.clip_id}.json"
        if not path.is_file():
            missing.append(clip.clip_id)
            continue
        _, masks = read_prediction(path)
        target = clip.target_mask()
        if masks.shape[0] != target.shape[0]:
            missing.append(f"{clip.clip_id} (frames {masks.shape[0]} of {target.shape[0]})")
            continue
        scores[clip.video_id or clip.clip_id].append(jf_score(masks, target, tol_radius))
    if missing:
        raise LoadError("predictions", "missing: " + ", ".join(missing))
    report = MetricReport()
    for vid, vals in scores.items():
        arr = np.array(vals)
        j, f = float(arr[:, 0].mean()), float(arr[:, 1].mean())
        report.per_clip[vid] = (j, f, (j + f) / 2)
    return report
