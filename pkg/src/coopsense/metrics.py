"""Detection and application metrics: IoU, AP40, E-CVPR, average delay."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .detection import Box3D

BEV = "bev"
VIEW_3D = "3d"
VIEWS = (BEV, VIEW_3D)
R40 = tuple((k + 1) / 40 for k in range(40))

REPORT_COLUMNS = (
    "ap40_bev_01", "ap40_3d_01", "ap40_bev_001", "ap40_3d_001",
    "ecvpr_mean", "ecvpr_std", "avg_delay_s",
)
# same AP cells on detections before geofencing and dedupe
RAW_COLUMNS = tuple(c + "_raw" for c in REPORT_COLUMNS[:4])
EXTRA_COLUMNS = RAW_COLUMNS + ("n_frames", "n_exited")


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.1, 0.01)
    views: tuple = VIEWS
    ecvpr_radius: float = 2.5

    def __post_init__(self):
        if not all(0 < t < 1 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1)")
        if any(v not in VIEWS for v in self.views):
            raise ValueError(f"views must be among {VIEWS}")


def aabb(box: Box3D) -> tuple:
    """``(lo, hi)`` corners of the axis-aligned box enclosing ``box``."""
    c, s = abs(math.cos(box.yaw)), abs(math.sin(box.yaw))
    # exact for quarter turns, which rounding would otherwise blur
    if s < 1e-12:
        hx, hy = box.ex / 2, box.ey / 2
    elif c < 1e-12:
        hx, hy = box.ey / 2, box.ex / 2
    else:
        hx = (c * box.ex + s * box.ey) / 2
        hy = (s * box.ex + c * box.ey) / 2
    hz = box.ez / 2
    return (box.cx - hx, box.cy - hy, box.cz - hz), (box.cx + hx, box.cy + hy, box.cz + hz)


def iou(a: Box3D, b: Box3D, view: str = BEV) -> float:
    """Intersection over union of the axis-aligned footprints (BEV) or volumes (3D)."""
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}")
    dims = 2 if view == BEV else 3
    (alo, ahi), (blo, bhi) = aabb(a), aabb(b)
    inter = 1.0
    va = vb = 1.0
    for k in range(dims):
        inter *= max(0.0, min(ahi[k], bhi[k]) - max(alo[k], blo[k]))
        va *= ahi[k] - alo[k]
        vb *= bhi[k] - blo[k]
    union = va + vb - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    flags: tuple  # per prediction, in input order


def _aabb_array(boxes: Sequence[Box3D]) -> np.ndarray:
    out = np.empty((len(boxes), 6))
    for k, b in enumerate(boxes):
        lo, hi = aabb(b)
        out[k, :3] = lo
        out[k, 3:] = hi
    return out


def iou_matrix(a: Sequence[Box3D], b: Sequence[Box3D], view: str = BEV) -> np.ndarray:
    """Pairwise :func:`iou` as an ``(len(a), len(b))`` array."""
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}")
    dims = 2 if view == BEV else 3
    A, B = _aabb_array(a), _aabb_array(b)
    inter = np.ones((len(a), len(b)))
    va = np.ones(len(a))
    vb = np.ones(len(b))
    for k in range(dims):
        lo = np.maximum(A[:, None, k], B[None, :, k])
        hi = np.minimum(A[:, None, 3 + k], B[None, :, 3 + k])
        inter *= np.maximum(0.0, hi - lo)
        va *= A[:, 3 + k] - A[:, k]
        vb *= B[:, 3 + k] - B[:, k]
    union = va[:, None] + vb[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def match(preds: Sequence, gts: Sequence[Box3D], iou_threshold: float, view: str = BEV) -> MatchResult:
    """Greedy score-ordered matching; ``preds`` are ``(box, score)`` pairs or Detections.

    Each prediction, highest score first (ties by input order), takes the free
    ground truth with the largest IoU at or above the threshold.
    """
    boxes, scores = _unpack(preds)
    flags = [False] * len(boxes)
    if boxes and len(gts):
        m = iou_matrix(boxes, gts, view)
        free = np.ones(len(gts), dtype=bool)
        for i in sorted(range(len(boxes)), key=lambda i: -scores[i]):
            row = np.where(free & (m[i] >= iou_threshold), m[i], -1.0)
            j = int(np.argmax(row))
            if row[j] >= 0.0:
                free[j] = False
                flags[i] = True
    tp = sum(flags)
    return MatchResult(tp, len(boxes) - tp, len(gts) - tp, tuple(flags))


def _unpack(preds):
    boxes, scores = [], []
    for p in preds:
        if hasattr(p, "box"):
            boxes.append(p.box)
            scores.append(float(p.score))
        else:
            boxes.append(p[0])
            scores.append(float(p[1]))
    return boxes, scores


def pr_curve(frames: Iterable, iou_threshold: float, view: str = BEV) -> list:
    """Precision/recall over a score sweep across frames of ``(preds, gts)``.

    One point per distinct score; predictions sharing a score enter together.
    Empty when there is no ground truth.
    """
    scored = []
    n_gt = 0
    for preds, gts in frames:
        m = match(preds, gts, iou_threshold, view)
        _, scores = _unpack(preds)
        scored.extend(zip(scores, m.flags))
        n_gt += len(gts)
    if n_gt == 0:
        return []
    scored.sort(key=lambda t: -t[0])
    out = []
    tp = 0
    for k, (s, flag) in enumerate(scored):
        tp += flag
        if k + 1 == len(scored) or scored[k + 1][0] != s:
            out.append(PRPoint(tp / n_gt, tp / (k + 1)))
    return out


def interpolated_precision(prs: Sequence[PRPoint], levels: Sequence[float] = R40) -> list:
    vals = []
    for r in levels:
        vals.append(max((p.precision for p in prs if p.recall >= r), default=0.0))
    for a, b in zip(vals, vals[1:]):
        assert a >= b, "interpolated precision must be nonincreasing in recall"
    return vals


def ap40(prs: Sequence[PRPoint]) -> float:
    """Mean interpolated precision over the 40 recall levels, as a percentage."""
    return 100.0 * sum(interpolated_precision(prs)) / len(R40)


def ap40_frames(frames: Sequence, iou_threshold: float, view: str = BEV) -> Optional[float]:
    frames = list(frames)
    if sum(len(g) for _, g in frames) == 0:
        return None
    return ap40(pr_curve(frames, iou_threshold, view))


def e_cvpr(observations: Sequence, truth_xy: Sequence, radius: float = 2.5) -> Optional[float]:
    """Share of in-region vehicles claimed by a distinct observation within ``radius``.

    Each observation can vouch for one vehicle at most (nearest pairs first),
    so a single detection never counts twice. ``None`` for an empty region.
    """
    n = len(truth_xy)
    if n == 0:
        return None
    if not observations:
        return 0.0
    t = np.asarray(truth_xy, dtype=float).reshape(-1, 2)
    o = np.array([(ob.x, ob.y) for ob in observations], dtype=float)
    d = np.hypot(t[:, None, 0] - o[None, :, 0], t[:, None, 1] - o[None, :, 1])
    ti, oi = np.nonzero(d <= radius)
    order = np.lexsort((oi, ti, d[ti, oi]))
    used_t, used_o = set(), set()
    for k in order:
        a, b = int(ti[k]), int(oi[k])
        if a in used_t or b in used_o:
            continue
        used_t.add(a)
        used_o.add(b)
    return len(used_t) / n


def avg_delay(records: Iterable) -> Optional[float]:
    """Mean of ``(exit - spawn) - free_flow`` over ``(spawn, exit, free_flow)`` records."""
    vals = [(e - s) - ff for s, e, ff in records if e is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def mean_std(values: Iterable) -> tuple:
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.std(v))


@dataclass
class MetricsReport:
    ap: dict = field(default_factory=dict)       # (stage, view, threshold) -> value
    ecvpr_frames: list = field(default_factory=list)  # (frame, time, value)
    avg_delay_s: Optional[float] = None
    n_exited: int = 0

    @property
    def ecvpr_values(self) -> list:
        return [v for _, _, v in self.ecvpr_frames if v is not None]

    def row(self) -> dict:
        m, s = mean_std(self.ecvpr_values)
        row = {}
        for stage, suffix in (("post", ""), ("raw", "_raw")):
            for thr, tag in ((0.1, "01"), (0.01, "001")):
                for view in VIEWS:
                    row[f"ap40_{view}_{tag}{suffix}"] = self.ap.get((stage, view, thr))
        row["ecvpr_mean"] = m
        row["ecvpr_std"] = s
        row["avg_delay_s"] = self.avg_delay_s
        row["n_frames"] = len(self.ecvpr_frames)
        row["n_exited"] = self.n_exited
        return row


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return f"{v:.6f}"


def report_csv(rows: Sequence[dict], leading: Sequence[str] = ()) -> str:
    """CSV text with the report columns; absent values are empty cells."""
    cols = list(leading) + list(REPORT_COLUMNS) + list(EXTRA_COLUMNS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r.get(c) if c in leading else _cell(r.get(c)) for c in cols])
    return buf.getvalue()


def read_report_csv(text: str) -> list:
    """Rows as dicts; numeric cells become floats, empty cells ``None``."""
    return [{k: _parse_cell(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO(text))]


def _parse_cell(v: str):
    if v == "":
        return None
    try:
        return float(v)
    except ValueError:
        return v


def ecvpr_frames_csv(frames: Sequence) -> str:
    lines = ["frame,time_s,ecvpr"]
    for f, t, v in frames:
        if v is not None:
            lines.append(f"{f},{t:.1f},{v:.6f}")
    return "\n".join(lines) + "\n"


def ecvpr_histogram_csv(values: Sequence[float], bins: int = 20) -> str:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(0.0, 1.0))
    lines = ["bin_lo,bin_hi,count"]
    for k in range(bins):
        lines.append(f"{edges[k]:.2f},{edges[k + 1]:.2f},{int(counts[k])}")
    return "\n".join(lines) + "\n"
