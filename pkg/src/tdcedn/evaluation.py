"""Boundary benchmark: NMS thinning, tolerance matching, PR sweep, ODS/OIS/AP.

Precision and recall are always computed from integer match counts summed
over images; ODS picks the best single threshold, OIS lets every image pick
its own, and AP integrates the precision envelope over recall.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import consensus, load_gt
from .inference import import_probmap

TOLERANCE_FRAC = 0.0075
N_THRESHOLDS = 99
_FLAT_REL = 1e-9


@dataclass
class MatchConfig:
    tolerance_frac: float = TOLERANCE_FRAC
    n_thresholds: int = N_THRESHOLDS
    tolerance_px: float | None = None

    def __post_init__(self):
        if self.tolerance_frac <= 0 or (self.tolerance_px is not None and self.tolerance_px <= 0):
            raise ValueError("match tolerance must be positive")
        if self.n_thresholds < 1:
            raise ValueError("need at least one threshold")

    @property
    def thresholds(self) -> np.ndarray:
        n = self.n_thresholds
        return np.arange(1, n + 1) / (n + 1)

    def tolerance(self, hw: tuple[int, int]) -> float:
        if self.tolerance_px is not None:
            return self.tolerance_px
        return self.tolerance_frac * float(np.hypot(*hw))


@dataclass
class EvalRecord:
    id: str
    thresholds: np.ndarray
    matched_pred: np.ndarray
    total_pred: np.ndarray
    matched_gt: np.ndarray
    total_gt: np.ndarray


@dataclass
class Summary:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    curve: list = field(default_factory=list)


def nms_thin(prob: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Keep only pixels that are ridge maxima across the local edge normal.

    The normal is the gradient direction of the Gaussian-smoothed map; a
    pixel survives if it is >= both bilinear neighbours one pixel away along
    it. Flat neighbourhoods, where the gradient is negligible next to the
    smoothed value itself, compare against themselves and survive. Surviving
    values are copied unchanged; the rest become 0.
    """
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-D map, got {p.shape}")
    gy = ndimage.gaussian_filter(p, sigma, order=(1, 0), mode="nearest")
    gx = ndimage.gaussian_filter(p, sigma, order=(0, 1), mode="nearest")
    level = np.abs(ndimage.gaussian_filter(p, sigma, mode="nearest"))
    mag = np.hypot(gx, gy)
    # relative test: decaying tails of a ridge are not plateaus however small they are
    flat = mag <= _FLAT_REL * level
    safe = np.where(flat, 1.0, mag)
    uy = np.where(flat, 0.0, gy / safe)
    ux = np.where(flat, 0.0, gx / safe)
    yy, xx = np.mgrid[0 : p.shape[0], 0 : p.shape[1]].astype(np.float64)
    ahead = ndimage.map_coordinates(p, [yy + uy, xx + ux], order=1, mode="nearest")
    behind = ndimage.map_coordinates(p, [yy - uy, xx - ux], order=1, mode="nearest")
    keep = (p >= ahead) & (p >= behind)
    return np.where(keep, np.asarray(prob), 0).astype(np.asarray(prob).dtype)


def match_boundaries(pred_binary, gt_binary, tolerance: float, scores=None) -> tuple[int, int]:
    """Greedy one-to-one matching within ``tolerance`` pixels (Euclidean).

    Predicted pixels are visited by descending ``scores`` (row-major among
    equals, or purely row-major without scores); each takes the nearest
    still-unmatched ground-truth pixel in range. Returns
    ``(matched_pred, matched_gt)``.
    """
    pred_binary = np.asarray(pred_binary) > 0
    gt_binary = np.asarray(gt_binary) > 0
    if pred_binary.shape != gt_binary.shape:
        raise ValueError(f"shape mismatch {pred_binary.shape} vs {gt_binary.shape}")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    pred_pts = np.argwhere(pred_binary)
    gt_pts = np.argwhere(gt_binary)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0, 0
    if scores is not None:
        s = np.asarray(scores)[pred_binary]
        pred_pts = pred_pts[np.argsort(-s, kind="stable")]
    tree = cKDTree(gt_pts)
    candidates = tree.query_ball_point(pred_pts, r=tolerance)
    taken = np.zeros(len(gt_pts), dtype=bool)
    matched = 0
    for pt, cand in zip(pred_pts, candidates):
        if not cand:
            continue
        cand = np.asarray(sorted(cand))
        cand = cand[~taken[cand]]
        if cand.size == 0:
            continue
        d2 = ((gt_pts[cand] - pt) ** 2).sum(axis=1)
        j = cand[int(np.argmin(d2))]
        taken[j] = True
        matched += 1
    return matched, matched


def evaluate_image(thinned, gt, cfg: MatchConfig | None = None, image_id: str = "") -> EvalRecord:
    cfg = cfg or MatchConfig()
    thinned = np.asarray(thinned, dtype=np.float64)
    gt = np.asarray(gt) > 0
    if thinned.shape != gt.shape:
        raise ValueError(f"prediction {thinned.shape} and ground truth {gt.shape} differ in size")
    tol = cfg.tolerance(gt.shape)
    ts = cfg.thresholds
    mp, tp, mg = (np.zeros(len(ts), dtype=np.int64) for _ in range(3))
    for i, t in enumerate(ts):
        binary = thinned >= t
        mp[i], mg[i] = match_boundaries(binary, gt, tol, scores=thinned)
        tp[i] = np.count_nonzero(binary)
    tg = np.full(len(ts), np.count_nonzero(gt), dtype=np.int64)
    return EvalRecord(image_id, ts, mp, tp, mg, tg)


def pr_sweep(thinned_preds: Sequence, gts: Sequence, cfg: MatchConfig | None = None, ids=None) -> list[EvalRecord]:
    if len(thinned_preds) == 0:
        raise ValueError("empty evaluation set")
    if len(thinned_preds) != len(gts):
        raise ValueError("predictions and ground truths are not aligned")
    ids = ids or [str(i) for i in range(len(gts))]
    return [evaluate_image(p, g, cfg, i) for p, g, i in zip(thinned_preds, gts, ids)]


def precision_recall(mp, tp, mg, tg):
    """Precision (1 when nothing is predicted) and recall (0 without ground truth)."""
    mp, tp, mg, tg = (np.asarray(v, dtype=np.float64) for v in (mp, tp, mg, tg))
    p = np.divide(mp, tp, out=np.ones_like(mp), where=tp > 0)
    r = np.divide(mg, tg, out=np.zeros_like(mg), where=tg > 0)
    return p, r


def f_measure(p, r):
    p, r = np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def aggregate(records: Sequence[EvalRecord]):
    """Dataset-level ``(precision, recall, f)`` per threshold."""
    mp = sum(r.matched_pred for r in records)
    tp = sum(r.total_pred for r in records)
    mg = sum(r.matched_gt for r in records)
    tg = sum(r.total_gt for r in records)
    if not np.any(tp) and not np.any(tg):
        z = np.zeros(len(records[0].thresholds))
        return z, z.copy(), z.copy()
    p, r = precision_recall(mp, tp, mg, tg)
    return p, r, f_measure(p, r)


def f_for_assignment(records: Sequence[EvalRecord], choice: Sequence[int]) -> float:
    """Dataset F-measure when image ``i`` is binarized at threshold index ``choice[i]``."""
    mp = sum(int(r.matched_pred[c]) for r, c in zip(records, choice))
    tp = sum(int(r.total_pred[c]) for r, c in zip(records, choice))
    mg = sum(int(r.matched_gt[c]) for r, c in zip(records, choice))
    tg = sum(int(r.total_gt[c]) for r, c in zip(records, choice))
    if tp == 0 and tg == 0:
        return 0.0
    p, r = precision_recall(mp, tp, mg, tg)
    return float(f_measure(p, r))


def average_precision(p, r) -> float:
    """Trapezoidal area under the recall-sorted curve of the running-max precision envelope."""
    p, r = np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64)
    order = np.argsort(r, kind="stable")
    r, p = r[order], p[order]
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum(0.5 * (envelope[1:] + envelope[:-1]) * np.diff(r)))


def ods_ois_ap(records: Sequence[EvalRecord]) -> Summary:
    if len(records) == 0:
        raise ValueError("no evaluation records")
    p, r, f = aggregate(records)
    best = int(np.argmax(f))
    ods = float(f[best])
    choice = []
    for rec in records:
        pi, ri = precision_recall(rec.matched_pred, rec.total_pred, rec.matched_gt, rec.total_gt)
        choice.append(int(np.argmax(f_measure(pi, ri))))
    ois = f_for_assignment(records, choice)
    ap = average_precision(p, r) if np.any(p) or np.any(r) else 0.0
    ts = records[0].thresholds
    curve = [(float(t), float(a), float(b), float(c)) for t, a, b, c in zip(ts, p, r, f)]
    return Summary(ods, ois, ap, float(ts[best]), curve)


def emit_pr_csv(records: Sequence[EvalRecord], path) -> Summary:
    """Write ``threshold,precision,recall,fmeasure`` rows and an ``ODS,OIS,AP`` footer."""
    summary = ods_ois_ap(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "fmeasure"])
        for row in summary.curve:
            w.writerow([repr(v) for v in row])
        w.writerow(["ODS", "OIS", "AP"])
        w.writerow([repr(summary.ods), repr(summary.ois), repr(summary.ap)])
    return summary


def read_pr_csv(path) -> tuple[list[tuple[float, float, float, float]], tuple[float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["threshold", "precision", "recall", "fmeasure"] or rows[-2] != ["ODS", "OIS", "AP"]:
        raise ValueError(f"{path}: not a PR curve file")
    curve = [tuple(float(v) for v in row) for row in rows[1:-2]]
    ods, ois, ap = (float(v) for v in rows[-1])
    return curve, (ods, ois, ap)


def evaluate_dir(pred_dir, entries, cfg: MatchConfig | None = None, consensus_policy="all", thin: bool = True):
    """Load ``<pred_dir>/<id>.pgm`` maps for manifest entries and sweep them."""
    preds, gts, ids = [], [], []
    for e in entries:
        path = Path(pred_dir) / f"{e.id}.pgm"
        if not path.exists():
            raise FileNotFoundError(f"missing prediction {path}")
        prob = import_probmap(path)
        preds.append(nms_thin(prob) if thin else prob)
        gts.append(consensus([load_gt(p) for p in e.gt_paths], consensus_policy))
        ids.append(e.id)
    return pr_sweep(preds, gts, cfg, ids)
