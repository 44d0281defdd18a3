"""Scan comparison metrics and report serialization."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .types import LidarScan


def _errors(pred, gt, mask):
    return np.abs(pred[mask] - gt[mask])


def range_metrics(pred: LidarScan, gt: LidarScan, which: str = "first"):
    """(MAE cm, MedAE cm, recall@50 %) over rays where both scans report that return."""
    _check_grids(pred, gt)
    if which == "first":
        p, g = pred.first_range, gt.first_range
        mask = ~pred.drop & ~gt.drop
    else:
        p, g = pred.second_range, gt.second_range
        mask = pred.two_return & gt.two_return & ~pred.drop & ~gt.drop
    mask &= np.isfinite(p) & np.isfinite(g)
    if not mask.any():
        raise ValueError(f"no rays with a {which} return in both scans")
    e = _errors(p, g, mask)
    return float(e.mean() * 100), float(np.median(e) * 100), float(np.mean(e < 0.5) * 100)


def intensity_mae(pred: LidarScan, gt: LidarScan, which: str = "first") -> Optional[float]:
    if which == "first":
        p, g = pred.first_intensity, gt.first_intensity
        mask = ~pred.drop & ~gt.drop
    else:
        p, g = pred.second_intensity, gt.second_intensity
        mask = pred.two_return & gt.two_return
    mask &= np.isfinite(p) & np.isfinite(g)
    return float(_errors(p, g, mask).mean()) if mask.any() else None


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance in cm: mean of both directed mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance needs two non-empty clouds")
    dab = cKDTree(b).query(a, k=1)[0]
    dba = cKDTree(a).query(b, k=1)[0]
    return float(0.5 * (dab.mean() + dba.mean()) * 100)


def chamfer_brute_force(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()) * 100)


def seg_metrics(pred_mask, gt_mask):
    """(recall %, precision %, IoU %) of the positive class; undefined values are None."""
    p = np.asarray(pred_mask, dtype=bool).ravel()
    g = np.asarray(gt_mask, dtype=bool).ravel()
    if p.shape != g.shape:
        raise ValueError("mask shapes differ")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    recall = 100.0 * tp / (tp + fn) if tp + fn else None
    precision = 100.0 * tp / (tp + fp) if tp + fp else None
    iou = 100.0 * tp / (tp + fp + fn) if tp + fp + fn else None
    return recall, precision, iou


def _check_grids(a: LidarScan, b: LidarScan):
    if a.pattern.shape != b.pattern.shape:
        raise ValueError(f"scan grids differ: {a.pattern.shape} vs {b.pattern.shape}")


@dataclass
class MetricsReport:
    range_mae_cm: Optional[float] = None
    range_medae_cm: Optional[float] = None
    chamfer_cm: Optional[float] = None
    range_recall50: Optional[float] = None
    second_seg_recall: Optional[float] = None
    second_seg_precision: Optional[float] = None
    second_recall50: Optional[float] = None
    second_mae_cm: Optional[float] = None
    second_medae_cm: Optional[float] = None
    intensity_mae_first: Optional[float] = None
    intensity_mae_second: Optional[float] = None
    drop_recall: Optional[float] = None
    drop_precision: Optional[float] = None
    drop_iou: Optional[float] = None
    n_scans: int = 0
    n_rays: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        d = {
            "range": {"mae_cm": self.range_mae_cm, "medae_cm": self.range_medae_cm, "chamfer_cm": self.chamfer_cm,
                      "recall50": self.range_recall50},
            "second_range": {"seg_recall": self.second_seg_recall, "seg_precision": self.second_seg_precision,
                             "recall50": self.second_recall50, "mae_cm": self.second_mae_cm,
                             "medae_cm": self.second_medae_cm},
            "intensity": {"mae_first": self.intensity_mae_first, "mae_second": self.intensity_mae_second},
            "raydrop": {"recall": self.drop_recall, "precision": self.drop_precision, "iou": self.drop_iou},
            "n_scans": self.n_scans,
            "n_rays": self.n_rays,
        }
        return json.dumps(d, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        r, s, i, k = d["range"], d["second_range"], d["intensity"], d["raydrop"]
        return cls(r["mae_cm"], r["medae_cm"], r["chamfer_cm"], r["recall50"], s["seg_recall"], s["seg_precision"],
                   s["recall50"], s["mae_cm"], s["medae_cm"], i["mae_first"], i["mae_second"], k["recall"],
                   k["precision"], k["iou"], d["n_scans"], d["n_rays"])

    def to_csv(self, scene: str = "scene") -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("scene",) + REPORT_COLUMNS)
        row = self.to_dict()
        wr.writerow([scene] + ["" if row[c] is None else f"{row[c]:.6g}" if isinstance(row[c], float) else row[c]
                               for c in REPORT_COLUMNS])
        return buf.getvalue()


REPORT_COLUMNS = tuple(f.name for f in fields(MetricsReport))


def _mean_or_none(values):
    v = [x for x in values if x is not None]
    return float(np.mean(v)) if v else None


def evaluate(pred_scans, gt_scans) -> MetricsReport:
    """Pool per-ray errors over all scan pairs; Chamfer is averaged per scan in the sensor frame."""
    pred_scans, gt_scans = list(pred_scans), list(gt_scans)
    if len(pred_scans) != len(gt_scans) or not gt_scans:
        raise ValueError("need equally many predicted and ground-truth scans")
    e1, e2, i1, i2, cds = [], [], [], [], []
    pd, gd, p2, g2 = [], [], [], []
    for p, g in zip(pred_scans, gt_scans):
        _check_grids(p, g)
        m1 = ~p.drop & ~g.drop & np.isfinite(p.first_range) & np.isfinite(g.first_range)
        e1.append(_errors(p.first_range, g.first_range, m1))
        m2 = p.two_return & g.two_return & m1 & np.isfinite(p.second_range) & np.isfinite(g.second_range)
        e2.append(_errors(p.second_range, g.second_range, m2))
        mi = m1 & np.isfinite(p.first_intensity) & np.isfinite(g.first_intensity)
        i1.append(_errors(p.first_intensity, g.first_intensity, mi))
        mi2 = m2 & np.isfinite(p.second_intensity) & np.isfinite(g.second_intensity)
        i2.append(_errors(p.second_intensity, g.second_intensity, mi2))
        pa, ga = p.points("first"), g.points("first")
        if len(pa) and len(ga):
            cds.append(chamfer(pa, ga))
        pd.append(p.drop.ravel()), gd.append(g.drop.ravel())
        p2.append((p.two_return & ~p.drop).ravel()), g2.append((g.two_return & ~g.drop).ravel())

    def stats(errs):
        e = np.concatenate(errs)
        if len(e) == 0:
            return None, None, None
        return float(e.mean() * 100), float(np.median(e) * 100), float(np.mean(e < 0.5) * 100)

    mae, medae, rec = stats(e1)
    mae2, medae2, rec2 = stats(e2)
    ii1, ii2 = np.concatenate(i1), np.concatenate(i2)
    sr, sp, _ = seg_metrics(np.concatenate(p2), np.concatenate(g2))
    dr, dp, di = seg_metrics(np.concatenate(pd), np.concatenate(gd))
    return MetricsReport(
        mae, medae, _mean_or_none(cds), rec, sr, sp, rec2, mae2, medae2,
        float(ii1.mean()) if len(ii1) else None, float(ii2.mean()) if len(ii2) else None,
        dr, dp, di, len(gt_scans), int(sum(g.pattern.size for g in gt_scans)),
    )
