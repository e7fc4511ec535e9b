"""Rotated BEV IoU and depth-binned localization reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, bottom_points

EPS_EDGE = 1e-12

DEFAULT_EDGES = (0.0, 10.0, 20.0, 30.0, math.inf)


def box_polygon(box: Box3D) -> np.ndarray:
    """BEV footprint corners, counter-clockwise, shape (4, 2)."""
    return bottom_points(box)[1:]


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_convex(subject, clip):
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        e0, e1 = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        prev = inp[-1]
        prev_in = _cross(e0, e1, prev) >= -EPS_EDGE
        for cur in inp:
            cur_in = _cross(e0, e1, cur) >= -EPS_EDGE
            if cur_in != prev_in:
                # intersection of segment prev-cur with the clip line
                dp = _cross(e0, e1, prev)
                dc = _cross(e0, e1, cur)
                s = dp / (dp - dc)
                out.append((prev[0] + s * (cur[0] - prev[0]), prev[1] + s * (cur[1] - prev[1])))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out, dtype=float).reshape(-1, 2)


def rotated_bev_iou(a: Box3D, b: Box3D) -> float:
    """Exact IoU of the two BEV footprints."""
    pa, pb = box_polygon(a), box_polygon(b)
    inter = max(polygon_area(clip_convex(pa, pb)), 0.0)
    union = a.length * a.width + b.length * b.width - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def center_error(gt: Box3D, pred: Box3D) -> float:
    return math.hypot(gt.center_x - pred.center_x, gt.center_y - pred.center_y)


def _bin_label(lo, hi):
    if math.isinf(hi):
        return f">{lo:g}"
    return f"{lo:g}-{hi:g}"


@dataclass
class DepthBinnedReport:
    """Per-depth-bin BEV center error and IoU for one configuration.

    Empty bins have count 0 and ``None`` statistics.
    """

    config: str
    edges: list
    counts: list
    mean_error: list
    median_error: list
    mean_iou: list
    meta: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [_bin_label(lo, hi) for lo, hi in zip(self.edges[:-1], self.edges[1:])]

    def rows(self):
        """One dict per bin, the unit of the results file."""
        out = []
        for i, (lo, hi) in enumerate(zip(self.edges[:-1], self.edges[1:])):
            out.append({
                "config": self.config,
                "bin_lo": lo,
                "bin_hi": hi,
                "count": self.counts[i],
                "mean_error": self.mean_error[i],
                "median_error": self.median_error[i],
                "mean_iou": self.mean_iou[i],
            })
        return out


def binned_errors(results, edges=DEFAULT_EDGES, config: str = "") -> DepthBinnedReport:
    """Aggregate per-object results into half-open depth bins ``[lo, hi)``.

    Args:
        results: iterable of ``(gt, pred, depth)`` with ``gt``/``pred``
            :class:`Box3D` and ``depth`` the ground-truth forward distance.
        edges: increasing bin edges; the last may be ``inf``.

    Raises:
        ValueError: if an object's depth falls outside ``[edges[0], edges[-1])``.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges[:-1], edges[1:])):
        raise ValueError(f"bin edges must be strictly increasing, got {edges}")
    nb = len(edges) - 1
    errs = [[] for _ in range(nb)]
    ious = [[] for _ in range(nb)]
    for gt, pred, depth in results:
        i = int(np.searchsorted(edges, depth, side="right")) - 1
        if i < 0 or i >= nb:
            raise ValueError(f"depth {depth} outside bin edges {edges}")
        errs[i].append(center_error(gt, pred))
        ious[i].append(rotated_bev_iou(gt, pred))
    return DepthBinnedReport(
        config=config,
        edges=edges,
        counts=[len(e) for e in errs],
        mean_error=[float(np.mean(e)) if e else None for e in errs],
        median_error=[float(np.median(e)) if e else None for e in errs],
        mean_iou=[float(np.mean(v)) if v else None for v in ious],
    )


RESULT_FIELDS = ("config", "bin_lo", "bin_hi", "count", "mean_error", "median_error", "mean_iou")


def write_results_csv(reports, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                            for k, v in row.items()})


def read_results_csv(path) -> list:
    """Inverse of :func:`write_results_csv`; configs keep file order."""
    by_config = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            missing = [k for k in RESULT_FIELDS if k not in row]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            by_config.setdefault(row["config"], []).append(row)
    reports = []
    for name, rows in by_config.items():
        opt = lambda s: None if s == "" else float(s)  # noqa: E731
        edges = [float(rows[0]["bin_lo"])] + [float(r["bin_hi"]) for r in rows]
        reports.append(DepthBinnedReport(
            config=name,
            edges=edges,
            counts=[int(r["count"]) for r in rows],
            mean_error=[opt(r["mean_error"]) for r in rows],
            median_error=[opt(r["median_error"]) for r in rows],
            mean_iou=[opt(r["mean_iou"]) for r in rows],
        ))
    return reports


def format_table(reports, metric: str = "mean_error") -> str:
    """Depth-range comparison table: one row per config, one column per bin."""
    if not reports:
        return ""
    titles = {
        "mean_error": "mean BEV center error (m)",
        "median_error": "median BEV center error (m)",
        "mean_iou": "mean BEV IoU",
        "counts": "objects",
    }
    labels = reports[0].labels
    name_w = max(len("config"), *(len(r.config) for r in reports))
    col_w = max(9, *(len(l) for l in labels))
    lines = [f"{titles.get(metric, metric)}  |  depth range (m)"]
    lines.append(f"{'config':<{name_w}} | " + " | ".join(f"{l:>{col_w}}" for l in labels))
    lines.append("-" * len(lines[-1]))
    for rep in reports:
        if rep.labels != labels:
            raise ValueError("all reports must share bin edges")
        vals = rep.counts if metric == "counts" else getattr(rep, metric)
        cells = []
        for v in vals:
            if v is None:
                cells.append(f"{'-':>{col_w}}")
            elif isinstance(v, int):
                cells.append(f"{v:>{col_w}d}")
            else:
                cells.append(f"{v:>{col_w}.4f}")
        lines.append(f"{rep.config:<{name_w}} | " + " | ".join(cells))
    return "\n".join(lines)


def format_report(reports) -> str:
    """All metric tables; distances stand in for AP since there is no detector."""
    return "\n\n".join(format_table(reports, m)
                       for m in ("mean_error", "median_error", "mean_iou", "counts"))
