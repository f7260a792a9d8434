"""Depth-map consistency filtering, point-cloud fusion, and the depth/cloud metric suite."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from raymvs.geometry import backproject_pixels, project_points

DEFAULT_PERCENT_X = (0.05, 0.1, 0.2)


@dataclass
class PointCloud:
    """World-space points with an optional per-point source view id."""

    points: np.ndarray
    source: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud has non-finite coordinates")
        if self.source is not None:
            self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)
            if self.source.shape[0] != self.points.shape[0]:
                raise ValueError("source ids must match the point count")

    @property
    def count(self):
        return self.points.shape[0]


@dataclass
class FilterThresholds:
    """Geometric consistency thresholds for depth filtering."""

    eps_px: float = 1.0
    eps_d: float = 0.01
    n_consist: int = 1

    def __post_init__(self):
        if self.eps_px <= 0 or self.eps_d <= 0 or self.n_consist < 1:
            raise ValueError("thresholds must be positive")


def _pixel_grid(h, w):
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def filter_depth(depths, cameras, thresholds=None):
    """Keep pixels whose depth reprojects consistently into other views.

    A pixel survives iff its 3D point, looked up in at least n_consist other
    views, reprojects back within eps_px pixels and with relative depth error
    below eps_d.

    Args:
        depths: [N, H, W] per-view depth maps, 0 marking missing pixels.
        cameras: list of N CameraView.
        thresholds: FilterThresholds; None uses the defaults.
    Returns:
        (filtered [N, H, W] depths with removed pixels zeroed, masks [N, H, W] bool).
    """
    depths = np.asarray(depths, dtype=np.float64)
    n = depths.shape[0]
    if n < 2 or len(cameras) != n:
        raise ValueError("need at least two views with matching cameras")
    t = thresholds or FilterThresholds()
    h, w = depths.shape[1:]
    grid = _pixel_grid(h, w)
    masks = np.zeros(depths.shape, dtype=bool)
    for i in range(n):
        d_i = depths[i].ravel()
        valid = d_i > 0
        if not valid.any():
            continue
        pts = backproject_pixels(grid[valid], d_i[valid], cameras[i])
        consist = np.zeros(int(valid.sum()), dtype=np.int64)
        for j in range(n):
            if j == i:
                continue
            uv_j, z_j = project_points(pts, cameras[j])
            xr = np.rint(uv_j[:, 0]).astype(np.int64)
            yr = np.rint(uv_j[:, 1]).astype(np.int64)
            inside = (z_j > 0) & (xr >= 0) & (xr < w) & (yr >= 0) & (yr < h)
            xc = np.clip(xr, 0, w - 1)
            yc = np.clip(yr, 0, h - 1)
            d_j = depths[j][yc, xc]
            usable = inside & (d_j > 0)
            back = backproject_pixels(
                np.stack([xc, yc], axis=1).astype(np.float64), d_j, cameras[j])
            uv_back, z_back = project_points(back, cameras[i])
            err_px = np.hypot(uv_back[:, 0] - grid[valid, 0],
                              uv_back[:, 1] - grid[valid, 1])
            rel_d = np.abs(z_back - d_i[valid]) / d_i[valid]
            consist += (usable & (err_px < t.eps_px) & (rel_d < t.eps_d))
        mask = np.zeros(h * w, dtype=bool)
        mask[valid] = consist >= t.n_consist
        masks[i] = mask.reshape(h, w)
    return depths * masks, masks


def fuse(depths, cameras, r_merge=0.01):
    """Backproject surviving pixels and merge near-duplicates by averaging.

    Points falling into the same r_merge-sized grid cell are averaged; the
    merged point keeps the view id of its first contributor.

    Args:
        depths: [N, H, W] filtered depth maps, 0 marking removed pixels.
        cameras: list of N CameraView.
        r_merge: merge cell size (world units).
    Returns:
        PointCloud.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if r_merge <= 0:
        raise ValueError("merge radius must be positive")
    h, w = depths.shape[1:]
    grid = _pixel_grid(h, w)
    all_pts, all_src = [], []
    for i, cam in enumerate(cameras):
        d = depths[i].ravel()
        valid = d > 0
        if not valid.any():
            continue
        all_pts.append(backproject_pixels(grid[valid], d[valid], cam))
        all_src.append(np.full(int(valid.sum()), i, dtype=np.int64))
    if not all_pts:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    pts = np.concatenate(all_pts, axis=0)
    src = np.concatenate(all_src, axis=0)
    cells = np.floor(pts / r_merge).astype(np.int64)
    _, first, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    sums = np.zeros((first.shape[0], 3))
    counts = np.zeros(first.shape[0])
    np.add.at(sums, inverse, pts)
    np.add.at(counts, inverse, 1.0)
    return PointCloud(sums / counts[:, None], src[first])


def median_spacing(points):
    """Median nearest-neighbor distance within a point set.

    Args:
        points: [M, 3] with M >= 2.
    Returns:
        float spacing.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] < 2:
        raise ValueError("spacing needs at least two points")
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.median(dist[:, 1]))


def _nn_distances(query, reference):
    dist, _ = cKDTree(reference).query(query)
    return dist


def accuracy_completeness(recon, gt, max_dist=None):
    """Mean clamped nearest-neighbor distances between two clouds.

    Accuracy measures recon against gt, completeness the reverse, and the
    overall score is their mean.

    Args:
        recon, gt: PointCloud, both nonempty.
        max_dist: distance clamp; None uses 10x the combined median spacing.
    Returns:
        (accuracy, completeness, overall).
    """
    if recon.count == 0 or gt.count == 0:
        raise ValueError("clouds must be nonempty")
    if max_dist is None:
        spacing = median_spacing(np.vstack([recon.points, gt.points]))
        # duplicate-heavy unions give zero spacing; skip clamping then
        max_dist = 10.0 * spacing if spacing > 0 else np.inf
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    acc = float(np.minimum(_nn_distances(recon.points, gt.points), max_dist).mean())
    comp = float(np.minimum(_nn_distances(gt.points, recon.points), max_dist).mean())
    return acc, comp, (acc + comp) / 2.0


def fscore(recon, gt, tau=None):
    """Precision/recall of cloud proximity at threshold tau, with harmonic mean.

    Args:
        recon, gt: PointCloud.
        tau: distance threshold; None uses 2x the gt median spacing.
    Returns:
        (precision, recall, fscore), all percentages in [0, 100].
    """
    if tau is None:
        tau = 2.0 * median_spacing(gt.points)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if recon.count == 0 or gt.count == 0:
        precision = 0.0
        recall = 0.0
    else:
        precision = 100.0 * float(np.mean(_nn_distances(recon.points, gt.points) < tau))
        recall = 100.0 * float(np.mean(_nn_distances(gt.points, recon.points) < tau))
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    """Depth and point-cloud evaluation values; unset groups stay None."""

    abs_rel: float = None
    sq_rel: float = None
    log10: float = None
    rmse: float = None
    rmse_log: float = None
    delta1: float = None
    delta2: float = None
    delta3: float = None
    percentage: dict = field(default=None)
    accuracy: float = None
    completeness: float = None
    overall: float = None
    precision: float = None
    recall: float = None
    fscore: float = None

    def to_dict(self):
        """Canonical label -> value mapping, skipping unset entries."""
        out = {}
        labels = (("AbsRel", self.abs_rel), ("SqRel", self.sq_rel),
                  ("Log10", self.log10), ("RMSE", self.rmse),
                  ("RMSELog", self.rmse_log), ("delta<1.25", self.delta1),
                  ("delta<1.25^2", self.delta2), ("delta<1.25^3", self.delta3))
        for label, value in labels:
            if value is not None:
                out[label] = value
        if self.percentage is not None:
            for x in sorted(self.percentage):
                out[f"Percentage@{x:g}"] = self.percentage[x]
        tail = (("accuracy", self.accuracy), ("completeness", self.completeness),
                ("overall", self.overall), ("precision", self.precision),
                ("recall", self.recall), ("fscore", self.fscore))
        for label, value in tail:
            if value is not None:
                out[label] = value
        return out


def depth_metrics(pred, gt, mask, x_list=DEFAULT_PERCENT_X):
    """Eight depth-error statistics plus Percentage@x over a pixel mask.

    Args:
        pred, gt: depth maps of matching shape; gt must be positive on mask.
        mask: bool mask of evaluated pixels.
        x_list: absolute-error thresholds for Percentage@x.
    Returns:
        MetricReport with the depth fields set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError("shape mismatch between depths and mask")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    d = pred[mask]
    g = gt[mask]
    if np.any(g <= 0) or np.any(d <= 0):
        raise ValueError("depths must be positive on the mask")
    diff = d - g
    ratio = np.maximum(d / g, g / d)
    report = MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        log10=float(np.mean(np.abs(np.log10(d) - np.log10(g)))),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        percentage={float(x): float(np.mean(np.abs(diff) < x)) for x in x_list},
    )
    return report


def save_report_text(path, report):
    """Write a MetricReport as JSON-style plain text."""
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def save_report_csv(path, report):
    """Write a MetricReport as a two-row CSV."""
    data = report.to_dict()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.keys())
        writer.writerow([f"{v:.17g}" for v in data.values()])


def load_report_text(path):
    """Read a JSON-style report back into a label -> value dict."""
    with open(path) as fh:
        return json.load(fh)


def save_ply(path, cloud):
    """Write a PointCloud as binary little-endian PLY."""
    has_src = cloud.source is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {cloud.count}",
              "property float x", "property float y", "property float z"]
    if has_src:
        header.append("property int source")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        xyz = cloud.points.astype("<f4")
        if has_src:
            rec = np.zeros(cloud.count, dtype=[("xyz", "<f4", 3), ("src", "<i4")])
            rec["xyz"] = xyz
            rec["src"] = cloud.source.astype("<i4")
            fh.write(rec.tobytes())
        else:
            fh.write(xyz.tobytes())


def load_ply(path):
    """Read a PLY written by save_ply back into a PointCloud."""
    blob = Path(path).read_bytes()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii").splitlines()
    count = 0
    has_src = False
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        if line == "property int source":
            has_src = True
    if has_src:
        rec = np.frombuffer(blob[end:], dtype=[("xyz", "<f4", 3), ("src", "<i4")],
                            count=count)
        return PointCloud(rec["xyz"].astype(np.float64), rec["src"].astype(np.int64))
    xyz = np.frombuffer(blob[end:], dtype="<f4", count=3 * count).reshape(-1, 3)
    return PointCloud(xyz.astype(np.float64))
