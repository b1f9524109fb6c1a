"""Point-cloud containers, sampling, nearest neighbours and completion metrics.

All metric arithmetic is float64. The torch loss used for training lives in
:func:`chamfer_loss` and mirrors :func:`chamfer_distance` term for term.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Base class for invalid geometric input."""


class EmptyInputError(GeometryError):
    pass


class InvalidInputError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """Ordered (N, 3) float64 point set."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"expected (N, 3) points, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyInputError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise InvalidInputError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.count


def _as_array(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def bbox_transform(cloud) -> tuple[np.ndarray, float]:
    """Return (center, scale) mapping the bbox to a centered unit half-extent."""
    pts = _as_array(cloud)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if half <= 0.0:
        raise DegenerateGeometryError("all points are identical")
    return (lo + hi) / 2.0, half


def apply_transform(cloud, center: np.ndarray, scale: float) -> PointCloud:
    return PointCloud((_as_array(cloud) - center) / scale)


def normalize_unit(cloud) -> PointCloud:
    """Center the bounding box at the origin with maximum half-extent 1."""
    center, scale = bbox_transform(cloud)
    return apply_transform(cloud, center, scale)


def _nn_index(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # kd-tree distances are sqrt'ed; only the argmin is kept and the
    # squared distance is recomputed from coordinates below
    _, idx = cKDTree(b).query(a, k=1)
    return np.asarray(idx, dtype=np.int64)


def nn_sq_dists(a, b) -> np.ndarray:
    """Squared distance from every point of ``a`` to its nearest point in ``b``."""
    a, b = _as_array(a), _as_array(b)
    diff = a - b[_nn_index(a, b)]
    return np.einsum("ij,ij->i", diff, diff)


def nn_sq_dists_brute(a, b) -> np.ndarray:
    """O(N*M) reference for :func:`nn_sq_dists`."""
    a, b = _as_array(a), _as_array(b)
    out = np.empty(a.shape[0])
    for i, p in enumerate(a):
        diff = b - p
        out[i] = np.einsum("ij,ij->i", diff, diff).min()
    return out


def chamfer_distance(pred, gt) -> float:
    """Symmetric Chamfer distance: sum of the two mean nearest squared distances."""
    pred, gt = _as_array(pred), _as_array(gt)
    return float(nn_sq_dists(pred, gt).mean() + nn_sq_dists(gt, pred).mean())


def chamfer_distance_grad(pred, gt) -> np.ndarray:
    """Gradient of :func:`chamfer_distance` with respect to ``pred`` coordinates.

    Valid wherever every nearest-neighbour assignment is unique.
    """
    pred, gt = _as_array(pred), _as_array(gt)
    grad = np.zeros_like(pred)
    fwd = _nn_index(pred, gt)
    grad += 2.0 * (pred - gt[fwd]) / pred.shape[0]
    bwd = _nn_index(gt, pred)
    np.add.at(grad, bwd, 2.0 * (pred[bwd] - gt) / gt.shape[0])
    return grad


def fscore(pred, gt, tau: float = 0.001) -> float:
    """F-Score at Euclidean distance threshold ``tau``."""
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    pred, gt = _as_array(pred), _as_array(gt)
    tau_sq = tau * tau
    precision = float((nn_sq_dists(pred, gt) <= tau_sq).mean())
    recall = float((nn_sq_dists(gt, pred) <= tau_sq).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def farthest_point_indices(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    n = points.shape[0]
    idx = np.empty(k, dtype=np.int64)
    idx[0] = start
    dist = np.full(n, np.inf)
    for i in range(1, k):
        diff = points - points[idx[i - 1]]
        dist = np.minimum(dist, np.einsum("ij,ij->i", diff, diff))
        idx[i] = int(np.argmax(dist))
    return idx


def resample(cloud, target: int, method: str = "random", seed: int = 0, start: int = 0) -> PointCloud:
    """Resize a cloud to exactly ``target`` points.

    Downsampling picks a subset (random permutation prefix, or farthest-point
    from ``start``); upsampling keeps every point once and fills the rest by
    seeded sampling with replacement.
    """
    if target <= 0:
        raise ValueError(f"target must be positive, got {target}")
    if method not in ("random", "farthest-point"):
        raise ValueError(f"unknown resample method {method!r}")
    pts = _as_array(cloud)
    n = pts.shape[0]
    rng = np.random.default_rng(seed)
    if target <= n:
        if method == "farthest-point":
            idx = farthest_point_indices(pts, target, start)
        else:
            idx = rng.permutation(n)[:target]
    else:
        idx = np.concatenate([np.arange(n), rng.integers(0, n, target - n)])
    return PointCloud(pts[idx])


def chamfer_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Differentiable batched Chamfer distance; (B, N, 3) x (B, M, 3) -> (B,)."""
    if pred.dim() == 2:
        return chamfer_loss(pred[None], gt[None])[0]
    # argmins are piecewise constant, so they are found off-graph with a
    # kd-tree; gradients flow through the gathered exact squared distances
    p_np = pred.detach().cpu().double().numpy()
    g_np = gt.detach().cpu().double().numpy()
    fwd = np.stack([_nn_index(p, g) for p, g in zip(p_np, g_np)])
    bwd = np.stack([_nn_index(g, p) for p, g in zip(p_np, g_np)])
    fwd = torch.as_tensor(fwd, device=pred.device)
    bwd = torch.as_tensor(bwd, device=pred.device)
    near_gt = torch.gather(gt, 1, fwd[..., None].expand(-1, -1, 3))
    near_pred = torch.gather(pred, 1, bwd[..., None].expand(-1, -1, 3))
    return ((pred - near_gt) ** 2).sum(-1).mean(1) + ((gt - near_pred) ** 2).sum(-1).mean(1)


def read_xyz(path) -> PointCloud:
    """Load whitespace separated XYZ text, one point per line."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise InvalidInputError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
    return PointCloud(np.array(rows).reshape(-1, 3))


def write_xyz(path, cloud) -> None:
    np.savetxt(path, _as_array(cloud), fmt="%.9g")


@dataclass
class MetricReport:
    """Per-category mean CD (x1e3) and F-Score with their unweighted mean."""

    per_category: dict[str, tuple[float, float]]
    sample_count: dict[str, int]
    tau: float = 0.001
    header: dict[str, str] = field(default_factory=dict)

    @property
    def mean(self) -> tuple[float, float]:
        rows = list(self.per_category.values())
        if not rows:
            return (0.0, 0.0)
        return (float(np.mean([r[0] for r in rows])), float(np.mean([r[1] for r in rows])))

    @classmethod
    def from_samples(cls, samples, tau=0.001, header=None) -> "MetricReport":
        """Build from an iterable of (category, cd, fscore) per-sample values."""
        acc: dict[str, list[tuple[float, float]]] = {}
        for category, cd, fs in samples:
            acc.setdefault(category, []).append((cd, fs))
        per_category = {
            cat: (1000.0 * float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
            for cat, vals in sorted(acc.items())
        }
        counts = {cat: len(vals) for cat, vals in sorted(acc.items())}
        return cls(per_category, counts, tau, dict(header or {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in self.header.items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "mean_cd_e3", "fscore", "n"])
        for cat, (cd, fs) in self.per_category.items():
            writer.writerow([cat, repr(cd), repr(fs), self.sample_count[cat]])
        cd, fs = self.mean
        writer.writerow(["mean", repr(cd), repr(fs), sum(self.sample_count.values())])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        header = {}
        body = []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                header[key] = value
            else:
                body.append(line)
        per_category, counts = {}, {}
        tau = float(header.get("tau", 0.001))
        for row in csv.DictReader(body):
            if row["category"] == "mean":
                continue
            per_category[row["category"]] = (float(row["mean_cd_e3"]), float(row["fscore"]))
            counts[row["category"]] = int(row["n"])
        return cls(per_category, counts, tau, header)
