"""Triple dataset layout, loading, view selection and a procedural generator.

Layout::

    root/{category}/{model_id}/gt.xyz
    root/{category}/{model_id}/partial.xyz
    root/{category}/{model_id}/render_00.img ... render_23.img

Renders are raw little-endian float32 depth maps behind a 16-byte header
(8-byte magic, uint32 width, uint32 height).
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .embedders import NUM_VIEWS, RenderedImage
from .geometry import GeometryError, PointCloud, normalize_unit, read_xyz, write_xyz

log = logging.getLogger(__name__)

GT_POINTS = 2048
IMG_MAGIC = b"MMCDEPTH"
IMG_SIZE = 224

KNOWN_CATEGORIES = ["airplane", "cabinet", "car", "chair", "lamp", "sofa", "table", "watercraft"]
HELDOUT_CATEGORIES = ["bench", "monitor", "speaker", "phone"]


class DatasetError(RuntimeError):
    pass


def seeded_rng(*parts) -> np.random.Generator:
    """RNG keyed by arbitrary values through sha256; stable across processes."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype="<u8"))


# render files ---------------------------------------------------------------

def write_render(path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(IMG_MAGIC + struct.pack("<II", w, h) + depth.tobytes())


def read_render(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != IMG_MAGIC:
        raise DatasetError(f"{path}: not a depth render")
    w, h = struct.unpack("<II", blob[8:16])
    if len(blob) != 16 + 4 * w * h:
        raise DatasetError(f"{path}: truncated render")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(h, w).copy()


def load_image(path, view_id: int = 0) -> RenderedImage:
    depth = read_render(path)
    if depth.shape != (IMG_SIZE, IMG_SIZE):
        raise DatasetError(f"{path}: expected {IMG_SIZE}x{IMG_SIZE}, got {depth.shape}")
    return RenderedImage(np.repeat(np.clip(depth, 0, 1)[None], 3, axis=0), view_id)


def render_depth(points: np.ndarray, view_id: int, size: int = IMG_SIZE) -> np.ndarray:
    """Orthographic depth image from azimuth 15 degrees * view_id.

    Near surfaces are bright; empty pixels are 0.
    """
    az = 2 * np.pi * view_id / NUM_VIEWS
    c, s = np.cos(az), np.sin(az)
    x = c * points[:, 0] + s * points[:, 2]
    z = -s * points[:, 0] + c * points[:, 2]
    y = points[:, 1]
    r = np.sqrt(3.0)
    u = np.clip(((x + r) / (2 * r) * size).astype(int), 0, size - 1)
    v = np.clip(((r - y) / (2 * r) * size).astype(int), 0, size - 1)
    near = 1.0 - (z + r) / (2 * r)
    img = np.zeros((size, size), dtype=np.float32)
    near = near.astype(np.float32)
    # 3x3 splat; max keeps the nearest surface per pixel
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            np.maximum.at(img, (np.clip(v + dv, 0, size - 1), np.clip(u + du, 0, size - 1)), near)
    return img


# procedural shapes ----------------------------------------------------------

def _box(center, size):
    return ("box", np.asarray(center, float), np.asarray(size, float))


def _cyl(center, radius, height, axis=1):
    return ("cyl", np.asarray(center, float), (float(radius), float(height), axis))


def _area(part) -> float:
    kind, _, dims = part
    if kind == "box":
        a, b, c = dims
        return 2 * (a * b + b * c + a * c)
    r, h, _ = dims
    return 2 * np.pi * r * h + 2 * np.pi * r * r


def _sample_part(part, n, rng) -> np.ndarray:
    kind, center, dims = part
    if kind == "box":
        a, b, c = dims
        faces = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, n, p=faces / faces.sum())
        p = rng.uniform(-0.5, 0.5, (n, 3))
        axis = face // 2
        p[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5)
        return center + p * dims
    r, h, axis = dims
    side = 2 * np.pi * r * h
    cap = np.pi * r * r
    which = rng.choice(3, n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    t = np.where(which == 0, rng.uniform(-h / 2, h / 2, n), np.where(which == 1, -h / 2, h / 2))
    local = np.stack([rad * np.cos(theta), t, rad * np.sin(theta)], axis=1)
    perm = {0: [1, 0, 2], 1: [0, 1, 2], 2: [0, 2, 1]}[axis]
    return center + local[:, perm]


def _parts_for(category: str, rng) -> list:
    j = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    if category == "chair":
        w, d, sh, bh = j(0.8, 1.0), j(0.8, 1.0), j(0.8, 1.0), j(0.8, 1.1)
        lt = j(0.06, 0.1)
        parts = [_box([0, sh, 0], [w, 0.08, d]), _box([0, sh + bh / 2, -d / 2 + 0.04], [w, bh, 0.08])]
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts.append(_box([sx * (w / 2 - lt), sh / 2, sz * (d / 2 - lt)], [lt, sh, lt]))
        if rng.uniform() < 0.5:
            for sx in (-1, 1):
                parts.append(_box([sx * w / 2, sh + 0.25, 0], [0.06, 0.06, d * 0.8]))
        return parts
    if category == "table":
        w, d, h = j(1.4, 2.0), j(0.8, 1.2), j(0.9, 1.1)
        parts = [_box([0, h, 0], [w, 0.08, d])]
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts.append(_cyl([sx * (w / 2 - 0.1), h / 2, sz * (d / 2 - 0.1)], 0.05, h))
        return parts
    if category == "lamp":
        h = j(1.2, 1.8)
        return [_cyl([0, 0.03, 0], j(0.25, 0.4), 0.06), _cyl([0, h / 2, 0], 0.04, h),
                _cyl([0, h, 0], j(0.25, 0.4), j(0.25, 0.4))]
    if category == "airplane":
        span, length = j(1.6, 2.2), j(1.8, 2.2)
        return [_cyl([0, 0, 0], 0.12, length, axis=2), _box([0, 0, 0.1], [span, 0.04, 0.35]),
                _box([0, 0.15, -length / 2 + 0.1], [0.6, 0.04, 0.2]),
                _box([0, 0.2, -length / 2 + 0.1], [0.04, 0.35, 0.2])]
    if category == "car":
        l, w = j(1.8, 2.2), j(0.8, 1.0)
        parts = [_box([0, 0.35, 0], [w, 0.35, l]), _box([0, 0.65, -0.1], [w * 0.9, 0.3, l * 0.5])]
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts.append(_cyl([sx * w / 2, 0.15, sz * l / 3], 0.15, 0.1, axis=0))
        return parts
    # generic block assembly for the remaining categories
    parts = [_box([0, 0.5, 0], [j(0.6, 1.2), j(0.6, 1.2), j(0.4, 1.0)])]
    for _ in range(int(rng.integers(1, 3))):
        parts.append(_box(rng.uniform(-0.4, 0.4, 3) + [0, 0.5, 0], rng.uniform(0.1, 0.4, 3)))
    return parts


def sample_shape(category: str, rng, n: int = GT_POINTS) -> PointCloud:
    parts = _parts_for(category, rng)
    areas = np.array([_area(p) for p in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = np.concatenate([_sample_part(p, k, rng) for p, k in zip(parts, counts) if k])
    return normalize_unit(pts)


def crop_half_space(cloud: PointCloud, rng) -> PointCloud:
    """Remove the points beyond a random plane, 25-50% of the cloud."""
    pts = cloud.points
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    n = pts.shape[0]
    remove = int(rng.integers(int(np.ceil(0.25 * n)), int(0.5 * n) + 1))
    order = np.argsort(pts @ direction, kind="stable")
    keep = np.sort(order[: n - remove])
    return PointCloud(pts[keep])


def synth_generate(root, n_models: int, categories, seed: int = 0) -> Path:
    """Write ``n_models`` procedural models per category under ``root``."""
    root = Path(root)
    for category in categories:
        for i in range(n_models):
            model_id = f"{category}_{i:04d}"
            rng = seeded_rng("synth", seed, category, i)
            gt = sample_shape(category, rng)
            partial = crop_half_space(gt, rng)
            d = root / category / model_id
            d.mkdir(parents=True, exist_ok=True)
            write_xyz(d / "gt.xyz", gt)
            write_xyz(d / "partial.xyz", partial)
            for v in range(NUM_VIEWS):
                write_render(d / f"render_{v:02d}.img", render_depth(gt.points, v))
    return root


def directory_hash(root) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


# splits and records ---------------------------------------------------------

@dataclass
class SplitSpec:
    train_categories: list[str] = field(default_factory=lambda: list(KNOWN_CATEGORIES))
    eval_categories: list[str] = field(default_factory=lambda: list(KNOWN_CATEGORIES))
    heldout_categories: list[str] = field(default_factory=lambda: list(HELDOUT_CATEGORIES))
    ids: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train_categories) & set(self.heldout_categories)
        if overlap:
            raise ValueError(f"train and held-out categories overlap: {sorted(overlap)}")

    def categories(self, subset: str) -> list[str]:
        return {"train": self.train_categories, "eval": self.eval_categories,
                "heldout": self.heldout_categories}[subset]

    @classmethod
    def from_id_file(cls, path, **kwargs) -> "SplitSpec":
        """One model id per line; ids are grouped by their category prefix dir lookup later."""
        ids = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(ids={"*": ids}, **kwargs)


@dataclass
class TripleRecord:
    model_id: str
    category: str
    partial: PointCloud
    gt: PointCloud
    renders: list[Path]
    text: Optional[str] = None

    def validate(self, known_categories=None):
        if self.gt.count != GT_POINTS:
            raise DatasetError(f"{self.model_id}: gt has {self.gt.count} points, expected {GT_POINTS}")
        if len(self.renders) != NUM_VIEWS:
            raise DatasetError(f"{self.model_id}: expected {NUM_VIEWS} renders, got {len(self.renders)}")
        if known_categories is not None and self.category not in known_categories:
            raise DatasetError(f"{self.model_id}: unknown category {self.category!r}")
        return self


def load_corpus_text(path) -> dict[str, str]:
    texts = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                entry = json.loads(line)
                texts[entry["model_id"]] = entry["description"]
    return texts


class TripleLoader:
    """Lazy record stream with a bounded prefetch queue.

    Malformed records are skipped and logged; skipping more than
    ``max(1, max_skip_rate * total)`` records is a hard failure.
    """

    def __init__(self, root, split: SplitSpec, subset: str = "train", corpus=None,
                 prefetch: int = 4, max_skip_rate: float = 0.01, known_categories=None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root {root} does not exist")
        self.split = split
        self.subset = subset
        self.texts = load_corpus_text(corpus) if corpus else {}
        self.prefetch = max(1, prefetch)
        self.max_skip_rate = max_skip_rate
        self.known_categories = known_categories
        self.missing_text = 0
        self.skipped: list[str] = []
        self.peak_buffered = 0

    def model_dirs(self) -> list[tuple[str, Path]]:
        out = []
        wanted_any = self.split.ids.get("*")
        for category in self.split.categories(self.subset):
            cdir = self.root / category
            if not cdir.is_dir():
                continue
            wanted = self.split.ids.get(category, wanted_any)
            for d in sorted(p for p in cdir.iterdir() if p.is_dir()):
                if wanted is None or d.name in wanted:
                    out.append((category, d))
        return out

    def _build(self, category, d) -> TripleRecord:
        renders = [d / f"render_{v:02d}.img" for v in range(NUM_VIEWS)]
        missing = [r.name for r in renders if not r.exists()]
        if missing:
            raise DatasetError(f"{d}: missing renders {missing[:3]}")
        text = self.texts.get(d.name)
        if self.texts and text is None:
            self.missing_text += 1
        rec = TripleRecord(d.name, category, read_xyz(d / "partial.xyz"), read_xyz(d / "gt.xyz"), renders, text)
        return rec.validate(self.known_categories)

    def _produce(self, dirs, q: queue.Queue, stop: threading.Event):
        try:
            for category, d in dirs:
                if stop.is_set():
                    return
                try:
                    item = self._build(category, d)
                except (GeometryError, DatasetError, OSError) as exc:
                    log.warning("skipping record", extra={"model_dir": str(d), "error": str(exc)})
                    item = ("skip", str(d), str(exc))
                q.put(item)
            q.put(None)
        except BaseException as exc:  # pragma: no cover - surfaced in consumer
            q.put(("error", exc))

    def __iter__(self) -> Iterator[TripleRecord]:
        dirs = self.model_dirs()
        allowed = max(1, int(self.max_skip_rate * len(dirs)))
        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        worker = threading.Thread(target=self._produce, args=(dirs, q, stop), daemon=True)
        worker.start()
        try:
            while True:
                self.peak_buffered = max(self.peak_buffered, q.qsize())
                item = q.get()
                if item is None:
                    return
                if isinstance(item, tuple):
                    if item[0] == "error":
                        raise item[1]
                    self.skipped.append(item[1])
                    if len(self.skipped) > allowed:
                        raise DatasetError(
                            f"skipped {len(self.skipped)} of {len(dirs)} records (limit {allowed})")
                    continue
                yield item
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    worker.join(0.01)


def load_triples(root, split: SplitSpec, corpus=None, subset: str = "train", **kwargs) -> TripleLoader:
    return TripleLoader(root, split, subset, corpus, **kwargs)


def pick_view(record: TripleRecord, seed: int = 0, epoch: int = 0, train: bool = True) -> RenderedImage:
    """Uniform random view per (model, epoch) in training; view 0 in evaluation."""
    view = int(seeded_rng("view", seed, record.model_id, epoch).integers(0, NUM_VIEWS)) if train else 0
    return load_image(record.renders[view], view)
