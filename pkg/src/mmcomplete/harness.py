"""Training loop, evaluation, ablation runs and single-shape completion."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import torch

from . import checkpoint as ckpt
from .config import TrainConfig
from .data import TripleRecord, load_image, load_triples, pick_view, seeded_rng
from .embedders import EmbedderBackend, RenderedImage, TextPrompt, build_prompt, make_embedder
from .fusion import CompletionModel, forward
from .geometry import (
    MetricReport, PointCloud, apply_transform, bbox_transform, chamfer_distance, chamfer_loss,
    fscore, read_xyz, resample, write_xyz,
)

log = logging.getLogger(__name__)

LEDGER_NAME = "ledger.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunLedger:
    """Append-only record of a training run. Paths are relative to the run dir."""

    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)

    def comparable(self) -> dict:
        """Ledger content minus wall-clock timings."""
        d = asdict(self)
        d["epochs"] = [{k: v for k, v in e.items() if k != "wall_clock"} for e in self.epochs]
        return d

    def save(self, run_dir):
        tmp = Path(run_dir) / (LEDGER_NAME + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1))
        tmp.replace(Path(run_dir) / LEDGER_NAME)

    @classmethod
    def load(cls, run_dir) -> "RunLedger":
        return cls(**json.loads((Path(run_dir) / LEDGER_NAME).read_text()))

    def verify(self, run_dir) -> None:
        for c in self.checkpoints:
            path = Path(run_dir) / c["path"]
            if not path.exists() or ckpt.file_sha256(path) != c["sha256"]:
                raise ckpt.CheckpointError(f"ledger checkpoint {c['path']} missing or modified")


def prompt_for(record: TripleRecord, use_rich_text: bool, embedder: EmbedderBackend | None = None) -> TextPrompt:
    count = None
    if embedder is not None and embedder.name == "external":
        count = embedder.count_tokens
    return build_prompt(record.category, record.text if use_rich_text else None, count_tokens=count)


def input_seed(seed: int, record: TripleRecord) -> int:
    """Seed for resampling a record's partial cloud to the network input size."""
    return int(seeded_rng("input", seed, record.model_id).integers(2**31))


class _SampleCache:
    """Per-record tensors and frozen embeddings, computed once."""

    def __init__(self, records, config: TrainConfig, embedder: EmbedderBackend):
        self.records = records
        self.cfg = config
        self.fcfg = config.fusion
        self.embedder = embedder
        self.partials = [
            torch.tensor(resample(r.partial, self.fcfg.input_points, "random", seed=input_seed(config.seed, r)).points,
                         dtype=torch.float32)
            for r in records
        ]
        self.gts = [torch.tensor(r.gt.points, dtype=torch.float32) for r in records]
        self._images: dict[tuple[int, int], RenderedImage] = {}
        self._g_vis: dict[tuple[int, int], torch.Tensor] = {}
        self._g_txt: dict[int, torch.Tensor] = {}

    def image(self, i, epoch, train=True):
        rec = self.records[i]
        view = int(seeded_rng("view", self.cfg.seed, rec.model_id, epoch).integers(0, 24)) if train else 0
        key = (i, view)
        if key not in self._images:
            img = pick_view(rec, self.cfg.seed, epoch, train)
            self._images[key] = img
            if self.fcfg.use_visual_global:
                self._g_vis[key] = torch.tensor(self.embedder.embed_image(img).values)
        return self._images[key], key

    def text(self, i):
        if i not in self._g_txt:
            prompt = prompt_for(self.records[i], self.fcfg.use_rich_text, self.embedder)
            self._g_txt[i] = torch.tensor(self.embedder.embed_text(prompt).values)
        return self._g_txt[i]

    def batch(self, idx, epoch, train=True):
        imgs, g_vis, g_txt = [], [], []
        for i in idx:
            img, key = self.image(i, epoch, train)
            imgs.append(torch.tensor(img.pixels))
            if self.fcfg.use_visual_global:
                g_vis.append(self._g_vis[key])
            if self.fcfg.use_text_global:
                g_txt.append(self.text(i))
        return (
            torch.stack([self.partials[i] for i in idx]),
            torch.stack(imgs),
            torch.stack(g_vis) if g_vis else None,
            torch.stack(g_txt) if g_txt else None,
            torch.stack([self.gts[i] for i in idx]),
        )


def _records(config: TrainConfig, subset: str) -> list[TripleRecord]:
    loader = load_triples(config.data_root, config.split(), config.corpus or None, subset)
    return list(loader)


def _adam(config: TrainConfig):
    return lambda params: torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2))


def _weight_norms(model) -> dict[str, float]:
    return {n: float(p.detach().norm()) for n, p in model.named_parameters()}


def train(config: TrainConfig, run_dir, resume: Optional[str] = None,
          records: Optional[list[TripleRecord]] = None, embedder: Optional[EmbedderBackend] = None) -> RunLedger:
    """Train with Adam on batch-mean Chamfer loss; checkpoints land in ``run_dir``.

    ``resume`` names a checkpoint written by an earlier run of the same
    config; training continues from the epoch after it.
    """
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    records = records if records is not None else _records(config, "train")
    if not records:
        raise ValueError("no training records")
    embedder = embedder or make_embedder(config.embedder_backend, config.embedder_endpoint, config.seed)
    cache = _SampleCache(records, config, embedder)

    if resume:
        model, optimizer, meta = ckpt.load_model(resume, config.fusion, _adam(config))
        if meta.get("config_hash") != config.hash():
            raise ckpt.CheckpointError("resume checkpoint was written with a different training config")
        start = meta["epoch"] + 1
        resume = Path(resume)
        checkpoints = list(meta["checkpoints"]) + [
            {"epoch": meta["epoch"], "path": resume.name, "sha256": ckpt.file_sha256(resume)}]
        ledger = RunLedger(config.hash(), list(meta["epochs"]), checkpoints, [])
        if resume.resolve().parent != run_dir.resolve():
            for c in ledger.checkpoints:
                src = Path(resume).parent / c["path"]
                if src.exists() and not (run_dir / c["path"]).exists():
                    (run_dir / c["path"]).write_bytes(src.read_bytes())
    else:
        model = CompletionModel(replace(config.fusion))
        optimizer = _adam(config)(model.parameters())
        start = 1
        ledger = RunLedger(config.hash())

    n = len(records)
    for epoch in range(start, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = seeded_rng("shuffle", config.seed, epoch).permutation(n)
        total = 0.0
        for b in range(0, n, config.batch_size):
            idx = [int(i) for i in order[b : b + config.batch_size]]
            partial, img, g_vis, g_txt, gt = cache.batch(idx, epoch)
            optimizer.zero_grad(set_to_none=True)
            per_sample = chamfer_loss(model(partial, img, g_vis, g_txt), gt)
            batch_loss = per_sample.mean()
            if not torch.isfinite(batch_loss):
                dump = {"epoch": epoch, "batch_start": b, "model_ids": [records[i].model_id for i in idx],
                        "per_sample_loss": [float(x) for x in per_sample.detach()],
                        "weight_norms": _weight_norms(model)}
                (run_dir / "diverged.json").write_text(json.dumps(dump, indent=1))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b // config.batch_size}: "
                                       f"models {dump['model_ids']}")
            batch_loss.backward()
            optimizer.step()
            total += float(per_sample.detach().double().sum())
        ledger.epochs.append({"epoch": epoch, "loss": total / n, "wall_clock": time.perf_counter() - t0})
        log.info("epoch %d loss %.6f", epoch, total / n)
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            name = f"epoch_{epoch:04d}.ckpt"
            meta = {"epoch": epoch, "config_hash": config.hash(), "epochs": ledger.comparable()["epochs"],
                    "checkpoints": list(ledger.checkpoints), "embedder_backend": config.embedder_backend,
                    "embedder_seed": config.seed}
            digest = ckpt.save_model(run_dir / name, model, optimizer, meta)
            ledger.checkpoints.append({"epoch": epoch, "path": name, "sha256": digest})
        ledger.save(run_dir)
    return ledger


# evaluation -----------------------------------------------------------------

def evaluate_predictor(predict: Callable[[TripleRecord], PointCloud], records: Iterable[TripleRecord],
                       tau: float = 0.001, header: Optional[dict] = None) -> MetricReport:
    """Score predictions after mapping pred and gt through the gt's normalizing transform."""
    samples = []
    for rec in records:
        pred = predict(rec)
        center, scale = bbox_transform(rec.gt)
        gt_n = apply_transform(rec.gt, center, scale)
        pred_n = apply_transform(pred, center, scale)
        samples.append((rec.category, chamfer_distance(pred_n, gt_n), fscore(pred_n, gt_n, tau)))
    head = {"normalization": "pred and gt mapped by the gt bounding-box transform", "tau": repr(tau),
            "view": "0"}
    head.update(header or {})
    return MetricReport.from_samples(samples, tau, head)


def model_predictor(model: CompletionModel, embedder: EmbedderBackend, seed: int = 0):
    model.eval()
    fcfg = model.config

    def predict(rec: TripleRecord) -> PointCloud:
        image = pick_view(rec, seed, train=False)
        prompt = prompt_for(rec, fcfg.use_rich_text, embedder) if fcfg.use_text_global else None
        return forward(model, rec.partial, image, prompt, embedder, seed=input_seed(seed, rec))

    return predict


def evaluate(checkpoint_path, config: TrainConfig, subset: str = "eval",
             records: Optional[list[TripleRecord]] = None, tau: Optional[float] = None,
             embedder: Optional[EmbedderBackend] = None) -> MetricReport:
    """Per-category CD x 1e3 and F-Score of a checkpoint; reads files only."""
    model, _, _ = ckpt.load_model(checkpoint_path, config.fusion)
    embedder = embedder or make_embedder(config.embedder_backend, config.embedder_endpoint, config.seed)
    records = records if records is not None else _records(config, subset)
    return evaluate_predictor(model_predictor(model, embedder, config.seed), records,
                              config.eval_tau if tau is None else tau,
                              {"checkpoint_sha256": ckpt.file_sha256(checkpoint_path), "subset": subset})


# ablation -------------------------------------------------------------------

ABLATION_GRID = [
    ("baseline", dict(use_visual_global=False, use_text_global=False, fuse_stage1=False, fuse_stage2=False, use_rich_text=False)),
    ("w/ visual", dict(use_visual_global=True, use_text_global=False, fuse_stage1=True, fuse_stage2=True, use_rich_text=False)),
    ("w/ text", dict(use_visual_global=False, use_text_global=True, fuse_stage1=True, fuse_stage2=True, use_rich_text=False)),
    ("visual+text stage1", dict(use_visual_global=True, use_text_global=True, fuse_stage1=True, fuse_stage2=False, use_rich_text=False)),
    ("visual+text stage2", dict(use_visual_global=True, use_text_global=True, fuse_stage1=False, fuse_stage2=True, use_rich_text=False)),
    ("visual+text both", dict(use_visual_global=True, use_text_global=True, fuse_stage1=True, fuse_stage2=True, use_rich_text=False)),
    ("final (rich text)", dict(use_visual_global=True, use_text_global=True, fuse_stage1=True, fuse_stage2=True, use_rich_text=True)),
]


def improvement_pct(base: float, value: float, higher_is_better: bool = False) -> float:
    """Relative gain over ``base`` in percent; positive means better."""
    gain = value - base if higher_is_better else base - value
    return 100.0 * gain / base


def ablate(base_config: TrainConfig, out_dir, grid=ABLATION_GRID,
           train_records=None, eval_records=None) -> list[dict]:
    """Train and evaluate every grid row with shared seeds; writes ablation.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in grid:
        cfg = replace(base_config, fusion=replace(base_config.fusion, **overrides))
        run_dir = out_dir / name.replace("/", "").replace(" ", "_").replace("(", "").replace(")", "")
        ledger = train(cfg, run_dir, records=train_records)
        report = evaluate(run_dir / ledger.checkpoints[-1]["path"], cfg, records=eval_records)
        report.write_csv(run_dir / "report.csv")
        rows.append({"name": name, "fusion": overrides, "report": report,
                     "params": CompletionModel(cfg.fusion).parameter_count})
    base_cd, base_fs = rows[0]["report"].mean
    categories = list(rows[0]["report"].per_category)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ablation", "fusion_stage1", "fusion_stage2", "params", "mean_cd_e3", "cd_improv_pct",
                    "mean_fscore", "fscore_improv_pct", *[f"cd_{c}" for c in categories],
                    *[f"fscore_{c}" for c in categories]])
        for row in rows:
            cd, fs = row["report"].mean
            row["cd_improv_pct"] = improvement_pct(base_cd, cd) if base_cd else 0.0
            row["fscore_improv_pct"] = improvement_pct(base_fs, fs, True) if base_fs else 0.0
            pc = row["report"].per_category
            w.writerow([row["name"], row["fusion"]["fuse_stage1"], row["fusion"]["fuse_stage2"], row["params"],
                        f"{cd:.6f}", f"{row['cd_improv_pct']:.2f}", f"{fs:.6f}", f"{row['fscore_improv_pct']:.2f}",
                        *[f"{pc[c][0]:.6f}" for c in categories], *[f"{pc[c][1]:.6f}" for c in categories]])
    return rows


# inference ------------------------------------------------------------------

def plot_cloud(cloud: PointCloud, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = cloud.points
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, (i, j), title in zip(axes, [(0, 1), (2, 1), (0, 2)], ["front", "side", "top"]):
        ax.scatter(pts[:, i], pts[:, j], s=1)
        ax.set_aspect("equal")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def complete(checkpoint_path, partial_path, image_path, out_path, prompt: Optional[str] = None,
             category: Optional[str] = None, plot_path=None, embedder: Optional[EmbedderBackend] = None,
             seed: int = 0) -> PointCloud:
    """Complete one partial cloud and write the result as XYZ.

    ``prompt`` is the rich description; without it a text-enabled model gets
    the plain ``This is a {category}`` template.
    """
    for p in (checkpoint_path, partial_path, image_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    model, _, meta = ckpt.load_model(checkpoint_path)
    image = load_image(image_path)
    partial = read_xyz(partial_path)
    text_prompt = None
    if model.config.use_text_global:
        if not category:
            raise ValueError("a category is required for text-enabled models")
        text_prompt = build_prompt(category, prompt)
    embedder = embedder or make_embedder("stub", seed=meta.get("embedder_seed", 0))
    model.eval()
    result = forward(model, partial, image, text_prompt, embedder, seed=seed)
    out_path = Path(out_path)
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    write_xyz(tmp, result)
    tmp.replace(out_path)
    if plot_path:
        plot_cloud(result, plot_path)
    return result
