"""Experiment configuration and the dataset / train / sample / evaluate / ablate steps."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from physcene.denoiser import Checkpoint, Denoiser, DenoiserConfig, TrainingConfig, floor_mask, save_checkpoint, train
from physcene.diffusion import GuidanceConfig, make_schedule
from physcene.metrics import MetricsReport, evaluate_scenes
from physcene.reachability import DEFAULT_RESOLUTION, AgentSpec
from physcene.render import write_svg
from physcene.sampling import guidance_config, sample_scenes
from physcene.scene import FloorPlan, NormStats, SceneCodec, SceneLayout, Taxonomy
from physcene.scene_io import SceneDocument, canonical_json, load_scene, write_scene
from physcene.synthetic import GeneratorConfig, generate_dataset, split

logger = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("none", ()),
    ("collision", ("coll",)),
    ("layout", ("layout",)),
    ("reach", ("reach",)),
    ("all", ("coll", "layout", "reach")),
)


def _build(cls, d: Optional[dict], where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything one pipeline run needs; relative paths resolve against ``base_dir``."""

    dataset: str = "out/dataset"
    checkpoint: str = "out/model.ckpt"
    output_dir: str = "out"
    n_scenes: int = 2000
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_eval: int = 256
    seed: int = 0
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    resolution: float = DEFAULT_RESOLUTION
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    agent: AgentSpec = field(default_factory=AgentSpec)
    base_dir: str = "."

    def __post_init__(self):
        if self.n_scenes < 1 or self.n_eval < 1:
            raise ValueError("n_scenes and n_eval must be positive")
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.model.T != self.T:
            raise ValueError(f"model.T ({self.model.T}) must equal the schedule length T ({self.T})")

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        d = dict(d)
        nested = {
            "generator": GeneratorConfig,
            "model": DenoiserConfig,
            "training": TrainingConfig,
            "guidance": GuidanceConfig,
            "agent": AgentSpec,
        }
        kwargs = {}
        for key, typ in nested.items():
            if key in d:
                kwargs[key] = _build(typ, d.pop(key), key)
        top = {f.name for f in fields(cls)} - set(nested)
        unknown = set(d) - top
        if unknown:
            raise ValueError(f"unknown experiment key(s) {sorted(unknown)}")
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        kwargs.setdefault("base_dir", base_dir)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=str(path.parent))

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)


# ---------------------------------------------------------------------------
# dataset


def write_dataset(cfg: ExperimentConfig, out: Optional[Path] = None) -> Path:
    """Scene files under ``out/scenes`` plus ``manifest.json`` with the split."""
    out = out or cfg.path(cfg.dataset)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(cfg.generator, cfg.n_scenes)
    tax = cfg.generator.taxonomy
    names = []
    for s in samples:
        name = f"{s.floor.floor_id}.json"
        extra = {"violations": list(s.violations)} if s.violations else None
        write_scene(out / "scenes" / name, s.scene, s.floor, tax, extra=extra)
        names.append(name)
    parts = split(names, cfg.split_ratios, np.random.default_rng(cfg.seed))
    manifest = {
        "schema_version": 1,
        "count": len(names),
        "seed": cfg.generator.seed,
        "categories": list(tax.categories),
        "flagged": [n for n, s in zip(names, samples) if s.flagged],
        "splits": {k: sorted(v) for k, v in zip(("train", "val", "test"), parts)},
    }
    (out / "manifest.json").write_text(canonical_json(manifest))
    return out


def scene_files(directory: Path, part: Optional[str] = None) -> list[Path]:
    """Scene files of a dataset split, or every ``*.json`` in a plain directory."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        names = m["splits"][part] if part else sorted(n for v in m["splits"].values() for n in v)
        return [directory / "scenes" / n for n in names]
    files = sorted(p for p in directory.glob("*.json") if p.name not in ("report.json", "ablation.json"))
    if not files:
        raise FileNotFoundError(f"no scene files in {directory}")
    return files


def load_documents(paths: Sequence[Path], taxonomy: Taxonomy, n_slots: Optional[int] = None) -> list[SceneDocument]:
    return [load_scene(p, taxonomy, n_slots) for p in paths]


# ---------------------------------------------------------------------------
# training


def train_model(cfg: ExperimentConfig, log_csv: Optional[Path] = None) -> tuple[Checkpoint, list[float]]:
    tax = cfg.generator.taxonomy
    docs = load_documents(scene_files(cfg.path(cfg.dataset), "train"), tax, cfg.model.n_slots)
    scenes = [d.scene for d in docs]
    stats = NormStats.from_scenes(scenes)
    codec = SceneCodec(tax, stats, cfg.model.n_slots)
    if codec.slot_dim != cfg.model.slot_dim:
        raise ValueError(f"model slot_dim {cfg.model.slot_dim} does not match taxonomy ({codec.slot_dim})")
    x0 = np.stack([codec.encode(s) for s in scenes])
    masks = np.stack([floor_mask(d.floor) for d in docs])
    model = Denoiser(cfg.model, seed=cfg.training.seed)
    start = time.perf_counter()
    result = train(model, x0, masks, cfg.schedule(), cfg.training)
    ckpt = Checkpoint(
        result.model,
        stats,
        tax,
        cfg.beta_start,
        cfg.beta_end,
        {"steps": cfg.training.steps, "train_scenes": len(scenes)},
    )
    logger.info("trained %d steps in %.0fs", cfg.training.steps, time.perf_counter() - start)
    path = cfg.path(cfg.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, ckpt)
    if log_csv is not None:
        log_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(log_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(result.losses, 1):
                w.writerow([i, f"{v:.9g}"])
    return ckpt, result.losses


# ---------------------------------------------------------------------------
# sampling and evaluation


def pick_floors(floors: Sequence[FloorPlan], n: int) -> list[FloorPlan]:
    if not floors:
        raise ValueError("no floors to sample on")
    return [floors[i % len(floors)] for i in range(n)]


def sample_to_dir(
    ckpt: Checkpoint,
    floors: Sequence[FloorPlan],
    out: Path,
    guidance: GuidanceConfig,
    agent: AgentSpec,
    seed: int,
    resolution: float = DEFAULT_RESOLUTION,
    svg: bool = True,
) -> list[SceneLayout]:
    codec = SceneCodec(ckpt.taxonomy, ckpt.stats, ckpt.model.config.n_slots)
    sched = make_schedule(ckpt.model.config.T, ckpt.beta_start, ckpt.beta_end)
    incidents: Counter = Counter()
    scenes = sample_scenes(ckpt.model, codec, floors, guidance, agent, seed, sched, resolution, incidents=incidents)
    out.mkdir(parents=True, exist_ok=True)
    for k, (scene, floor) in enumerate(zip(scenes, floors)):
        stem = f"sample-{k:05d}"
        write_scene(out / f"{stem}.json", scene, floor, ckpt.taxonomy, extra={"source_floor": floor.floor_id})
        if svg:
            write_svg(out / f"{stem}.svg", scene, floor, ckpt.taxonomy, title=stem)
    return scenes


def evaluate_dir(
    scenes_dir: Path,
    agent: AgentSpec,
    taxonomy: Taxonomy,
    reference_dir: Optional[Path] = None,
    floors_dir: Optional[Path] = None,
    resolution: float = DEFAULT_RESOLUTION,
    seed: int = 0,
) -> MetricsReport:
    docs = load_documents(scene_files(scenes_dir), taxonomy)
    floors = [d.floor for d in docs]
    if floors_dir is not None:
        by_id = {p.stem: load_scene(p, taxonomy).floor for p in scene_files(floors_dir)}
        floors = []
        for d in docs:
            key = d.extra.get("source_floor", d.scene.floor_id)
            if key not in by_id:
                raise FileNotFoundError(f"no floor {key!r} in {floors_dir}")
            floors.append(by_id[key])
    reference = None
    if reference_dir is not None:
        reference = [d.scene for d in load_documents(scene_files(reference_dir, "train"), taxonomy)]
    return evaluate_scenes([d.scene for d in docs], floors, agent, reference, taxonomy, seed, resolution)


@dataclass
class AblationRow:
    label: str
    terms: tuple[str, ...]
    report: MetricsReport
    seconds: float


def run_ablation(
    ckpt: Checkpoint,
    floors: Sequence[FloorPlan],
    base: GuidanceConfig,
    agent: AgentSpec,
    seed: int,
    resolution: float = DEFAULT_RESOLUTION,
    reference: Optional[Sequence[SceneLayout]] = None,
    rows: Sequence[tuple[str, tuple[str, ...]]] = ABLATION_ROWS,
    out: Optional[Path] = None,
) -> list[AblationRow]:
    """Same floors and seed for every row; only the active guidance terms change."""
    codec = SceneCodec(ckpt.taxonomy, ckpt.stats, ckpt.model.config.n_slots)
    sched = make_schedule(ckpt.model.config.T, ckpt.beta_start, ckpt.beta_end)
    results = []
    for label, terms in rows:
        start = time.perf_counter()
        scenes = sample_scenes(ckpt.model, codec, floors, guidance_config(terms, base), agent, seed, sched, resolution)
        report = evaluate_scenes(scenes, floors, agent, reference, ckpt.taxonomy, seed, resolution)
        row = AblationRow(label, tuple(terms), report, time.perf_counter() - start)
        logger.info("ablation row %s: %s (%.0fs)", label, report.summary(), row.seconds)
        results.append(row)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            for k in range(min(4, len(scenes))):
                write_svg(out / f"{label}-{k}.svg", scenes[k], floors[k], ckpt.taxonomy, title=label)
    return results


def ablation_table(rows: Sequence[AblationRow]) -> str:
    head = (
        f"{'guidance':<10} {'coll':>4} {'layout':>6} {'reach':>5}  "
        f"{'Col_obj':>8} {'R_out':>8} {'R_walkable':>10} {'R_reach':>8}"
    )
    lines = [head, "-" * len(head)]
    for r in rows:
        m = r.report
        on = ["x" if n in r.terms else "-" for n in ("coll", "layout", "reach")]
        lines.append(
            f"{r.label:<10} {on[0]:>4} {on[1]:>6} {on[2]:>5}  "
            f"{m.col_obj:>8.4f} {m.r_out:>8.4f} {m.r_walkable:>10.4f} {m.r_reach:>8.4f}"
        )
    return "\n".join(lines)


def ablation_json(rows: Sequence[AblationRow], guidance: GuidanceConfig, seed: int) -> str:
    return canonical_json(
        {
            "seed": seed,
            "guidance": asdict(guidance),
            "rows": [
                {
                    "label": r.label,
                    "terms": list(r.terms),
                    "seconds": round(r.seconds, 1),
                    "metrics": r.report.summary(),
                }
                for r in rows
            ],
        }
    )
